//! Seeded self-checks of the micro pyramid's analytic properties.
//!
//! Each check runs on freshly generated random instances, measures the worst
//! error it sees, and compares against a pinned tolerance. The overall report
//! passes only if every check does.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::fpn::{
    fpn_backward, fpn_forward, gradient_decomposition, gradient_decomposition_vjp,
    random_backbone, reparameterize, FeatureMap, FpnDims, FpnParams, LossSpec,
};
use crate::fusion::FusionFactors;

/// Fusion-factor values exercised by the rescaling-equivalence check.
pub const EQUIVALENCE_SIGMAS: [f64; 3] = [0.25, 0.5, 0.9];
/// Fusion-factor values exercised by the linearity check.
pub const LINEARITY_ALPHAS: [f64; 3] = [0.25, 0.5, 1.0];

pub const TOL_EQUIVALENCE: f64 = 1e-9;
pub const TOL_GRADIENT_FD: f64 = 1e-4;
pub const TOL_ALPHA_LINEARITY: f64 = 1e-9;
pub const TOL_DECOMPOSITION_SUM: f64 = 1e-12;
pub const TOL_FORWARD_LINEARITY: f64 = 1e-12;
/// Bitwise checks allow no error at all.
pub const TOL_EXACT: f64 = 0.0;

/// Finite-difference step for the gradient check.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for per-entry relative errors, so vanishing gradient
/// entries demand matching absolute precision instead of dividing by zero.
const FD_REL_FLOOR: f64 = 1e-4;

/// Outcome of one named check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    /// Worst error observed across all instances of the check.
    pub max_error: f64,
    pub tolerance: f64,
    pub seed: u64,
}

/// All checks of one run; `passed` is the conjunction of the records.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub seed: u64,
    pub passed: bool,
    pub checks: Vec<CheckRecord>,
}

impl VerifyReport {
    fn from_checks(seed: u64, checks: Vec<CheckRecord>) -> Self {
        Self {
            schema_version: 1,
            seed,
            passed: checks.iter().all(|c| c.passed),
            checks,
        }
    }
}

struct Instance {
    params: FpnParams,
    inputs: Vec<FeatureMap>,
    loss: LossSpec,
}

fn make_instance(seed: u64, dims: FpnDims) -> Instance {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = FpnParams::random(dims, &mut rng).expect("verify dims are valid");
    let inputs = random_backbone(&dims, &mut rng);
    let loss = LossSpec::random(&dims, &mut rng);
    Instance {
        params,
        inputs,
        loss,
    }
}

fn small_dims() -> FpnDims {
    FpnDims {
        in_channels: [2, 3, 2, 2],
        out_channels: 2,
        base_height: 8,
        base_width: 8,
    }
}

fn medium_dims() -> FpnDims {
    FpnDims {
        in_channels: [4, 3, 2, 4],
        out_channels: 3,
        base_height: 16,
        base_width: 16,
    }
}

/// Worst-entry difference between two maps, relative to their magnitudes.
fn map_relative_error(a: &FeatureMap, b: &FeatureMap) -> f64 {
    let scale = a.max_abs().max(b.max_abs());
    if scale == 0.0 {
        return 0.0;
    }
    let mut worst = 0.0_f64;
    for (x, y) in a.data().iter().zip(b.data()) {
        worst = worst.max((x - y).abs());
    }
    worst / scale
}

/// Rescaling the per-level weights by powers of sigma with the fusion factor
/// pinned at 1 must reproduce the pyramid run at fusion factor sigma.
pub fn check_equivalence(seed: u64, instances: u64) -> CheckRecord {
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let inst = make_instance(seed.wrapping_add(k), medium_dims());
        for sigma in EQUIVALENCE_SIGMAS {
            let rescaled = reparameterize(&inst.params, sigma).expect("sigma is positive");
            let via_weights =
                fpn_forward(&inst.inputs, &rescaled, &FusionFactors::uniform(1.0)).unwrap();
            let via_alpha =
                fpn_forward(&inst.inputs, &inst.params, &FusionFactors::uniform(sigma)).unwrap();
            for (a, b) in via_weights.pyramid.iter().zip(&via_alpha.pyramid) {
                worst = worst.max(map_relative_error(a, b));
            }
        }
    }
    CheckRecord {
        name: "reparameterization_equivalence".into(),
        passed: worst <= TOL_EQUIVALENCE,
        max_error: worst,
        tolerance: TOL_EQUIVALENCE,
        seed,
    }
}

/// Central finite differences over every input and parameter entry.
pub fn check_gradient_fd(seed: u64, instances: u64) -> CheckRecord {
    let mut worst = 0.0_f64;
    for k in 0..instances {
        // Keep one instance at the largest checked geometry, the rest small.
        let dims = if k == 0 { medium_dims() } else { small_dims() };
        let inst = make_instance(seed.wrapping_add(k), dims);
        let alphas = FusionFactors::new([0.6, 0.45, 0.8]);
        worst = worst.max(worst_fd_error(&inst, &alphas));
    }
    CheckRecord {
        name: "gradient_matches_finite_difference".into(),
        passed: worst <= TOL_GRADIENT_FD,
        max_error: worst,
        tolerance: TOL_GRADIENT_FD,
        seed,
    }
}

fn worst_fd_error(inst: &Instance, alphas: &FusionFactors) -> f64 {
    let analytic = fpn_backward(&inst.inputs, &inst.params, alphas, &inst.loss).unwrap();
    let mut worst = 0.0_f64;

    let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(FD_REL_FLOOR);
    let loss_of = |inputs: &[FeatureMap], params: &FpnParams| -> f64 {
        inst.loss
            .evaluate(&fpn_forward(inputs, params, alphas).unwrap())
    };

    // Backbone entries.
    for l in 0..4 {
        let mut inputs = inst.inputs.to_vec();
        for idx in 0..inputs[l].data().len() {
            let original = inputs[l].data()[idx];
            inputs[l].data_mut()[idx] = original + FD_STEP;
            let plus = loss_of(&inputs, &inst.params);
            inputs[l].data_mut()[idx] = original - FD_STEP;
            let minus = loss_of(&inputs, &inst.params);
            inputs[l].data_mut()[idx] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel(analytic.backbone.grads[l].data()[idx], fd));
        }
    }

    // Weight entries, both convolutions.
    for l in 0..4 {
        let mut params = inst.params.clone();
        for idx in 0..params.inner_weights(l).len() {
            let original = params.inner_weights(l)[idx];
            params.inner_weights_mut(l)[idx] = original + FD_STEP;
            let plus = loss_of(&inst.inputs, &params);
            params.inner_weights_mut(l)[idx] = original - FD_STEP;
            let minus = loss_of(&inst.inputs, &params);
            params.inner_weights_mut(l)[idx] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel(analytic.param_grads.inner_weights(l)[idx], fd));
        }
        for idx in 0..params.layer_weights(l).len() {
            let original = params.layer_weights(l)[idx];
            params.layer_weights_mut(l)[idx] = original + FD_STEP;
            let plus = loss_of(&inst.inputs, &params);
            params.layer_weights_mut(l)[idx] = original - FD_STEP;
            let minus = loss_of(&inst.inputs, &params);
            params.layer_weights_mut(l)[idx] = original;
            let fd = (plus - minus) / (2.0 * FD_STEP);
            worst = worst.max(rel(analytic.param_grads.layer_weights(l)[idx], fd));
        }
    }
    worst
}

/// The shallow gradient component divided by its fusion factor must not
/// depend on the factor.
///
/// The upstream loss gradients are frozen at the conventional-pyramid state
/// (`alpha_3^4 = 1`) before the factor is swept: the claim is about how the
/// backward structure carries the factor, and a quadratic loss would
/// otherwise re-evaluate its residual at every factor.
pub fn check_alpha_linearity(seed: u64, instances: u64) -> CheckRecord {
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let inst = make_instance(seed.wrapping_add(k), medium_dims());
        let reference = FusionFactors::new([0.7, 1.0, 0.9]);
        let ref_outputs = fpn_forward(&inst.inputs, &inst.params, &reference).unwrap();
        let cotangents = inst.loss.residuals(&ref_outputs);

        let mut normalized: Vec<FeatureMap> = Vec::new();
        for alpha34 in LINEARITY_ALPHAS {
            let alphas = FusionFactors::new([0.7, alpha34, 0.9]);
            let parts =
                gradient_decomposition_vjp(&inst.inputs, &inst.params, &alphas, &cotangents)
                    .unwrap();
            let mut s = parts.shallow[2].clone(); // C4
            s.scale(1.0 / alpha34);
            normalized.push(s);
        }
        for s in &normalized[1..] {
            worst = worst.max(map_relative_error(&normalized[0], s));
        }
    }
    CheckRecord {
        name: "shallow_gradient_alpha_linearity".into(),
        passed: worst <= TOL_ALPHA_LINEARITY,
        max_error: worst,
        tolerance: TOL_ALPHA_LINEARITY,
        seed,
    }
}

/// The deep gradient component w.r.t. C4 must not move at all when
/// `alpha_3^4` changes.
pub fn check_deep_independence(seed: u64, instances: u64) -> CheckRecord {
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let inst = make_instance(seed.wrapping_add(k), medium_dims());
        let mut previous: Option<FeatureMap> = None;
        for alpha34 in LINEARITY_ALPHAS {
            let alphas = FusionFactors::new([0.7, alpha34, 0.9]);
            let parts =
                gradient_decomposition(&inst.inputs, &inst.params, &alphas, &inst.loss).unwrap();
            if let Some(prev) = &previous {
                if !prev.bitwise_eq(&parts.deep[2]) {
                    worst = worst.max(map_relative_error(prev, &parts.deep[2]).max(f64::MIN_POSITIVE));
                }
            }
            previous = Some(parts.deep[2].clone());
        }
    }
    CheckRecord {
        name: "deep_gradient_alpha_independence".into(),
        passed: worst <= TOL_EXACT,
        max_error: worst,
        tolerance: TOL_EXACT,
        seed,
    }
}

/// Deep plus shallow components must reassemble the joint backward pass.
pub fn check_decomposition_sum(seed: u64, instances: u64) -> CheckRecord {
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let inst = make_instance(seed.wrapping_add(k), medium_dims());
        let alphas = FusionFactors::new([0.35, 0.8, 0.55]);
        let total = fpn_backward(&inst.inputs, &inst.params, &alphas, &inst.loss).unwrap();
        let parts =
            gradient_decomposition(&inst.inputs, &inst.params, &alphas, &inst.loss).unwrap();
        for l in 0..4 {
            let rebuilt = parts.total(l);
            for (a, b) in rebuilt.data().iter().zip(total.backbone.grads[l].data()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    CheckRecord {
        name: "gradient_decomposition_sum".into(),
        passed: worst <= TOL_DECOMPOSITION_SUM,
        max_error: worst,
        tolerance: TOL_DECOMPOSITION_SUM,
        seed,
    }
}

/// With every fusion factor at zero, deeper inputs must not reach shallower
/// outputs, bit for bit.
pub fn check_decoupling_at_zero(seed: u64, instances: u64) -> CheckRecord {
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let inst = make_instance(seed.wrapping_add(k), medium_dims());
        let alphas = FusionFactors::uniform(0.0);
        let base = fpn_forward(&inst.inputs, &inst.params, &alphas).unwrap();
        let mut perturbed = inst.inputs.clone();
        for v in perturbed[3].data_mut() {
            *v += 1.0;
        }
        let shifted = fpn_forward(&perturbed, &inst.params, &alphas).unwrap();
        for level in 0..3 {
            if !base.pyramid[level].bitwise_eq(&shifted.pyramid[level]) {
                worst = worst
                    .max(map_relative_error(&base.pyramid[level], &shifted.pyramid[level])
                        .max(f64::MIN_POSITIVE));
            }
        }
    }
    CheckRecord {
        name: "decoupling_at_alpha_zero".into(),
        passed: worst <= TOL_EXACT,
        max_error: worst,
        tolerance: TOL_EXACT,
        seed,
    }
}

/// Scaling every input by a constant must scale every output by the same
/// constant — the graph has no biases to break homogeneity.
pub fn check_forward_linearity(seed: u64, instances: u64) -> CheckRecord {
    let lambda = 1.75;
    let mut worst = 0.0_f64;
    for k in 0..instances {
        let inst = make_instance(seed.wrapping_add(k), medium_dims());
        let alphas = FusionFactors::new([0.5, 1.0, 0.75]);
        let base = fpn_forward(&inst.inputs, &inst.params, &alphas).unwrap();
        let mut scaled_inputs = inst.inputs.clone();
        for m in &mut scaled_inputs {
            m.scale(lambda);
        }
        let scaled = fpn_forward(&scaled_inputs, &inst.params, &alphas).unwrap();
        for (a, b) in base.pyramid.iter().zip(&scaled.pyramid) {
            let mut expect = a.clone();
            expect.scale(lambda);
            worst = worst.max(map_relative_error(&expect, b));
        }
    }
    CheckRecord {
        name: "forward_linearity".into(),
        passed: worst <= TOL_FORWARD_LINEARITY,
        max_error: worst,
        tolerance: TOL_FORWARD_LINEARITY,
        seed,
    }
}

/// Identical seeds must reproduce identical numbers, bit for bit.
pub fn check_determinism(seed: u64) -> CheckRecord {
    let run = || {
        let inst = make_instance(seed, medium_dims());
        let alphas = FusionFactors::uniform(0.5);
        fpn_backward(&inst.inputs, &inst.params, &alphas, &inst.loss).unwrap()
    };
    let a = run();
    let b = run();
    let mut identical = a.loss.to_bits() == b.loss.to_bits();
    for (x, y) in a.backbone.grads.iter().zip(&b.backbone.grads) {
        identical &= x.bitwise_eq(y);
    }
    CheckRecord {
        name: "deterministic_replay".into(),
        passed: identical,
        max_error: if identical { 0.0 } else { f64::MIN_POSITIVE },
        tolerance: TOL_EXACT,
        seed,
    }
}

/// Run the full invariant suite.
pub fn run_verification(seed: u64) -> VerifyReport {
    let checks = vec![
        check_equivalence(seed, 5),
        check_gradient_fd(seed, 3),
        check_alpha_linearity(seed, 5),
        check_deep_independence(seed, 5),
        check_decomposition_sum(seed, 5),
        check_decoupling_at_zero(seed, 5),
        check_forward_linearity(seed, 5),
        check_determinism(seed),
    ];
    VerifyReport::from_checks(seed, checks)
}
