//! A small, exactly linear feature pyramid with manual forward and reverse
//! passes.
//!
//! Levels 2..=5 take backbone maps `C2..C5` whose spatial dims halve level to
//! level. Each level projects with a 1x1 convolution, adds the fusion-factor-
//! weighted 2x upsampling of the next-deeper fused map, and finishes with a
//! 3x3 convolution. The sixth output is a stride-2 subsample of the fifth.
//! There are no biases and no nonlinearities anywhere, so the whole graph is
//! linear — which is what makes the weight-rescaling equivalence and the
//! gradient decomposition checked by [`crate::verify`] exact rather than
//! approximate.

pub mod tensor;

use rand::Rng;

use crate::error::FpnError;
use crate::fusion::FusionFactors;
pub use tensor::FeatureMap;
use tensor::{
    conv1x1_backward_input, conv1x1_backward_weights, conv1x1_forward, conv3x3_backward_input,
    conv3x3_backward_weights, conv3x3_forward, subsample2, subsample2_backward, upsample2x,
    upsample2x_backward,
};

/// Backbone levels carrying parameters (C2..C5).
pub const BACKBONE_LEVELS: usize = 4;
/// Pyramid outputs (P2..P6).
pub const PYRAMID_LEVELS: usize = 5;

/// Weight initialization range for [`FpnParams::random`].
const WEIGHT_AMPLITUDE: f64 = 0.1;
/// Loss targets stay comparable to pyramid outputs; this keeps the quadratic
/// loss small enough for well-conditioned finite differencing.
const TARGET_AMPLITUDE: f64 = 0.25;

/// Geometry of one pyramid instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FpnDims {
    /// Channels of C2..C5.
    pub in_channels: [usize; BACKBONE_LEVELS],
    /// Shared channel count of every fused and output map.
    pub out_channels: usize,
    /// Spatial size of C2; must be divisible by 8 so dims halve exactly
    /// down to C5.
    pub base_height: usize,
    pub base_width: usize,
}

impl FpnDims {
    pub fn validate(&self) -> Result<(), FpnError> {
        if self.base_height == 0
            || self.base_width == 0
            || !self.base_height.is_multiple_of(8)
            || !self.base_width.is_multiple_of(8)
        {
            return Err(FpnError::BadBaseResolution {
                height: self.base_height,
                width: self.base_width,
            });
        }
        if self.out_channels == 0 || self.in_channels.contains(&0) {
            return Err(FpnError::BadChannels);
        }
        Ok(())
    }

    /// Expected shape of the backbone map at internal index `l` (level `l+2`).
    pub fn backbone_shape(&self, l: usize) -> (usize, usize, usize) {
        (
            self.in_channels[l],
            self.base_height >> l,
            self.base_width >> l,
        )
    }

    /// Shape of pyramid output `P(k+2)` for `k` in `0..PYRAMID_LEVELS`.
    pub fn pyramid_shape(&self, k: usize) -> (usize, usize, usize) {
        if k < BACKBONE_LEVELS {
            (self.out_channels, self.base_height >> k, self.base_width >> k)
        } else {
            let h5 = self.base_height >> 3;
            let w5 = self.base_width >> 3;
            (self.out_channels, h5.div_ceil(2), w5.div_ceil(2))
        }
    }
}

/// Per-level weights: a 1x1 projection and a 3x3 output convolution for each
/// backbone level. The same layout doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct FpnParams {
    dims: FpnDims,
    /// `inner[l][o * in_ch + i]`, level `l+2`.
    inner: Vec<Vec<f64>>,
    /// `layer[l][((o * out_ch + c) * 3 + ky) * 3 + kx]`, level `l+2`.
    layer: Vec<Vec<f64>>,
}

impl FpnParams {
    /// Seeded uniform init in `[-0.1, 0.1]`.
    pub fn random<R: Rng>(dims: FpnDims, rng: &mut R) -> Result<Self, FpnError> {
        dims.validate()?;
        let inner = (0..BACKBONE_LEVELS)
            .map(|l| {
                (0..dims.out_channels * dims.in_channels[l])
                    .map(|_| rng.gen_range(-WEIGHT_AMPLITUDE..=WEIGHT_AMPLITUDE))
                    .collect()
            })
            .collect();
        let layer = (0..BACKBONE_LEVELS)
            .map(|_| {
                (0..dims.out_channels * dims.out_channels * 9)
                    .map(|_| rng.gen_range(-WEIGHT_AMPLITUDE..=WEIGHT_AMPLITUDE))
                    .collect()
            })
            .collect();
        Ok(Self { dims, inner, layer })
    }

    pub fn zeros(dims: FpnDims) -> Result<Self, FpnError> {
        dims.validate()?;
        let inner = (0..BACKBONE_LEVELS)
            .map(|l| vec![0.0; dims.out_channels * dims.in_channels[l]])
            .collect();
        let layer = (0..BACKBONE_LEVELS)
            .map(|_| vec![0.0; dims.out_channels * dims.out_channels * 9])
            .collect();
        Ok(Self { dims, inner, layer })
    }

    pub fn dims(&self) -> &FpnDims {
        &self.dims
    }

    pub fn inner_weights(&self, l: usize) -> &[f64] {
        &self.inner[l]
    }

    pub fn inner_weights_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.inner[l]
    }

    pub fn layer_weights(&self, l: usize) -> &[f64] {
        &self.layer[l]
    }

    pub fn layer_weights_mut(&mut self, l: usize) -> &mut [f64] {
        &mut self.layer[l]
    }
}

/// Seeded backbone maps C2..C5 with entries in `[-1, 1]`.
pub fn random_backbone<R: Rng>(dims: &FpnDims, rng: &mut R) -> Vec<FeatureMap> {
    (0..BACKBONE_LEVELS)
        .map(|l| {
            let (c, h, w) = dims.backbone_shape(l);
            FeatureMap::random(rng, c, h, w, 1.0)
        })
        .collect()
}

/// Forward-pass products: outputs P2..P6 and the fused pre-output maps
/// P'2..P'5.
#[derive(Debug, Clone)]
pub struct FpnOutputs {
    pub pyramid: Vec<FeatureMap>,
    pub fused: Vec<FeatureMap>,
}

fn check_inputs(inputs: &[FeatureMap], dims: &FpnDims) -> Result<(), FpnError> {
    assert_eq!(
        inputs.len(),
        BACKBONE_LEVELS,
        "the pyramid takes exactly C2..C5"
    );
    for (l, input) in inputs.iter().enumerate() {
        let expected = dims.backbone_shape(l);
        if input.shape() != expected {
            let got = input.shape();
            return Err(FpnError::ShapeMismatch {
                level: l as u32 + 2,
                expected_channels: expected.0,
                expected_height: expected.1,
                expected_width: expected.2,
                got_channels: got.0,
                got_height: got.1,
                got_width: got.2,
            });
        }
    }
    Ok(())
}

/// Run the pyramid forward.
///
/// The deepest fused map is the plain projection of C5; walking shallower,
/// each fused map adds `alpha * upsample(deeper fused map)` to its own
/// projection, and every output applies the level's 3x3 convolution. P6 is a
/// stride-2 subsample of P5.
pub fn fpn_forward(
    inputs: &[FeatureMap],
    params: &FpnParams,
    alphas: &FusionFactors,
) -> Result<FpnOutputs, FpnError> {
    let dims = &params.dims;
    dims.validate()?;
    check_inputs(inputs, dims)?;

    let mut fused: Vec<Option<FeatureMap>> = vec![None; BACKBONE_LEVELS];
    for l in (0..BACKBONE_LEVELS).rev() {
        let mut f = conv1x1_forward(&inputs[l], &params.inner[l], dims.out_channels);
        if l + 1 < BACKBONE_LEVELS {
            let deeper = fused[l + 1].as_ref().expect("built deepest-first");
            f.add_scaled(&upsample2x(deeper), alphas.alpha[l]);
        }
        fused[l] = Some(f);
    }
    let fused: Vec<FeatureMap> = fused.into_iter().map(Option::unwrap).collect();

    let mut pyramid: Vec<FeatureMap> = fused
        .iter()
        .zip(&params.layer)
        .map(|(f, w)| conv3x3_forward(f, w, dims.out_channels))
        .collect();
    pyramid.push(subsample2(&pyramid[BACKBONE_LEVELS - 1]));

    Ok(FpnOutputs { pyramid, fused })
}

/// Scale the 1x1 weights of level `i` by `sigma^(i-2)` and the 3x3 weights by
/// `sigma^-(i-2)`. With the fusion factors pinned at 1, the rescaled pyramid
/// computes the same outputs as the original one at fusion factor `sigma`.
pub fn reparameterize(params: &FpnParams, sigma: f64) -> Result<FpnParams, FpnError> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(FpnError::BadSigma(sigma));
    }
    let mut out = params.clone();
    for l in 0..BACKBONE_LEVELS {
        let up = sigma.powi(l as i32);
        let down = sigma.powi(-(l as i32));
        for w in &mut out.inner[l] {
            *w *= up;
        }
        for w in &mut out.layer[l] {
            *w *= down;
        }
    }
    Ok(out)
}

/// Quadratic per-level training proxy: `0.5 * ||P_l - target_l||^2` for every
/// included level.
#[derive(Debug, Clone)]
pub struct LossSpec {
    include: [bool; PYRAMID_LEVELS],
    targets: Vec<FeatureMap>,
}

impl LossSpec {
    /// Seeded random targets on all five levels.
    pub fn random<R: Rng>(dims: &FpnDims, rng: &mut R) -> Self {
        let targets = (0..PYRAMID_LEVELS)
            .map(|k| {
                let (c, h, w) = dims.pyramid_shape(k);
                FeatureMap::random(rng, c, h, w, TARGET_AMPLITUDE)
            })
            .collect();
        Self {
            include: [true; PYRAMID_LEVELS],
            targets,
        }
    }

    /// Same targets, different level mask. `include[k]` refers to `P(k+2)`.
    pub fn with_levels(&self, include: [bool; PYRAMID_LEVELS]) -> Result<Self, FpnError> {
        if !include.contains(&true) {
            return Err(FpnError::EmptyLoss);
        }
        Ok(Self {
            include,
            targets: self.targets.clone(),
        })
    }

    pub fn include(&self) -> [bool; PYRAMID_LEVELS] {
        self.include
    }

    /// Total loss over the included levels.
    pub fn evaluate(&self, outputs: &FpnOutputs) -> f64 {
        let mut total = 0.0;
        for k in 0..PYRAMID_LEVELS {
            if !self.include[k] {
                continue;
            }
            let d = outputs.pyramid[k].sub(&self.targets[k]);
            total += 0.5 * d.data().iter().map(|v| v * v).sum::<f64>();
        }
        total
    }

    /// Loss gradients w.r.t. every pyramid output at the given state: the
    /// residual on included levels, zero elsewhere.
    pub fn residuals(&self, outputs: &FpnOutputs) -> Vec<FeatureMap> {
        (0..PYRAMID_LEVELS)
            .map(|k| {
                if self.include[k] {
                    outputs.pyramid[k].sub(&self.targets[k])
                } else {
                    let (c, h, w) = outputs.pyramid[k].shape();
                    FeatureMap::zeros(c, h, w)
                }
            })
            .collect()
    }
}

/// Gradient of the total loss w.r.t. every backbone map, `grads[l]` matching
/// `C(l+2)`.
#[derive(Debug, Clone)]
pub struct BackboneGradients {
    pub grads: Vec<FeatureMap>,
}

/// Gradients produced by one vector-Jacobian product. `param_grads` reuses
/// the parameter layout: entry for entry, the gradient w.r.t. that weight.
#[derive(Debug, Clone)]
pub struct VjpResult {
    pub backbone: BackboneGradients,
    pub param_grads: FpnParams,
}

/// Everything the reverse pass of the quadratic loss produces.
#[derive(Debug, Clone)]
pub struct BackwardResult {
    pub loss: f64,
    pub backbone: BackboneGradients,
    pub param_grads: FpnParams,
}

/// Pull given per-output cotangents (d loss / d P2..P6) back through the
/// graph whose forward products are `outputs`. Consumes the cotangents.
fn vjp_with_outputs(
    inputs: &[FeatureMap],
    params: &FpnParams,
    alphas: &FusionFactors,
    outputs: &FpnOutputs,
    mut d_pyramid: Vec<FeatureMap>,
) -> Result<VjpResult, FpnError> {
    let dims = &params.dims;

    // P6 is a subsample of P5: scatter its gradient back.
    let d_p6 = d_pyramid.pop().expect("five pyramid cotangents");
    let (_, h5, w5) = dims.pyramid_shape(BACKBONE_LEVELS - 1);
    d_pyramid[BACKBONE_LEVELS - 1].add_scaled(&subsample2_backward(&d_p6, h5, w5), 1.0);

    // Fused-map gradients flow shallow to deep: each deeper fused map also
    // receives alpha times the adjoint-upsampled gradient of the level above.
    let mut d_fused: Vec<FeatureMap> = Vec::with_capacity(BACKBONE_LEVELS);
    for l in 0..BACKBONE_LEVELS {
        let mut g = conv3x3_backward_input(&d_pyramid[l], &params.layer[l], dims.out_channels);
        if l > 0 {
            g.add_scaled(&upsample2x_backward(&d_fused[l - 1]), alphas.alpha[l - 1]);
        }
        d_fused.push(g);
    }

    let mut param_grads = FpnParams::zeros(*dims)?;
    let mut backbone = Vec::with_capacity(BACKBONE_LEVELS);
    for l in 0..BACKBONE_LEVELS {
        param_grads.layer[l] = conv3x3_backward_weights(&d_pyramid[l], &outputs.fused[l]);
        param_grads.inner[l] = conv1x1_backward_weights(&d_fused[l], &inputs[l]);
        backbone.push(conv1x1_backward_input(
            &d_fused[l],
            &params.inner[l],
            dims.in_channels[l],
        ));
    }

    Ok(VjpResult {
        backbone: BackboneGradients { grads: backbone },
        param_grads,
    })
}

fn check_cotangents(cotangents: &[FeatureMap], dims: &FpnDims) -> Result<(), FpnError> {
    assert_eq!(
        cotangents.len(),
        PYRAMID_LEVELS,
        "one cotangent per pyramid output"
    );
    for (k, ct) in cotangents.iter().enumerate() {
        let expected = dims.pyramid_shape(k);
        if ct.shape() != expected {
            let got = ct.shape();
            return Err(FpnError::ShapeMismatch {
                level: k as u32 + 2,
                expected_channels: expected.0,
                expected_height: expected.1,
                expected_width: expected.2,
                got_channels: got.0,
                got_height: got.1,
                got_width: got.2,
            });
        }
    }
    Ok(())
}

/// Vector-Jacobian product: gradients of `sum_k <cotangents[k], P(k+2)>`
/// w.r.t. every input and weight. This is the raw backward structure with the
/// upstream loss gradients supplied by the caller, which is what makes
/// cross-factor comparisons meaningful: the cotangents stay fixed while the
/// fusion factors move.
pub fn fpn_vjp(
    inputs: &[FeatureMap],
    params: &FpnParams,
    alphas: &FusionFactors,
    cotangents: &[FeatureMap],
) -> Result<VjpResult, FpnError> {
    check_cotangents(cotangents, &params.dims)?;
    let outputs = fpn_forward(inputs, params, alphas)?;
    vjp_with_outputs(inputs, params, alphas, &outputs, cotangents.to_vec())
}

/// Reverse-mode pass of the quadratic loss. Returns raw gradients; any
/// learning-rate scaling is the caller's business.
pub fn fpn_backward(
    inputs: &[FeatureMap],
    params: &FpnParams,
    alphas: &FusionFactors,
    loss: &LossSpec,
) -> Result<BackwardResult, FpnError> {
    let outputs = fpn_forward(inputs, params, alphas)?;
    let loss_value = loss.evaluate(&outputs);
    let d_pyramid = loss.residuals(&outputs);
    let vjp = vjp_with_outputs(inputs, params, alphas, &outputs, d_pyramid)?;
    Ok(BackwardResult {
        loss: loss_value,
        backbone: vjp.backbone,
        param_grads: vjp.param_grads,
    })
}

/// Backbone gradients split by where the loss lives: for backbone level
/// `l+2`, `deep[l]` collects the gradient contributed by losses at pyramid
/// levels `l+2` and deeper, `shallow[l]` the contribution of shallower
/// levels. The shallow part is the one carrying the fusion factor.
#[derive(Debug, Clone)]
pub struct GradientDecomposition {
    pub deep: Vec<FeatureMap>,
    pub shallow: Vec<FeatureMap>,
}

impl GradientDecomposition {
    /// Elementwise `deep[l] + shallow[l]`, for comparing against the joint
    /// backward pass.
    pub fn total(&self, l: usize) -> FeatureMap {
        let mut t = self.deep[l].clone();
        t.add_scaled(&self.shallow[l], 1.0);
        t
    }
}

/// Split backbone gradients into deep and shallow parts by pulling each loss
/// level's gradient back separately and bucketing the contributions. The
/// upstream gradients are the quadratic residuals at the given state, so
/// `deep + shallow` reassembles [`fpn_backward`]'s totals.
pub fn gradient_decomposition(
    inputs: &[FeatureMap],
    params: &FpnParams,
    alphas: &FusionFactors,
    loss: &LossSpec,
) -> Result<GradientDecomposition, FpnError> {
    let outputs = fpn_forward(inputs, params, alphas)?;
    let residuals = loss.residuals(&outputs);
    decompose_with_outputs(inputs, params, alphas, &outputs, &residuals)
}

/// [`gradient_decomposition`] with caller-supplied per-output cotangents.
/// Holding the cotangents fixed across runs isolates how the backward
/// structure itself responds to the fusion factors.
pub fn gradient_decomposition_vjp(
    inputs: &[FeatureMap],
    params: &FpnParams,
    alphas: &FusionFactors,
    cotangents: &[FeatureMap],
) -> Result<GradientDecomposition, FpnError> {
    check_cotangents(cotangents, &params.dims)?;
    let outputs = fpn_forward(inputs, params, alphas)?;
    decompose_with_outputs(inputs, params, alphas, &outputs, cotangents)
}

fn decompose_with_outputs(
    inputs: &[FeatureMap],
    params: &FpnParams,
    alphas: &FusionFactors,
    outputs: &FpnOutputs,
    cotangents: &[FeatureMap],
) -> Result<GradientDecomposition, FpnError> {
    let dims = &params.dims;
    let zero_like = |l: usize| {
        let (c, h, w) = dims.backbone_shape(l);
        FeatureMap::zeros(c, h, w)
    };
    let mut deep: Vec<FeatureMap> = (0..BACKBONE_LEVELS).map(zero_like).collect();
    let mut shallow: Vec<FeatureMap> = (0..BACKBONE_LEVELS).map(zero_like).collect();

    for (k, cotangent) in cotangents.iter().enumerate() {
        let single: Vec<FeatureMap> = outputs
            .pyramid
            .iter()
            .enumerate()
            .map(|(j, p)| {
                if j == k {
                    cotangent.clone()
                } else {
                    let (c, h, w) = p.shape();
                    FeatureMap::zeros(c, h, w)
                }
            })
            .collect();
        let grads = vjp_with_outputs(inputs, params, alphas, outputs, single)?.backbone;
        for l in 0..BACKBONE_LEVELS {
            if k >= l {
                deep[l].add_scaled(&grads.grads[l], 1.0);
            } else {
                shallow[l].add_scaled(&grads.grads[l], 1.0);
            }
        }
    }

    Ok(GradientDecomposition { deep, shallow })
}
