//! Fusion factors from level tallies, and brute-force sweep plans.
//!
//! For the five-level pyramid there are exactly three factors: the deepest
//! pair has none (P6 is a direct downsample of P5), and the last ratio folds
//! the P6 tally into the P5 numerator.

use serde::{Deserialize, Serialize};

use crate::assign::LevelCounts;
use crate::error::ConfigError;

/// Largest sweep value worth training; larger factors fail to converge.
pub const SWEEP_MAX: f64 = 1.1;

/// Tolerance for including the inclusive endpoint of a sweep.
const SWEEP_EPS: f64 = 1e-9;

/// The three fusion factors `[a_2^3, a_3^4, a_4^5]`, deep feature weighted
/// into the adjacent shallower level. An entry whose tally denominator was
/// zero falls back to 1.0 — the conventional-pyramid weight — with its
/// `fallback` flag set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionFactors {
    pub alpha: [f64; 3],
    pub fallback: [bool; 3],
}

impl FusionFactors {
    pub fn new(alpha: [f64; 3]) -> Self {
        Self {
            alpha,
            fallback: [false; 3],
        }
    }

    /// The same factor on all three fusion positions.
    pub fn uniform(alpha: f64) -> Self {
        Self::new([alpha; 3])
    }

    pub fn alpha_2_3(&self) -> f64 {
        self.alpha[0]
    }

    pub fn alpha_3_4(&self) -> f64 {
        self.alpha[1]
    }

    pub fn alpha_4_5(&self) -> f64 {
        self.alpha[2]
    }

    pub fn any_fallback(&self) -> bool {
        self.fallback.iter().any(|&b| b)
    }
}

/// Fusion factors from the five level tallies:
/// `a_2^3 = N3/N2`, `a_3^4 = N4/N3`, `a_4^5 = (N5+N6)/N4`.
///
/// Zero denominators fall back to 1.0 with the flag set, so the result is
/// always finite. Panics if `c` does not have exactly five levels.
pub fn compute_factors(c: &LevelCounts) -> FusionFactors {
    assert_eq!(
        c.len(),
        5,
        "fusion factors are defined for the five-level pyramid"
    );
    let n = c.as_slice();
    let ratio = |num: u64, den: u64| -> (f64, bool) {
        if den == 0 {
            (1.0, true)
        } else {
            (num as f64 / den as f64, false)
        }
    };
    let (a23, f23) = ratio(n[1], n[0]);
    let (a34, f34) = ratio(n[2], n[1]);
    let (a45, f45) = ratio(n[3] + n[4], n[2]);
    FusionFactors {
        alpha: [a23, a34, a45],
        fallback: [f23, f34, f45],
    }
}

/// Uniform fusion-factor values for a brute-force sweep, strictly increasing
/// within `[0, 1.1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    values: Vec<f64>,
}

impl SweepPlan {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Filename-friendly label for one value, e.g. `0.3` or `1.1`.
    pub fn label(value: f64) -> String {
        let rounded = (value * 1e9).round() / 1e9;
        format!("{rounded}")
    }
}

/// Enumerate `min, min+step, ...` up to `max` inclusive (within 1e-9).
pub fn sweep_plan(min: f64, max: f64, step: f64) -> Result<SweepPlan, ConfigError> {
    if !(min.is_finite() && max.is_finite() && step.is_finite()) {
        return Err(ConfigError::SweepRange("values must be finite".into()));
    }
    if min < 0.0 || max < min || max > SWEEP_MAX {
        return Err(ConfigError::SweepRange(format!(
            "need 0 <= min <= max <= {SWEEP_MAX}, got min={min} max={max}"
        )));
    }
    if step <= 0.0 {
        return Err(ConfigError::SweepRange(format!(
            "step must be positive, got {step}"
        )));
    }
    let mut values = Vec::new();
    let mut k = 0u32;
    loop {
        let v = min + f64::from(k) * step;
        if v > max + SWEEP_EPS {
            break;
        }
        values.push(v.min(max));
        k += 1;
    }
    Ok(SweepPlan { values })
}

/// Schema of the standalone `alpha.json` artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlphaFile {
    pub alpha: [f64; 3],
    pub fallback: [bool; 3],
    pub counts: Vec<u64>,
}

impl AlphaFile {
    pub fn new(factors: &FusionFactors, counts: &LevelCounts) -> Self {
        Self {
            alpha: factors.alpha,
            fallback: factors.fallback,
            counts: counts.as_slice().to_vec(),
        }
    }
}
