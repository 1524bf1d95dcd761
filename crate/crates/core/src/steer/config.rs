use serde::{Deserialize, Serialize};

use crate::attribute::ObjectiveSign;
use crate::error::{Error, Result};

/// Every steering knob. Field names double as the JSON/CLI vocabulary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringConfig {
    /// Step size `α` of each latent update.
    pub stepsize: f64,
    /// Exponent `γ` of the per-layer gradient-norm normaliser.
    pub gamma: f64,
    /// Gradient iterations `m` per generated token.
    pub num_iterations: usize,
    /// Weight `λ_KL` of `KL(p̃ ‖ p)`.
    pub kl_scale: f64,
    /// Geometric-mean fusion weight `γ_gm` on the steered distribution.
    pub gm_scale: f64,
    /// Only the most recent `w` history positions are perturbed; 0 = all.
    pub window_length: usize,
    /// Latent updates stop after this many generated tokens; 0 = never.
    pub grad_length: usize,
    pub top_k: usize,
    /// Samples `r` drawn by the ranked variants.
    pub num_samples: usize,
    /// Ranked variants discard samples whose mean Dist-1/2/3 is below this.
    pub dist_threshold: f64,
    pub objective_sign: ObjectiveSign,
    pub seed: u64,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self::bow_defaults()
    }
}

impl SteeringConfig {
    /// Defaults for bag-of-words targets.
    pub fn bow_defaults() -> Self {
        Self {
            stepsize: 0.01,
            gamma: 1.5,
            num_iterations: 3,
            kl_scale: 0.01,
            gm_scale: 0.9,
            window_length: 5,
            grad_length: 0,
            top_k: 10,
            num_samples: 10,
            dist_threshold: 0.85,
            objective_sign: ObjectiveSign::Plus,
            seed: 0,
        }
    }

    /// Defaults for discriminator targets.
    pub fn discrim_defaults() -> Self {
        Self {
            stepsize: 0.03,
            gamma: 1.0,
            num_iterations: 10,
            gm_scale: 0.95,
            window_length: 0,
            dist_threshold: 0.9,
            ..Self::bow_defaults()
        }
    }

    /// Checks every range; the error names the first offending field.
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &'static str, reason: &str| Err(Error::InvalidField { field, reason: reason.to_string() });
        if !(self.stepsize.is_finite() && self.stepsize >= 0.0) {
            return bad("stepsize", "must be finite and ≥ 0");
        }
        if !self.gamma.is_finite() {
            return bad("gamma", "must be finite");
        }
        if !(self.kl_scale.is_finite() && self.kl_scale >= 0.0) {
            return bad("kl_scale", "must be finite and ≥ 0");
        }
        if !(0.0..=1.0).contains(&self.gm_scale) {
            return bad("gm_scale", "must lie in [0, 1]");
        }
        if self.top_k < 1 {
            return bad("top_k", "must be ≥ 1");
        }
        if self.num_samples < 1 {
            return bad("num_samples", "must be ≥ 1");
        }
        if !(0.0..=1.0).contains(&self.dist_threshold) {
            return bad("dist_threshold", "must lie in [0, 1]");
        }
        Ok(())
    }

    /// Applies the fields present in `patch`, validating the result.
    pub fn patched(&self, patch: &SteeringPatch) -> Result<Self> {
        let mut out = self.clone();
        macro_rules! apply {
            ($($f:ident),*) => { $(if let Some(v) = patch.$f.clone() { out.$f = v; })* };
        }
        apply!(
            stepsize,
            gamma,
            num_iterations,
            kl_scale,
            gm_scale,
            window_length,
            grad_length,
            top_k,
            num_samples,
            dist_threshold,
            objective_sign,
            seed
        );
        out.validate()?;
        Ok(out)
    }
}

/// A partial [`SteeringConfig`]; absent fields keep their current value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SteeringPatch {
    pub stepsize: Option<f64>,
    pub gamma: Option<f64>,
    pub num_iterations: Option<usize>,
    pub kl_scale: Option<f64>,
    pub gm_scale: Option<f64>,
    pub window_length: Option<usize>,
    pub grad_length: Option<usize>,
    pub top_k: Option<usize>,
    pub num_samples: Option<usize>,
    pub dist_threshold: Option<f64>,
    pub objective_sign: Option<ObjectiveSign>,
    pub seed: Option<u64>,
}
