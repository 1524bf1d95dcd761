use rand::Rng;

use crate::autodiff::LOG_CLAMP;
use crate::lm::TokenId;
use crate::scalar::Scalar;

/// Below this total mass a fused distribution counts as annihilated.
pub const FUSION_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Fused<S> {
    pub probs: Vec<S>,
    /// Set when every entry vanished and `p_base` was used instead.
    pub degenerate: bool,
}

/// `p_mod^γ · p_base^(1−γ)`, renormalised. The endpoints `γ ∈ {0, 1}` and
/// bit-identical inputs return the corresponding input unchanged.
pub fn fuse_distributions<S: Scalar>(p_mod: &[S], p_base: &[S], gm_scale: f64) -> Fused<S> {
    assert_eq!(p_mod.len(), p_base.len(), "fused distributions differ in length");
    if gm_scale == 1.0 {
        return Fused { probs: p_mod.to_vec(), degenerate: false };
    }
    if gm_scale == 0.0 || p_mod == p_base {
        return Fused { probs: p_base.to_vec(), degenerate: false };
    }
    let (a, b) = (S::lit(gm_scale), S::lit(1.0 - gm_scale));
    let mut out: Vec<S> = p_mod.iter().zip(p_base).map(|(&m, &p)| m.powf(a) * p.powf(b)).collect();
    let total: S = out.iter().copied().sum();
    if total.as_f64().is_nan() || total.as_f64() < FUSION_FLOOR {
        return Fused { probs: p_base.to_vec(), degenerate: true };
    }
    let inv = S::one() / total;
    out.iter_mut().for_each(|v| *v *= inv);
    Fused { probs: out, degenerate: false }
}

/// Keeps the `k` most probable ids (ties at the cut go to the lower id),
/// renormalises, and draws one id using a single uniform from `rng`.
pub fn sample_top_k<S: Scalar, R: Rng + ?Sized>(p: &[S], k: usize, rng: &mut R) -> TokenId {
    assert!(k >= 1 && !p.is_empty(), "sample_top_k needs k ≥ 1 and a non-empty distribution");
    let top = top_k_ids(p, k);
    let total: f64 = top.iter().map(|&i| p[i].as_f64()).sum();
    let u = rng.gen::<f64>() * total;
    let mut cum = 0.0;
    for &i in &top {
        cum += p[i].as_f64();
        if u < cum {
            return i;
        }
    }
    // u landed on the rounding slack at the top; take the last live id
    *top.iter().rev().find(|&&i| p[i] > S::zero()).unwrap_or(&top[0])
}

/// The `k` highest-probability ids, most probable first, lower id first
/// among equals.
pub fn top_k_ids<S: Scalar>(p: &[S], k: usize) -> Vec<TokenId> {
    let mut ids: Vec<TokenId> = (0..p.len()).collect();
    let order =
        |a: &TokenId, b: &TokenId| p[*b].partial_cmp(&p[*a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(b));
    let k = k.min(p.len());
    if k < ids.len() {
        ids.select_nth_unstable_by(k - 1, order);
        ids.truncate(k);
    }
    ids.sort_by(order);
    ids
}

/// `KL(p̃ ‖ p)` in nats; `p` is clamped at the log floor where `p̃ > 0`.
pub fn kl_divergence<S: Scalar>(p_mod: &[S], p_base: &[S]) -> f64 {
    p_mod
        .iter()
        .zip(p_base)
        .filter(|(m, _)| m.as_f64() > 0.0)
        .map(|(m, p)| {
            let (m, p) = (m.as_f64(), p.as_f64().max(LOG_CLAMP));
            m * (m.ln() - p.ln())
        })
        .sum::<f64>()
        .max(0.0)
}
