//! Weighted-decoding baselines: reweight the base model's next-token
//! distribution directly instead of perturbing its history.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::{
    bow_log_likelihood, discrim_log_prob, AttributeModel, AttributeTarget, BagOfWords, DiscrimContext,
    LinearDiscriminator,
};
use crate::error::{Error, Result};
use crate::lm::{History, TokenId, TransformerLm};
use crate::scalar::Scalar;
use crate::steer::{finish_record, kl_divergence, sample_top_k, top_k_ids, SampleRecord, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WdOptions {
    /// Bag tokens are scaled by `1 + wd_boost`.
    pub wd_boost: f64,
    pub top_k: usize,
    /// Discriminator reweighting only considers this many base candidates.
    pub candidates: usize,
}

impl Default for WdOptions {
    fn default() -> Self {
        Self { wd_boost: 10.0, top_k: 5, candidates: 64 }
    }
}

impl WdOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.wd_boost.is_finite() && self.wd_boost >= 0.0) {
            return Err(Error::InvalidField { field: "wd_boost", reason: "must be finite and ≥ 0".into() });
        }
        if self.top_k == 0 {
            return Err(Error::InvalidField { field: "top_k", reason: "must be ≥ 1".into() });
        }
        if self.candidates == 0 {
            return Err(Error::InvalidField { field: "candidates", reason: "must be ≥ 1".into() });
        }
        Ok(())
    }
}

/// `p(w) · (1 + boost · [w ∈ bag])`, renormalised.
pub fn weighted_decode_bow<S: Scalar>(p: &[S], bag: &BagOfWords, wd_boost: f64) -> Vec<S> {
    let scale = S::lit(1.0 + wd_boost);
    let mut out = p.to_vec();
    for &id in &bag.token_ids {
        if id < out.len() {
            out[id] *= scale;
        }
    }
    normalise(out)
}

/// `p(w) · p(class | passage + w)` over the `candidates` most probable
/// base tokens, renormalised; every other token gets zero mass.
///
/// `ctx` holds the hidden states of the passage so far and `history` the
/// history after its last token, so the representation of `passage + w` is
/// the mean of `ctx` and the hidden state produced by consuming `w`.
pub fn weighted_decode_discrim<S: Scalar>(
    lm: &TransformerLm<S>,
    p: &[S],
    history: &History<S>,
    ctx: &DiscrimContext<S>,
    d: &LinearDiscriminator<S>,
    class_index: usize,
    candidates: usize,
) -> Result<Vec<S>> {
    let ids = top_k_ids(p, candidates);
    let inv = S::one() / S::lit((ctx.count + 1) as f64);
    let weights = ids
        .par_iter()
        .map(|&w| {
            let (o, _) = lm.lm_step(w, history)?;
            let mean: Vec<S> = ctx.sum.iter().zip(o.data()).map(|(&s, &x)| (s + x) * inv).collect();
            Ok(discrim_log_prob(&mean, d, class_index)?.exp())
        })
        .collect::<Result<Vec<S>>>()?;
    let mut out = vec![S::zero(); p.len()];
    for (&w, &c) in ids.iter().zip(&weights) {
        out[w] = p[w] * c;
    }
    Ok(normalise(out))
}

fn normalise<S: Scalar>(mut v: Vec<S>) -> Vec<S> {
    let total: S = v.iter().copied().sum();
    if total > S::zero() {
        let inv = S::one() / total;
        v.iter_mut().for_each(|x| *x *= inv);
    }
    v
}

/// Generates one weighted-decoding passage with top-`opts.top_k` sampling,
/// one uniform draw per token from `seed`.
pub fn generate_weighted<S: Scalar>(
    lm: &TransformerLm<S>,
    prompt: &str,
    length: usize,
    target: &AttributeTarget<S>,
    opts: &WdOptions,
    seed: u64,
) -> Result<SampleRecord> {
    opts.validate()?;
    let mut tokens = lm.tokenizer().encode(prompt);
    if tokens.is_empty() {
        return Err(Error::Contract("prompt must contain at least one token".into()));
    }
    if tokens.len() + length > lm.config().max_context {
        return Err(Error::Capacity { len: tokens.len() + length, max: lm.config().max_context });
    }
    let prompt_len = tokens.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ctx = DiscrimContext::new(lm.config().d_model);
    let mut history = lm.empty_history();
    for &t in &tokens[..prompt_len - 1] {
        let (o, next) = lm.lm_step(t, &history)?;
        ctx.push(o.data());
        history = next;
    }
    let (mut step_attr_ll, mut step_kl) = (Vec::with_capacity(length), Vec::with_capacity(length));
    for _ in 0..length {
        let x_t: TokenId = *tokens.last().expect("non-empty");
        let (o, next) = lm.lm_step(x_t, &history)?;
        let p = lm.logits_to_probs(&o)?;
        ctx.push(o.data());
        let (reweighted, attr) = match &target.model {
            AttributeModel::Bow(bag) => {
                let q = weighted_decode_bow(&p, bag, opts.wd_boost);
                let ll = bow_log_likelihood(&q, bag).as_f64();
                (q, ll)
            }
            AttributeModel::Discriminator(d) => {
                let q = weighted_decode_discrim(lm, &p, &next, &ctx, d, target.class_index, opts.candidates)?;
                let inv = S::one() / S::lit(ctx.count as f64);
                let mean: Vec<S> = ctx.sum.iter().map(|&s| s * inv).collect();
                (q, discrim_log_prob(&mean, d, target.class_index)?.as_f64())
            }
        };
        step_kl.push(kl_divergence(&reweighted, &p));
        step_attr_ll.push(attr);
        tokens.push(sample_top_k(&reweighted, opts.top_k, &mut rng));
        history = next;
    }
    finish_record(lm, tokens, prompt_len, Some(target), Variant::WD, seed, step_attr_ll, step_kl, 0)
}
