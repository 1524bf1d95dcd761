use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attribute::{
    bow_log_likelihood, discrim::mean_rows, discrim_log_prob, AttributeModel, AttributeTarget, DiscrimContext,
};
use crate::error::{Error, Result};
use crate::lm::{History, TokenId, TransformerLm};
use crate::metrics::passage_dist;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::perturb::{perturb_past, SteerState};
use super::sampling::{fuse_distributions, kl_divergence, sample_top_k};
use super::SteeringConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    /// Plain top-k sampling, once.
    B,
    /// Plain sampling `r` times, ranked.
    BR,
    /// Latent steering, sampled once.
    BC,
    /// Latent steering `r` times, ranked.
    BCR,
    /// Weighted-decoding baseline.
    WD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::B, Variant::BR, Variant::BC, Variant::BCR, Variant::WD];

    pub fn is_steered(self) -> bool {
        matches!(self, Variant::BC | Variant::BCR)
    }

    pub fn is_ranked(self) -> bool {
        matches!(self, Variant::BR | Variant::BCR)
    }

    /// The single-sample variant a ranked variant draws from.
    pub fn single(self) -> Variant {
        match self {
            Variant::BR => Variant::B,
            Variant::BCR => Variant::BC,
            v => v,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::B => "B",
            Variant::BR => "BR",
            Variant::BC => "BC",
            Variant::BCR => "BCR",
            Variant::WD => "WD",
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidField { field: "variant", reason: format!("unknown variant `{s}`") })
    }
}

/// One generated passage with per-step diagnostics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub variant: Variant,
    pub seed: u64,
    pub attribute: Option<String>,
    /// Prompt plus generated tokens.
    pub tokens: Vec<TokenId>,
    pub prompt_len: usize,
    pub text: String,
    /// Per generated step: `log p(a | H + ΔH)` at the latents the token was
    /// sampled from (the base model's for unsteered variants).
    pub step_attr_ll: Vec<f64>,
    /// Per generated step: `KL(p̃ ‖ p)` of the steered distribution.
    pub step_kl: Vec<f64>,
    /// [`attribute_score`] of the passage; `None` without a target.
    pub mean_attr_ll: Option<f64>,
    /// Dist scores of the generated continuation.
    pub dist1: f64,
    pub dist2: f64,
    pub dist3: f64,
    pub mean_dist: f64,
    /// Steps whose fused distribution vanished and fell back to the base.
    pub degenerate_steps: usize,
    /// Set on a ranked winner when every sample failed the Dist filter.
    pub fallback: bool,
}

impl SampleRecord {
    pub fn generated(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    /// Mean of [`SampleRecord::step_attr_ll`]; `None` without a target.
    pub fn mean_step_attr_ll(&self) -> Option<f64> {
        (!self.step_attr_ll.is_empty()).then(|| self.step_attr_ll.iter().sum::<f64>() / self.step_attr_ll.len() as f64)
    }

    /// Ranking key: the attribute score in the objective's direction.
    pub fn rank_score(&self, sign: f64) -> f64 {
        self.mean_attr_ll.map_or(f64::NEG_INFINITY, |ll| sign * ll)
    }
}

/// Emitted once per generated token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub index: usize,
    pub token_id: TokenId,
    pub text: String,
    pub attr_ll: Option<f64>,
    pub kl: f64,
}

/// Generates one passage (`B` or `BC`) using `cfg.seed`.
pub fn generate<S: Scalar>(
    lm: &TransformerLm<S>,
    prompt: &str,
    length: usize,
    target: Option<&AttributeTarget<S>>,
    cfg: &SteeringConfig,
    variant: Variant,
) -> Result<SampleRecord> {
    generate_streaming(lm, prompt, length, target, cfg, variant, |_| {})
}

/// [`generate`] with a callback receiving every token as it is sampled.
///
/// `BC` requires a target. `B` accepts one for diagnostics only. The
/// objective direction is taken from `cfg.objective_sign`.
pub fn generate_streaming<S: Scalar>(
    lm: &TransformerLm<S>,
    prompt: &str,
    length: usize,
    target: Option<&AttributeTarget<S>>,
    cfg: &SteeringConfig,
    variant: Variant,
    mut on_token: impl FnMut(&TokenEvent),
) -> Result<SampleRecord> {
    cfg.validate()?;
    let steer = match variant {
        Variant::B => false,
        Variant::BC => true,
        other => return Err(Error::Contract(format!("generate runs B or BC, not {other}"))),
    };
    let target = target.map(|t| AttributeTarget { objective_sign: cfg.objective_sign, ..t.clone() });
    if steer && target.is_none() {
        return Err(Error::Contract("variant BC needs an attribute target".into()));
    }
    let mut tokens = lm.tokenizer().encode(prompt);
    if tokens.is_empty() {
        return Err(Error::Contract("prompt must contain at least one token".into()));
    }
    if tokens.len() + length > lm.config().max_context {
        return Err(Error::Capacity { len: tokens.len() + length, max: lm.config().max_context });
    }
    let prompt_len = tokens.len();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SteerState::new(lm);
    let mut base = lm.empty_history();
    for &t in &tokens[..prompt_len - 1] {
        let (o, next) = lm.lm_step(t, &base)?;
        state.discrim.push(o.data());
        base = next;
    }
    let mut steered = base.clone();
    let (mut step_attr_ll, mut step_kl) = (Vec::with_capacity(length), Vec::with_capacity(length));
    let mut degenerate_steps = 0;
    for step in 0..length {
        let x_t = *tokens.last().expect("non-empty");
        let (o_base, base_next) = lm.lm_step(x_t, &base)?;
        let p_base = lm.logits_to_probs(&o_base)?;
        let (o_steer, p_steer, steered_next) = match (&target, steer) {
            (Some(t), true) => {
                let base_logp = log_probs(&p_base);
                let delta = perturb_past(lm, &steered, x_t, t, cfg, step, &base_logp, &mut state)?;
                if delta.is_zero() && steered == base {
                    (o_base.clone(), p_base.clone(), base_next.clone())
                } else {
                    let (o, next) = lm.lm_step(x_t, &delta.apply(&steered)?)?;
                    let p = lm.logits_to_probs(&o)?;
                    (o, p, next)
                }
            }
            _ => (o_base.clone(), p_base.clone(), base_next.clone()),
        };
        let fused = fuse_distributions(&p_steer, &p_base, cfg.gm_scale);
        if fused.degenerate {
            log::warn!("step {step}: fused distribution vanished; sampled from the base model");
            degenerate_steps += 1;
        }
        let kl = kl_divergence(&p_steer, &p_base);
        let attr =
            target.as_ref().map(|t| step_attribute_ll(&p_steer, o_steer.data(), t, &state.discrim)).transpose()?;
        state.discrim.push(o_base.data());
        let next = sample_top_k(&fused.probs, cfg.top_k, &mut rng);
        on_token(&TokenEvent {
            index: step,
            token_id: next,
            text: lm.tokenizer().token_piece(next, false),
            attr_ll: attr,
            kl,
        });
        tokens.push(next);
        step_kl.push(kl);
        if let Some(a) = attr {
            step_attr_ll.push(a);
        }
        base = base_next;
        steered = steered_next;
    }
    finish_record(lm, tokens, prompt_len, target.as_ref(), variant, cfg.seed, step_attr_ll, step_kl, degenerate_steps)
}

fn log_probs<S: Scalar>(p: &[S]) -> Vec<S> {
    let floor = S::lit(crate::autodiff::LOG_CLAMP);
    p.iter().map(|&x| x.max(floor).ln()).collect()
}

/// Per-step diagnostic `log p(a | H + ΔH)` at the latents the token was
/// sampled from: the bag log-mass of the steered distribution, or the class
/// log-probability of the passage mean with the steered hidden state as
/// its newest entry. Without steering both reduce to the base model.
fn step_attribute_ll<S: Scalar>(
    p_steer: &[S],
    o_steer: &[S],
    target: &AttributeTarget<S>,
    ctx: &DiscrimContext<S>,
) -> Result<f64> {
    Ok(match &target.model {
        AttributeModel::Bow(bag) => bow_log_likelihood(p_steer, bag).as_f64(),
        AttributeModel::Discriminator(d) => {
            let inv = S::one() / S::lit((ctx.count + 1) as f64);
            let mean: Vec<S> = ctx.sum.iter().zip(o_steer).map(|(&s, &o)| (s + o) * inv).collect();
            discrim_log_prob(&mean, d, target.class_index)?.as_f64()
        }
    })
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn finish_record<S: Scalar>(
    lm: &TransformerLm<S>,
    tokens: Vec<TokenId>,
    prompt_len: usize,
    target: Option<&AttributeTarget<S>>,
    variant: Variant,
    seed: u64,
    step_attr_ll: Vec<f64>,
    step_kl: Vec<f64>,
    degenerate_steps: usize,
) -> Result<SampleRecord> {
    let mean_attr_ll = match target {
        Some(t) if tokens.len() > prompt_len => Some(attribute_score(lm, &tokens, prompt_len, t)?),
        _ => None,
    };
    let dist = passage_dist(&tokens[prompt_len..]);
    Ok(SampleRecord {
        variant,
        seed,
        attribute: target.map(|t| t.label()),
        text: lm.tokenizer().decode(&tokens),
        tokens,
        prompt_len,
        step_attr_ll,
        step_kl,
        mean_attr_ll,
        dist1: dist.dist1,
        dist2: dist.dist2,
        dist3: dist.dist3,
        mean_dist: dist.mean(),
        degenerate_steps,
        fallback: false,
    })
}

/// Attribute log-likelihood of a finished passage, from forward passes
/// only: the mean bag log-mass over generated steps, or the class
/// log-probability of the passage's mean hidden state. Always in the
/// attribute's own direction, ignoring the objective sign.
pub fn attribute_score<S: Scalar>(
    lm: &TransformerLm<S>,
    tokens: &[TokenId],
    prompt_len: usize,
    target: &AttributeTarget<S>,
) -> Result<f64> {
    if prompt_len == 0 || tokens.len() <= prompt_len {
        return Err(Error::Contract("attribute_score needs a prompt and a non-empty generated region".into()));
    }
    match &target.model {
        AttributeModel::Bow(bag) => {
            let logits = lm.forward_logits(&tokens[..tokens.len() - 1])?;
            let v = lm.config().vocab_size;
            let mut total = 0.0;
            let mut probs = vec![S::zero(); v];
            for pos in prompt_len..tokens.len() {
                crate::tensor::softmax_slice(logits.row_slice(pos - 1), &mut probs);
                total += bow_log_likelihood(&probs, bag).as_f64();
            }
            Ok(total / (tokens.len() - prompt_len) as f64)
        }
        AttributeModel::Discriminator(d) => {
            let repr = mean_rows(&lm.forward_outputs(tokens)?)?;
            Ok(discrim_log_prob(repr.data(), d, target.class_index)?.as_f64())
        }
    }
}

/// Outcome of a ranked variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub best: SampleRecord,
    pub best_index: usize,
    /// Every sample, in seed order.
    pub all: Vec<SampleRecord>,
}

/// Draws `cfg.num_samples` passages with seeds `cfg.seed + i`, drops those
/// whose mean Dist is below `cfg.dist_threshold`, and returns the one with
/// the highest attribute score (lower seed on ties). When every sample is
/// filtered out, the best-scoring one is returned with `fallback` set.
pub fn generate_ranked<S: Scalar>(
    lm: &TransformerLm<S>,
    prompt: &str,
    length: usize,
    target: &AttributeTarget<S>,
    cfg: &SteeringConfig,
    variant: Variant,
) -> Result<Ranked> {
    if !variant.is_ranked() {
        return Err(Error::Contract(format!("generate_ranked runs BR or BCR, not {variant}")));
    }
    cfg.validate()?;
    let all = (0..cfg.num_samples as u64)
        .into_par_iter()
        .map(|i| {
            let sample_cfg = SteeringConfig { seed: cfg.seed.wrapping_add(i), ..cfg.clone() };
            generate(lm, prompt, length, Some(target), &sample_cfg, variant.single()).map(|mut r| {
                r.variant = variant;
                r
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let (best_index, fallback) = select_best(&all, cfg.dist_threshold, cfg.objective_sign.value());
    let mut best = all[best_index].clone();
    best.fallback = fallback;
    Ok(Ranked { best, best_index, all })
}

/// Index of the ranking winner and whether the fallback path was taken.
pub fn select_best(samples: &[SampleRecord], dist_threshold: f64, sign: f64) -> (usize, bool) {
    let pick = |keep: &dyn Fn(&SampleRecord) -> bool| {
        samples.iter().enumerate().filter(|(_, s)| keep(s)).fold(None::<usize>, |best, (i, s)| match best {
            Some(b) if samples[b].rank_score(sign) >= s.rank_score(sign) => Some(b),
            _ => Some(i),
        })
    };
    match pick(&|s| s.mean_dist >= dist_threshold) {
        Some(i) => (i, false),
        None => (pick(&|_| true).expect("at least one sample"), true),
    }
}

/// History after teacher-forcing `tokens`, plus each step's hidden state.
pub fn prime_history<S: Scalar>(lm: &TransformerLm<S>, tokens: &[TokenId]) -> Result<(History<S>, Vec<Tensor<S>>)> {
    let mut h = lm.empty_history();
    let mut outs = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let (o, next) = lm.lm_step(t, &h)?;
        outs.push(o);
        h = next;
    }
    Ok((h, outs))
}
