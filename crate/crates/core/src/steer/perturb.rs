//! Gradient ascent on the key/value history.

use crate::attribute::{bow_log_likelihood_var, discrim::passage_log_prob_var, discrim::soft_lookahead};
use crate::attribute::{AttributeModel, AttributeTarget, DiscrimContext};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lm::{History, StepInput, TokenId, TransformerLm};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

use super::SteeringConfig;

/// Gradient norms below this skip the layer's update for that iteration.
pub const MIN_GRAD_NORM: f64 = 1e-10;

/// Additive perturbation of a [`History`]: one `(key, value)` pair of flat
/// `[heads, t, d_head]` buffers per layer.
#[derive(Clone, Debug, PartialEq)]
pub struct DeltaH<S> {
    layers: Vec<(Vec<S>, Vec<S>)>,
    len: usize,
    n_heads: usize,
    d_head: usize,
}

impl<S: Scalar> DeltaH<S> {
    pub fn zeros_like(h: &History<S>) -> Self {
        let n = h.n_heads() * h.len() * h.d_head();
        Self {
            layers: (0..h.n_layers()).map(|_| (vec![S::zero(); n], vec![S::zero(); n])).collect(),
            len: h.len(),
            n_heads: h.n_heads(),
            d_head: h.d_head(),
        }
    }

    pub fn layers(&self) -> &[(Vec<S>, Vec<S>)] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [(Vec<S>, Vec<S>)] {
        &mut self.layers
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn is_zero(&self) -> bool {
        self.layers.iter().all(|(k, v)| k.iter().chain(v).all(|x| *x == S::zero()))
    }

    /// Whether every key/value entry at history position `pos` is zero.
    pub fn position_is_zero(&self, pos: usize) -> bool {
        let (t, dh) = (self.len, self.d_head);
        self.layers.iter().all(|(k, v)| {
            (0..self.n_heads).all(|h| {
                let r = (h * t + pos) * dh..(h * t + pos + 1) * dh;
                k[r.clone()].iter().chain(&v[r]).all(|x| *x == S::zero())
            })
        })
    }

    pub fn apply(&self, h: &History<S>) -> Result<History<S>> {
        h.perturbed(&self.layers)
    }

    fn tensor(&self, flat: &[S]) -> Result<Tensor<S>> {
        Tensor::new(vec![self.n_heads, self.len, self.d_head], flat.to_vec())
    }

    /// Zeroes every entry at positions older than the last `window`.
    fn mask_outside_window(&self, buf: &mut [S], window: usize) {
        if window == 0 || window >= self.len {
            return;
        }
        let (t, dh) = (self.len, self.d_head);
        for h in 0..self.n_heads {
            buf[h * t * dh..(h * t + t - window) * dh].iter_mut().for_each(|x| *x = S::zero());
        }
    }
}

/// State carried across the steps of one passage.
#[derive(Clone, Debug, PartialEq)]
pub struct SteerState<S> {
    /// Running maximum of each layer's gradient norm (bag-of-words targets).
    pub max_grad_norms: Vec<f64>,
    /// Sum of the unperturbed hidden states so far (discriminator targets).
    pub discrim: DiscrimContext<S>,
}

impl<S: Scalar> SteerState<S> {
    pub fn new(lm: &TransformerLm<S>) -> Self {
        Self { max_grad_norms: vec![0.0; lm.config().n_layers], discrim: DiscrimContext::new(lm.config().d_model) }
    }
}

/// Values of the steering objective's parts at one `H + ΔH`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveValue<S> {
    /// `log p(a | H + ΔH)` without the objective sign.
    pub attribute_ll: S,
    pub kl: S,
    /// `sign · attribute_ll − λ_KL · kl`.
    pub total: S,
}

/// Evaluates `sign · log p(a | H + ΔH) − λ_KL · KL(p̃ ‖ p)` for consuming
/// `x_t`, where `p` is given as `base_log_probs`. With `want_grad`, also
/// returns `∂total/∂ΔH` per layer.
#[allow(clippy::too_many_arguments)]
pub fn steering_objective<S: Scalar>(
    lm: &TransformerLm<S>,
    history: &History<S>,
    delta: &DeltaH<S>,
    x_t: TokenId,
    target: &AttributeTarget<S>,
    kl_scale: f64,
    base_log_probs: &[S],
    discrim: &DiscrimContext<S>,
    want_grad: bool,
) -> Result<(ObjectiveValue<S>, Option<Vec<(Vec<S>, Vec<S>)>>)> {
    if history.is_empty() {
        return Err(Error::Contract("steering needs a non-empty history".into()));
    }
    if delta.len != history.len() || delta.layers.len() != history.n_layers() {
        return Err(Error::Dimension("delta does not match the history".into()));
    }
    let lookahead = usize::from(matches!(target.model, AttributeModel::Discriminator(_)));
    if history.len() + 1 + lookahead > lm.config().max_context {
        return Err(Error::Capacity { len: history.len(), max: lm.config().max_context });
    }
    let mut g = Graph::new();
    let vars = lm.bind(&mut g, false);
    let mut delta_vars: Vec<(Var, Var)> = Vec::with_capacity(history.n_layers());
    let mut layers = Vec::with_capacity(history.n_layers());
    for (i, (dk, dv)) in delta.layers.iter().enumerate() {
        let k = g.leaf(history.key_tensor(i)?, false);
        let v = g.leaf(history.value_tensor(i)?, false);
        let dk = g.leaf(delta.tensor(dk)?, want_grad);
        let dv = g.leaf(delta.tensor(dv)?, want_grad);
        layers.push((g.add(k, dk)?, g.add(v, dv)?));
        delta_vars.push((dk, dv));
    }
    let past = lm.split_past(&mut g, &layers, history.len())?;
    let (o1, next) = lm.forward(&mut g, &vars, StepInput::Tokens(&[x_t]), Some(&past))?;
    let logits = lm.logits(&mut g, &vars, o1)?;
    let probs = g.softmax(logits)?;
    let attr = match &target.model {
        AttributeModel::Bow(bag) => bow_log_likelihood_var(&mut g, probs, bag)?,
        AttributeModel::Discriminator(d) => {
            let o2 = soft_lookahead(&mut g, lm, &vars, probs, &next)?;
            passage_log_prob_var(&mut g, d, target.class_index, discrim, &[o1, o2])?
        }
    };
    let logp = g.log_softmax(logits)?;
    let base = g.leaf(Tensor::new(vec![1, base_log_probs.len()], base_log_probs.to_vec())?, false);
    let diff = g.sub(logp, base)?;
    let weighted = g.mul(probs, diff)?;
    let kl = g.sum(weighted)?;
    let signed = g.scale(attr, target.sign())?;
    let total = if kl_scale > 0.0 {
        let penalty = g.scale(kl, S::lit(kl_scale))?;
        g.sub(signed, penalty)?
    } else {
        signed
    };
    let value = ObjectiveValue {
        attribute_ll: g.value(attr).data()[0],
        kl: g.value(kl).data()[0],
        total: g.value(total).data()[0],
    };
    if !want_grad {
        return Ok((value, None));
    }
    g.backward(total)?;
    let grads = delta_vars
        .iter()
        .map(|&(k, v)| (g.grad(k).expect("delta leaf").data().to_vec(), g.grad(v).expect("delta leaf").data().to_vec()))
        .collect();
    Ok((value, Some(grads)))
}

/// Runs the configured gradient iterations for one generation step and
/// returns the accumulated `ΔH`. Returns zeros without computing anything
/// when `m = 0`, `α = 0`, the history is empty, or `step_index` is past
/// `grad_length`.
pub fn perturb_past<S: Scalar>(
    lm: &TransformerLm<S>,
    history: &History<S>,
    x_t: TokenId,
    target: &AttributeTarget<S>,
    cfg: &SteeringConfig,
    step_index: usize,
    base_log_probs: &[S],
    state: &mut SteerState<S>,
) -> Result<DeltaH<S>> {
    let mut delta = DeltaH::zeros_like(history);
    let stopped = cfg.grad_length > 0 && step_index >= cfg.grad_length;
    if cfg.num_iterations == 0 || cfg.stepsize == 0.0 || stopped || history.is_empty() {
        return Ok(delta);
    }
    let adaptive = target.is_bow();
    for _ in 0..cfg.num_iterations {
        let (_, grads) =
            steering_objective(lm, history, &delta, x_t, target, cfg.kl_scale, base_log_probs, &state.discrim, true)?;
        for (layer, (mut gk, mut gv)) in grads.expect("requested").into_iter().enumerate() {
            delta.mask_outside_window(&mut gk, cfg.window_length);
            delta.mask_outside_window(&mut gv, cfg.window_length);
            let norm = gk.iter().chain(&gv).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
            if norm < MIN_GRAD_NORM {
                continue;
            }
            let norm_term = if adaptive {
                let m = &mut state.max_grad_norms[layer];
                *m = m.max(norm);
                *m
            } else {
                norm
            };
            let coef = S::lit(cfg.stepsize / norm_term.powf(cfg.gamma));
            let (dk, dv) = &mut delta.layers[layer];
            dk.iter_mut().zip(&gk).for_each(|(d, &g)| *d += coef * g);
            dv.iter_mut().zip(&gv).for_each(|(d, &g)| *d += coef * g);
        }
    }
    Ok(delta)
}
