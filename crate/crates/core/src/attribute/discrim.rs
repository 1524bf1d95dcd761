//! Single-layer discriminator over the mean final hidden state `ō`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::lm::{read_archive, write_archive, History, LmVars, Manifest, PastVars, StepInput, TokenId, TransformerLm};
use crate::optim::{Adam, AdamConfig};
use crate::scalar::Scalar;
use crate::tensor::{log_softmax_slice, Tensor};

use super::{AttributeModel, AttributeTarget};

pub const DISCRIMINATOR_KIND: &str = "discriminator";

#[derive(Clone, Debug, PartialEq)]
pub struct LinearDiscriminator<S> {
    /// `[num_classes, d_model]`.
    pub weights: Tensor<S>,
    pub bias: Tensor<S>,
    pub class_names: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct DiscrimManifestConfig {
    d_model: usize,
    num_classes: usize,
}

impl<S: Scalar> LinearDiscriminator<S> {
    pub fn zeros(d_model: usize, class_names: Vec<String>) -> Self {
        let c = class_names.len();
        Self { weights: Tensor::zeros(&[c, d_model]), bias: Tensor::zeros(&[c]), class_names }
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn d_model(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `d_model · num_classes + num_classes`.
    pub fn parameter_count(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn logits(&self, repr: &[S]) -> Result<Vec<S>> {
        let d = self.d_model();
        if repr.len() != d {
            return Err(Error::Dimension(format!(
                "representation of {} values, discriminator expects {d}",
                repr.len()
            )));
        }
        let w = self.weights.data();
        Ok((0..self.num_classes())
            .map(|c| self.bias.data()[c] + w[c * d..(c + 1) * d].iter().zip(repr).map(|(&a, &b)| a * b).sum::<S>())
            .collect())
    }

    pub fn cast<T: Scalar>(&self) -> LinearDiscriminator<T> {
        LinearDiscriminator {
            weights: self.weights.cast(),
            bias: self.bias.cast(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let config = DiscrimManifestConfig { d_model: self.d_model(), num_classes: self.num_classes() };
        let template = Manifest {
            kind: DISCRIMINATOR_KIND.into(),
            config: serde_json::to_value(config)?,
            vocab: None,
            class_names: self.class_names.clone(),
            tensors: Vec::new(),
        };
        write_archive(dir, template, &[("weights".to_string(), &self.weights), ("bias".to_string(), &self.bias)])
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let (manifest, tensors) = read_archive(dir)?;
        let format = |tensor: &str, reason: String| Error::Format { tensor: tensor.into(), reason };
        if manifest.kind != DISCRIMINATOR_KIND {
            return Err(format("<manifest>", format!("kind `{}` is not {DISCRIMINATOR_KIND}", manifest.kind)));
        }
        let cfg: DiscrimManifestConfig = serde_json::from_value(manifest.config)?;
        if manifest.class_names.len() != cfg.num_classes {
            return Err(format("<manifest>", "class_names disagree with num_classes".into()));
        }
        let find = |name: &str, shape: &[usize]| -> Result<Tensor<S>> {
            let t = tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, t)| t)
                .ok_or_else(|| format(name, "missing".into()))?;
            if t.shape() != shape {
                return Err(format(name, format!("shape {:?}, expected {shape:?}", t.shape())));
            }
            Ok(t.cast())
        };
        Ok(Self {
            weights: find("weights", &[cfg.num_classes, cfg.d_model])?,
            bias: find("bias", &[cfg.num_classes])?,
            class_names: manifest.class_names,
        })
    }
}

/// Element-wise mean of hidden states.
pub fn mean_representation<S: Scalar>(o_list: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = o_list.first().ok_or_else(|| Error::Contract("mean of an empty list".into()))?;
    let mut acc = vec![S::zero(); first.len()];
    for o in o_list {
        if o.len() != acc.len() {
            return Err(Error::Dimension("hidden states differ in width".into()));
        }
        acc.iter_mut().zip(o.data()).for_each(|(a, &b)| *a += b);
    }
    let inv = S::one() / S::lit(o_list.len() as f64);
    acc.iter_mut().for_each(|a| *a *= inv);
    Tensor::new(vec![acc.len()], acc)
}

/// Mean of the rows of a `[T, d]` matrix of hidden states.
pub fn mean_rows<S: Scalar>(outputs: &Tensor<S>) -> Result<Tensor<S>> {
    let (t, d) = outputs.dims2()?;
    let rows: Vec<Tensor<S>> = (0..t).map(|i| Tensor::row(outputs.data()[i * d..(i + 1) * d].to_vec())).collect();
    mean_representation(&rows)
}

/// `log_softmax(W·repr + b)[class_index]`.
pub fn discrim_log_prob<S: Scalar>(repr: &[S], d: &LinearDiscriminator<S>, class_index: usize) -> Result<S> {
    if class_index >= d.num_classes() {
        return Err(Error::Index(format!("class {class_index} of {}", d.num_classes())));
    }
    let logits = d.logits(repr)?;
    let mut out = vec![S::zero(); logits.len()];
    log_softmax_slice(&logits, &mut out);
    Ok(out[class_index])
}

/// Differentiable form for a `[1, d_model]` representation on `g`.
pub fn discrim_log_prob_var<S: Scalar>(
    g: &mut Graph<S>,
    repr: Var,
    d: &LinearDiscriminator<S>,
    class_index: usize,
) -> Result<Var> {
    if class_index >= d.num_classes() {
        return Err(Error::Index(format!("class {class_index} of {}", d.num_classes())));
    }
    let w = g.leaf(d.weights.clone(), false);
    let b = g.leaf(d.bias.clone(), false);
    let logits = g.matmul_nt(repr, w)?;
    let logits = g.add_row(logits, b)?;
    let logp = g.log_softmax(logits)?;
    g.pick(logp, class_index)
}

/// Running sum of the hidden states `o_1..o_t` already produced for the
/// passage, so the steering objective can average over the whole passage.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscrimContext<S> {
    pub sum: Vec<S>,
    pub count: usize,
}

impl<S: Scalar> DiscrimContext<S> {
    pub fn new(d_model: usize) -> Self {
        Self { sum: vec![S::zero(); d_model], count: 0 }
    }

    pub fn push(&mut self, o: &[S]) {
        self.sum.iter_mut().zip(o).for_each(|(a, &b)| *a += b);
        self.count += 1;
    }
}

/// Expected next-token embedding `Σ_i p[i]·E[i]` fed one step through the
/// network after `past`; returns the lookahead hidden state `[1, d_model]`.
pub fn soft_lookahead<S: Scalar>(
    g: &mut Graph<S>,
    lm: &TransformerLm<S>,
    vars: &LmVars,
    probs: Var,
    past: &PastVars,
) -> Result<Var> {
    let e = g.matmul(probs, vars.tok_emb())?;
    let (o, _) = lm.forward(g, vars, StepInput::Embedded(e), Some(past))?;
    Ok(o)
}

/// `log p(class | mean(o_1..o_t, o_{t+1}, o_{t+2}))` on `g`, where the
/// passage context supplies `o_1..o_t`.
pub fn passage_log_prob_var<S: Scalar>(
    g: &mut Graph<S>,
    d: &LinearDiscriminator<S>,
    class_index: usize,
    ctx: &DiscrimContext<S>,
    fresh: &[Var],
) -> Result<Var> {
    let mut parts = Vec::with_capacity(fresh.len() + 1);
    if ctx.count > 0 {
        parts.push(g.leaf(Tensor::row(ctx.sum.clone()), false));
    }
    parts.extend_from_slice(fresh);
    let mut total = parts[0];
    for &p in &parts[1..] {
        total = g.add(total, p)?;
    }
    let mean = g.scale(total, S::one() / S::lit((ctx.count + fresh.len()) as f64))?;
    discrim_log_prob_var(g, mean, d, class_index)
}

/// The signed discriminator objective for consuming `x_t` after `history`:
/// the current hidden state plus the soft-embedding lookahead enter the
/// passage mean. Evaluated at the unperturbed history.
pub fn discrim_step_loss<S: Scalar>(
    lm: &TransformerLm<S>,
    history: &History<S>,
    x_t: TokenId,
    target: &AttributeTarget<S>,
    ctx: &DiscrimContext<S>,
) -> Result<S> {
    let AttributeModel::Discriminator(d) = &target.model else {
        return Err(Error::Contract("discrim_step_loss needs a discriminator target".into()));
    };
    if history.len() + 2 > lm.config().max_context {
        return Err(Error::Capacity { len: history.len(), max: lm.config().max_context });
    }
    let mut g = Graph::new();
    let vars = lm.bind(&mut g, false);
    let past = lm.bind_history(&mut g, history)?;
    let (o1, next) = lm.forward(&mut g, &vars, StepInput::Tokens(&[x_t]), past.as_ref())?;
    let logits = lm.logits(&mut g, &vars, o1)?;
    let probs = g.softmax(logits)?;
    let o2 = soft_lookahead(&mut g, lm, &vars, probs, &next)?;
    let lp = passage_log_prob_var(&mut g, d, target.class_index, ctx, &[o1, o2])?;
    Ok(target.sign() * g.value(lp).data()[0])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrimTrainOptions {
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
    pub batch_size: usize,
    /// Fraction of rows used for training; the rest is held out.
    pub train_fraction: f64,
}

impl Default for DiscrimTrainOptions {
    fn default() -> Self {
        Self { epochs: 1500, lr: 1e-2, seed: 0, batch_size: 8, train_fraction: 0.8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscrimTrainReport {
    pub options: DiscrimTrainOptions,
    pub class_names: Vec<String>,
    pub train_rows: usize,
    pub heldout_rows: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    /// Mean training cross-entropy of each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Parses `label<TAB>text` rows; blank lines are skipped.
pub fn read_labelled_tsv(path: &Path) -> Result<Vec<(String, String)>> {
    if !path.exists() {
        return Err(Error::MissingPath(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (label, body) =
            line.split_once('\t').ok_or_else(|| Error::Data(format!("line {}: expected label<TAB>text", n + 1)))?;
        rows.push((label.trim().to_string(), body.to_string()));
    }
    Ok(rows)
}

pub fn train_discriminator<S: Scalar>(
    dataset_path: &Path,
    lm: &TransformerLm<S>,
    options: &DiscrimTrainOptions,
) -> Result<(LinearDiscriminator<S>, DiscrimTrainReport)> {
    train_discriminator_on_rows(&read_labelled_tsv(dataset_path)?, lm, options)
}

/// Fits the linear layer on frozen mean representations. Classes are
/// named in sorted label order.
pub fn train_discriminator_on_rows<S: Scalar>(
    rows: &[(String, String)],
    lm: &TransformerLm<S>,
    options: &DiscrimTrainOptions,
) -> Result<(LinearDiscriminator<S>, DiscrimTrainReport)> {
    let class_names: Vec<String> = rows.iter().map(|(l, _)| l.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    if class_names.len() < 2 {
        return Err(Error::Data(format!("need at least 2 classes, found {}", class_names.len())));
    }
    for c in &class_names {
        if rows.iter().filter(|(l, _)| l == c).count() < 2 {
            return Err(Error::Data(format!("class `{c}` has fewer than 2 rows")));
        }
    }
    let mut examples = Vec::with_capacity(rows.len());
    for (label, text) in rows {
        let mut tokens = lm.tokenizer().encode(text);
        if tokens.is_empty() {
            return Err(Error::Data(format!("row labelled `{label}` has no tokens")));
        }
        tokens.truncate(lm.config().max_context);
        let repr = mean_rows(&lm.forward_outputs(&tokens)?)?;
        let class = class_names.iter().position(|c| c == label).expect("collected above");
        examples.push((repr.into_data(), class));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng);
    let n_train = ((examples.len() as f64 * options.train_fraction).round() as usize).clamp(1, examples.len());
    let (train_idx, held_idx) = order.split_at(n_train);

    // Train on standardised features, then fold the scaling into the layer
    // so the stored model still acts on raw mean representations.
    let d_model = lm.config().d_model;
    let (mu, sigma) = feature_moments(&examples, train_idx, d_model);
    let raw: Vec<Vec<S>> = examples.iter().map(|(x, _)| x.clone()).collect();
    for (x, _) in examples.iter_mut() {
        x.iter_mut().zip(mu.iter().zip(&sigma)).for_each(|(v, (&m, &s))| *v = (*v - m) / s);
    }
    let mut disc = LinearDiscriminator::zeros(d_model, class_names.clone());
    let cfg = AdamConfig { lr: options.lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 0.0 };
    let mut adam = Adam::new(cfg, [disc.weights.len(), disc.bias.len()]);
    let mut epoch_losses = Vec::with_capacity(options.epochs);
    let mut train_order = train_idx.to_vec();
    for _ in 0..options.epochs {
        train_order.shuffle(&mut rng);
        let mut total = 0.0;
        for batch in train_order.chunks(options.batch_size.max(1)) {
            let (loss, gw, gb) = batch_gradient(&disc, &examples, batch)?;
            total += loss * batch.len() as f64;
            adam.step(vec![disc.weights.data_mut(), disc.bias.data_mut()], &[gw.data(), gb.data()]);
        }
        epoch_losses.push(total / train_order.len() as f64);
    }
    fold_standardisation(&mut disc, &mu, &sigma);
    for ((x, _), r) in examples.iter_mut().zip(raw) {
        *x = r;
    }
    let accuracy = |idx: &[usize]| -> Result<f64> {
        if idx.is_empty() {
            return Ok(f64::NAN);
        }
        let mut hits = 0;
        for &i in idx {
            let (repr, class) = &examples[i];
            let logits = disc.logits(repr)?;
            let best = (0..logits.len()).fold(0, |b, c| if logits[c] > logits[b] { c } else { b });
            hits += usize::from(best == *class);
        }
        Ok(hits as f64 / idx.len() as f64)
    };
    let report = DiscrimTrainReport {
        options: options.clone(),
        class_names,
        train_rows: train_idx.len(),
        heldout_rows: held_idx.len(),
        train_accuracy: accuracy(train_idx)?,
        heldout_accuracy: accuracy(held_idx)?,
        epoch_losses,
    };
    Ok((disc, report))
}

/// Per-feature mean and standard deviation over the training rows; the
/// deviation is floored so constant features stay finite.
fn feature_moments<S: Scalar>(examples: &[(Vec<S>, usize)], idx: &[usize], d: usize) -> (Vec<S>, Vec<S>) {
    let n = idx.len() as f64;
    let mut mu = vec![0.0f64; d];
    for &i in idx {
        mu.iter_mut().zip(&examples[i].0).for_each(|(m, x)| *m += x.as_f64() / n);
    }
    let mut var = vec![0.0f64; d];
    for &i in idx {
        var.iter_mut().zip(examples[i].0.iter().zip(&mu)).for_each(|(v, (x, m))| *v += (x.as_f64() - m).powi(2) / n);
    }
    (mu.into_iter().map(S::lit).collect(), var.into_iter().map(|v| S::lit(v.sqrt().max(1e-6))).collect())
}

/// Rewrites `W (x − μ)/σ + b` as `W' x + b'`.
fn fold_standardisation<S: Scalar>(disc: &mut LinearDiscriminator<S>, mu: &[S], sigma: &[S]) {
    let d = mu.len();
    for c in 0..disc.num_classes() {
        let row = &mut disc.weights.data_mut()[c * d..(c + 1) * d];
        let mut shift = S::zero();
        for ((w, &m), &s) in row.iter_mut().zip(mu).zip(sigma) {
            *w /= s;
            shift += *w * m;
        }
        disc.bias.data_mut()[c] -= shift;
    }
}

fn batch_gradient<S: Scalar>(
    disc: &LinearDiscriminator<S>,
    examples: &[(Vec<S>, usize)],
    batch: &[usize],
) -> Result<(f64, Tensor<S>, Tensor<S>)> {
    let (c, d) = (disc.num_classes(), disc.d_model());
    let mut g = Graph::new();
    let w = g.leaf(disc.weights.clone(), true);
    let b = g.leaf(disc.bias.clone(), true);
    let x: Vec<S> = batch.iter().flat_map(|&i| examples[i].0.iter().copied()).collect();
    let x = g.leaf(Tensor::new(vec![batch.len(), d], x)?, false);
    let logits = g.matmul_nt(x, w)?;
    let logits = g.add_row(logits, b)?;
    let logp = g.log_softmax(logits)?;
    let ids: Vec<usize> = batch.iter().enumerate().map(|(row, &i)| row * c + examples[i].1).collect();
    let picked = g.sum_indices(logp, &ids)?;
    let loss = g.scale(picked, -S::one() / S::lit(batch.len() as f64))?;
    g.backward(loss)?;
    Ok((g.value(loss).data()[0].as_f64(), g.grad(w).expect("leaf").clone(), g.grad(b).expect("leaf").clone()))
}

#[cfg(test)]
mod tests {
    use rand::Rng;
    use sha2::{Digest, Sha256};

    use super::*;
    use crate::attribute::ObjectiveSign;
    use crate::lm::{LmConfig, Tokenizer, TokenizerKind, WordVocab};

    fn two_class(d: usize) -> LinearDiscriminator<f64> {
        LinearDiscriminator::zeros(d, vec!["neg".into(), "pos".into()])
    }

    fn word_lm(text: &str, seed: u64) -> TransformerLm<f64> {
        let cfg = LmConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            max_context: 24,
            tokenizer_kind: TokenizerKind::Word,
            ..LmConfig::default()
        };
        TransformerLm::init(&cfg, Tokenizer::Word(WordVocab::build(text)), seed).unwrap()
    }

    #[test]
    fn parameter_count_formula() {
        assert_eq!(LinearDiscriminator::<f32>::zeros(128, vec!["a".into(), "b".into()]).parameter_count(), 258);
    }

    #[test]
    fn mean_representation_examples() {
        let v = Tensor::row(vec![1.0, -2.0, 3.0]);
        assert_eq!(mean_representation(&[v.clone()]).unwrap().data(), v.data());
        let neg = v.map(|x: f64| -x);
        assert!(mean_representation(&[v, neg]).unwrap().data().iter().all(|&x| x == 0.0));
        assert!(matches!(mean_representation::<f64>(&[]), Err(Error::Contract(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let vs: Vec<Tensor<f64>> = (0..5).map(|_| Tensor::randn(&[4], 1.0, &mut rng)).collect();
        let m = mean_representation(&vs).unwrap();
        for j in 0..4 {
            let want = vs.iter().map(|v| v.data()[j]).sum::<f64>() / 5.0;
            assert!((m.data()[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn log_prob_examples() {
        let d = two_class(3);
        assert!((discrim_log_prob(&[0.3, -1.0, 2.0], &d, 1).unwrap() - 0.5f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let d = LinearDiscriminator {
            weights: Tensor::randn(&[3, 4], 1.0, &mut rng),
            bias: Tensor::randn(&[3], 1.0, &mut rng),
            class_names: vec!["a".into(), "b".into(), "c".into()],
        };
        let r: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let logits = d.logits(&r).unwrap();
        let lse = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
        for c in 0..3 {
            let lp = discrim_log_prob(&r, &d, c).unwrap();
            assert!(lp <= 0.0);
            assert!((lp - (logits[c] - lse)).abs() < 1e-12);
        }
        // a constant bias shift leaves class probabilities unchanged
        let mut shifted = d.clone();
        shifted.bias.data_mut().iter_mut().for_each(|b| *b += 3.5);
        for c in 0..3 {
            assert!((discrim_log_prob(&r, &d, c).unwrap() - discrim_log_prob(&r, &shifted, c).unwrap()).abs() < 1e-12);
        }
        assert!(matches!(discrim_log_prob(&r, &d, 3), Err(Error::Index(_))));
    }

    #[test]
    fn checkpoint_round_trip_keeps_class_names() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = LinearDiscriminator::<f32> {
            weights: Tensor::randn(&[2, 5], 1.0, &mut rng),
            bias: Tensor::randn(&[2], 1.0, &mut rng),
            class_names: vec!["negative".into(), "positive".into()],
        };
        d.save(dir.path()).unwrap();
        assert_eq!(LinearDiscriminator::<f32>::load(dir.path()).unwrap(), d);
    }

    #[test]
    fn step_loss_sign_flip_and_hard_token_equivalence() {
        let text = "good fine great bad awful poor the movie was";
        let lm = word_lm(text, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = LinearDiscriminator {
            weights: Tensor::randn(&[2, 16], 1.0, &mut rng),
            bias: Tensor::zeros(&[2]),
            class_names: vec!["neg".into(), "pos".into()],
        };
        let mut h = lm.empty_history();
        let mut ctx = DiscrimContext::new(16);
        for &t in &lm.tokenizer().encode("the movie") {
            let (o, next) = lm.lm_step(t, &h).unwrap();
            ctx.push(o.data());
            h = next;
        }
        let x = lm.tokenizer().encode("was")[0];
        let plus = AttributeTarget::discriminator(d.clone(), 1, ObjectiveSign::Plus).unwrap();
        let minus = AttributeTarget::discriminator(d.clone(), 1, ObjectiveSign::Minus).unwrap();
        let a = discrim_step_loss(&lm, &h, x, &plus, &ctx).unwrap();
        let b = discrim_step_loss(&lm, &h, x, &minus, &ctx).unwrap();
        assert_eq!(a, -b);

        // one-hot soft sample reproduces the hard-token lookahead exactly
        let j = lm.tokenizer().encode("great")[0];
        let mut g = Graph::new();
        let vars = lm.bind(&mut g, false);
        let past = lm.bind_history(&mut g, &h).unwrap();
        let (_, next) = lm.forward(&mut g, &vars, StepInput::Tokens(&[x]), past.as_ref()).unwrap();
        let mut onehot = vec![0.0; lm.config().vocab_size];
        onehot[j] = 1.0;
        let p = g.leaf(Tensor::new(vec![1, onehot.len()], onehot).unwrap(), false);
        let e = g.matmul(p, vars.tok_emb()).unwrap();
        let hard = g.embed(vars.tok_emb(), &[j]).unwrap();
        assert_eq!(g.value(e).data(), g.value(hard).data());
        let soft = soft_lookahead(&mut g, &lm, &vars, p, &next).unwrap();
        let (hard_o, _) = lm.forward(&mut g, &vars, StepInput::Tokens(&[j]), Some(&next)).unwrap();
        assert_eq!(g.value(soft).data(), g.value(hard_o).data());
    }

    #[test]
    fn lookahead_past_the_context_is_a_capacity_error() {
        let lm = word_lm("a b c", 6);
        let mut h = lm.empty_history();
        for _ in 0..23 {
            h = lm.lm_step(3, &h).unwrap().1;
        }
        let t = AttributeTarget::discriminator(two_class(16), 0, ObjectiveSign::Plus).unwrap();
        let ctx = DiscrimContext::new(16);
        assert!(matches!(discrim_step_loss(&lm, &h, 3, &t, &ctx), Err(Error::Capacity { .. })));
    }

    fn separable_rows(n: usize, seed: u64) -> Vec<(String, String)> {
        let pos = ["good", "great", "fine", "lovely", "superb"];
        let neg = ["bad", "awful", "poor", "dreadful", "weak"];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let (label, words) = if i % 2 == 0 { ("positive", &pos) } else { ("negative", &neg) };
                let body: Vec<&str> = (0..6).map(|_| words[rng.gen_range(0..5)]).collect();
                (label.to_string(), format!("the film was {}", body.join(" ")))
            })
            .collect()
    }

    fn lm_hash(lm: &TransformerLm<f64>) -> Vec<u8> {
        let mut h = Sha256::new();
        for t in lm.params().tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().to_vec()
    }

    #[test]
    fn separable_set_is_learned_without_touching_the_lm() {
        let rows = separable_rows(80, 7);
        let text: String = rows.iter().map(|(_, t)| t.as_str()).collect::<Vec<_>>().join(" ");
        let lm = word_lm(&text, 8);
        let before = lm_hash(&lm);
        let opts = DiscrimTrainOptions { lr: 0.05, ..DiscrimTrainOptions::default() };
        let (d, report) = train_discriminator_on_rows(&rows, &lm, &opts).unwrap();
        assert!(report.heldout_accuracy >= 0.9, "{report:?}");
        assert_eq!(report.class_names, vec!["negative".to_string(), "positive".to_string()]);
        assert_eq!(d.parameter_count(), 16 * 2 + 2);
        assert_eq!(lm_hash(&lm), before);
        let (d2, _) = train_discriminator_on_rows(&rows, &lm, &opts).unwrap();
        assert_eq!(d, d2);
    }

    #[test]
    fn zero_lr_keeps_weights() {
        let rows = separable_rows(20, 9);
        let lm = word_lm("the film was good bad", 10);
        let (d, _) =
            train_discriminator_on_rows(&rows, &lm, &DiscrimTrainOptions { lr: 0.0, ..Default::default() }).unwrap();
        assert_eq!(d, LinearDiscriminator::zeros(16, vec!["negative".into(), "positive".into()]));
    }

    #[test]
    fn single_class_is_a_data_error() {
        let rows = vec![("a".to_string(), "x".to_string()), ("a".to_string(), "y".to_string())];
        let lm = word_lm("x y", 11);
        assert!(matches!(train_discriminator_on_rows(&rows, &lm, &Default::default()), Err(Error::Data(_))));
    }
}
