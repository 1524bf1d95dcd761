use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::history::{History, LayerKv};
use super::tokenizer::{TokenId, Tokenizer};
use super::LmConfig;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{softmax_slice, Tensor};

type P<S> = Arc<Tensor<S>>;

#[derive(Clone, Debug)]
pub struct LayerParams<S> {
    pub ln1_gain: P<S>,
    pub ln1_bias: P<S>,
    pub w_q: P<S>,
    pub b_q: P<S>,
    pub w_k: P<S>,
    pub b_k: P<S>,
    pub w_v: P<S>,
    pub b_v: P<S>,
    pub w_o: P<S>,
    pub b_o: P<S>,
    pub ln2_gain: P<S>,
    pub ln2_bias: P<S>,
    pub w_fc: P<S>,
    pub b_fc: P<S>,
    pub w_proj: P<S>,
    pub b_proj: P<S>,
}

/// Every trainable tensor of the LM. `w_out: [d_model, V]` is the output
/// projection applied to the final hidden state `o`.
#[derive(Clone, Debug)]
pub struct LmParams<S> {
    pub tok_emb: P<S>,
    pub pos_emb: P<S>,
    pub layers: Vec<LayerParams<S>>,
    pub lnf_gain: P<S>,
    pub lnf_bias: P<S>,
    pub w_out: P<S>,
    pub b_out: P<S>,
}

const LAYER_FIELDS: [&str; 16] = [
    "ln1.gain",
    "ln1.bias",
    "attn.w_q",
    "attn.b_q",
    "attn.w_k",
    "attn.b_k",
    "attn.w_v",
    "attn.b_v",
    "attn.w_o",
    "attn.b_o",
    "ln2.gain",
    "ln2.bias",
    "mlp.w_fc",
    "mlp.b_fc",
    "mlp.w_proj",
    "mlp.b_proj",
];

impl<S: Scalar> LayerParams<S> {
    fn fields(&self) -> [&P<S>; 16] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.b_q,
            &self.w_k,
            &self.b_k,
            &self.w_v,
            &self.b_v,
            &self.w_o,
            &self.b_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_fc,
            &self.b_fc,
            &self.w_proj,
            &self.b_proj,
        ]
    }

    fn fields_mut(&mut self) -> [&mut P<S>; 16] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.b_q,
            &mut self.w_k,
            &mut self.b_k,
            &mut self.w_v,
            &mut self.b_v,
            &mut self.w_o,
            &mut self.b_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_fc,
            &mut self.b_fc,
            &mut self.w_proj,
            &mut self.b_proj,
        ]
    }
}

impl<S: Scalar> LmParams<S> {
    /// Expected `(name, shape)` of every tensor, in checkpoint order.
    pub fn manifest(config: &LmConfig) -> Vec<(String, Vec<usize>)> {
        let (d, v, c, f) = (config.d_model, config.vocab_size, config.max_context, config.d_mlp());
        let mut out = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![c, d])];
        for i in 0..config.n_layers {
            let shapes: [Vec<usize>; 16] = [
                vec![d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d, d],
                vec![d],
                vec![d],
                vec![d],
                vec![d, f],
                vec![f],
                vec![f, d],
                vec![d],
            ];
            for (name, shape) in LAYER_FIELDS.iter().zip(shapes) {
                out.push((format!("layers.{i}.{name}"), shape));
            }
        }
        out.push(("lnf.gain".to_string(), vec![d]));
        out.push(("lnf.bias".to_string(), vec![d]));
        out.push(("w_out".to_string(), vec![d, v]));
        out.push(("b_out".to_string(), vec![v]));
        out
    }

    pub fn tensors(&self) -> Vec<&P<S>> {
        let mut out = vec![&self.tok_emb, &self.pos_emb];
        for l in &self.layers {
            out.extend(l.fields());
        }
        out.extend([&self.lnf_gain, &self.lnf_bias, &self.w_out, &self.b_out]);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut P<S>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for l in &mut self.layers {
            out.extend(l.fields_mut());
        }
        out.extend([&mut self.lnf_gain, &mut self.lnf_bias, &mut self.w_out, &mut self.b_out]);
        out
    }

    /// Rebuilds from tensors listed in [`LmParams::manifest`] order.
    pub fn from_ordered(config: &LmConfig, tensors: Vec<Tensor<S>>) -> Result<Self> {
        let manifest = Self::manifest(config);
        if tensors.len() != manifest.len() {
            return Err(Error::Format {
                tensor: "<all>".into(),
                reason: format!("expected {} tensors, got {}", manifest.len(), tensors.len()),
            });
        }
        for ((name, shape), t) in manifest.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::Format {
                    tensor: name.clone(),
                    reason: format!("shape {:?}, expected {shape:?}", t.shape()),
                });
            }
        }
        let mut it = tensors.into_iter().map(Arc::new);
        let mut next = || it.next().expect("count checked");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..config.n_layers)
            .map(|_| LayerParams {
                ln1_gain: next(),
                ln1_bias: next(),
                w_q: next(),
                b_q: next(),
                w_k: next(),
                b_k: next(),
                w_v: next(),
                b_v: next(),
                w_o: next(),
                b_o: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w_fc: next(),
                b_fc: next(),
                w_proj: next(),
                b_proj: next(),
            })
            .collect();
        Ok(Self { tok_emb, pos_emb, layers, lnf_gain: next(), lnf_bias: next(), w_out: next(), b_out: next() })
    }

    fn init(config: &LmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let resid_std = 0.02 / ((2 * config.n_layers) as f64).sqrt();
        let tensors = Self::manifest(config)
            .into_iter()
            .map(|(name, shape)| {
                if name.ends_with(".gain") {
                    Tensor::full(&shape, S::one())
                } else if shape.len() == 1 {
                    Tensor::zeros(&shape)
                } else if name.ends_with("w_o") || name.ends_with("w_proj") {
                    Tensor::randn(&shape, resid_std, &mut rng)
                } else if name == "pos_emb" {
                    Tensor::randn(&shape, 0.01, &mut rng)
                } else {
                    Tensor::randn(&shape, 0.02, &mut rng)
                }
            })
            .collect();
        Self::from_ordered(config, tensors).expect("manifest shapes")
    }
}

/// Graph handles for every parameter of one forward pass.
pub struct LmVars {
    tok_emb: Var,
    pos_emb: Var,
    layers: Vec<[Var; 16]>,
    lnf_gain: Var,
    lnf_bias: Var,
    w_out: Var,
    b_out: Var,
}

impl LmVars {
    /// Parameter handles in [`LmParams::manifest`] order.
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            out.extend_from_slice(l);
        }
        out.extend([self.lnf_gain, self.lnf_bias, self.w_out, self.b_out]);
        out
    }

    pub fn tok_emb(&self) -> Var {
        self.tok_emb
    }
}

/// Per-layer, per-head key and value matrices `[t, d_head]` on a graph.
#[derive(Clone, Debug)]
pub struct PastVars {
    pub keys: Vec<Vec<Var>>,
    pub values: Vec<Vec<Var>>,
    pub len: usize,
}

pub enum StepInput<'a> {
    Tokens(&'a [TokenId]),
    /// Pre-computed input embeddings `[q, d_model]` (positional embedding
    /// is still added), e.g. an expected embedding under a soft distribution.
    Embedded(Var),
}

#[derive(Clone, Debug)]
pub struct TransformerLm<S> {
    config: LmConfig,
    tokenizer: Tokenizer,
    params: LmParams<S>,
}

impl<S: Scalar> TransformerLm<S> {
    pub fn new(config: LmConfig, tokenizer: Tokenizer, params: LmParams<S>) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} entries, config says vocab_size {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        if tokenizer.kind() != config.tokenizer_kind {
            return Err(Error::Config("tokenizer kind differs from config".into()));
        }
        Ok(Self { config, tokenizer, params })
    }

    /// Randomly initialised model. The tokenizer fixes `vocab_size` and
    /// `tokenizer_kind`.
    pub fn init(config: &LmConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        let config =
            LmConfig { vocab_size: tokenizer.vocab_size(), tokenizer_kind: tokenizer.kind(), ..config.clone() };
        config.validate()?;
        let params = LmParams::init(&config, seed);
        Self::new(config, tokenizer, params)
    }

    pub fn config(&self) -> &LmConfig {
        &self.config
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn params(&self) -> &LmParams<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut LmParams<S> {
        &mut self.params
    }

    pub fn cast<T: Scalar>(&self) -> TransformerLm<T> {
        let tensors = self.params.tensors().into_iter().map(|t| t.cast::<T>()).collect();
        TransformerLm {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params: LmParams::from_ordered(&self.config, tensors).expect("same manifest"),
        }
    }

    pub fn empty_history(&self) -> History<S> {
        History::empty(self.config.n_layers, self.config.n_heads, self.config.d_head())
    }

    /// Puts every parameter on `g`, as gradient-tracked leaves when
    /// `trainable`, otherwise as shared constants.
    pub fn bind(&self, g: &mut Graph<S>, trainable: bool) -> LmVars {
        let mut vars = self.params.tensors().into_iter().map(|t| g.shared_leaf(Arc::clone(t), trainable));
        let mut next = || vars.next().expect("parameter count");
        let tok_emb = next();
        let pos_emb = next();
        let layers = (0..self.config.n_layers).map(|_| std::array::from_fn(|_| next())).collect();
        LmVars { tok_emb, pos_emb, layers, lnf_gain: next(), lnf_bias: next(), w_out: next(), b_out: next() }
    }

    /// Splits per-layer `[heads, t, d_head]` key/value vars into heads.
    pub fn split_past(&self, g: &mut Graph<S>, layers: &[(Var, Var)], len: usize) -> Result<PastVars> {
        let mut keys = Vec::with_capacity(layers.len());
        let mut values = Vec::with_capacity(layers.len());
        for &(k, v) in layers {
            let kh = (0..self.config.n_heads).map(|h| g.select_head(k, h)).collect::<Result<Vec<_>>>()?;
            let vh = (0..self.config.n_heads).map(|h| g.select_head(v, h)).collect::<Result<Vec<_>>>()?;
            keys.push(kh);
            values.push(vh);
        }
        Ok(PastVars { keys, values, len })
    }

    /// History as graph constants; `None` when it is empty.
    pub fn bind_history(&self, g: &mut Graph<S>, history: &History<S>) -> Result<Option<PastVars>> {
        if history.is_empty() {
            return Ok(None);
        }
        let mut layers = Vec::with_capacity(history.n_layers());
        for i in 0..history.n_layers() {
            let k = g.leaf(history.key_tensor(i)?, false);
            let v = g.leaf(history.value_tensor(i)?, false);
            layers.push((k, v));
        }
        Ok(Some(self.split_past(g, &layers, history.len())?))
    }

    /// Runs `q` new positions through the network after `past`, returning
    /// the final hidden states `o: [q, d_model]` and the extended key/value
    /// matrices. Attention is causal within the new positions.
    pub fn forward(
        &self,
        g: &mut Graph<S>,
        vars: &LmVars,
        input: StepInput<'_>,
        past: Option<&PastVars>,
    ) -> Result<(Var, PastVars)> {
        let start = past.map_or(0, |p| p.len);
        let x_tok = match input {
            StepInput::Tokens(ids) => g.embed(vars.tok_emb, ids)?,
            StepInput::Embedded(v) => v,
        };
        let q = g.value(x_tok).dims2()?.0;
        if start + q > self.config.max_context {
            return Err(Error::Capacity { len: start, max: self.config.max_context });
        }
        let positions: Vec<usize> = (start..start + q).collect();
        let pos = g.embed(vars.pos_emb, &positions)?;
        let mut x = g.add(x_tok, pos)?;

        let (n_heads, dh) = (self.config.n_heads, self.config.d_head());
        let inv_sqrt = S::one() / S::lit(dh as f64).sqrt();
        let mut new_keys = Vec::with_capacity(self.config.n_layers);
        let mut new_values = Vec::with_capacity(self.config.n_layers);
        for (li, lv) in vars.layers.iter().enumerate() {
            let [ln1_g, ln1_b, w_q, b_q, w_k, b_k, w_v, b_v, w_o, b_o, ln2_g, ln2_b, w_fc, b_fc, w_proj, b_proj] = *lv;
            let h = g.layer_norm(x, ln1_g, ln1_b)?;
            let qm = g.matmul(h, w_q)?;
            let qm = g.add_row(qm, b_q)?;
            let km = g.matmul(h, w_k)?;
            let km = g.add_row(km, b_k)?;
            let vm = g.matmul(h, w_v)?;
            let vm = g.add_row(vm, b_v)?;
            let mut heads = Vec::with_capacity(n_heads);
            let mut layer_keys = Vec::with_capacity(n_heads);
            let mut layer_values = Vec::with_capacity(n_heads);
            for hd in 0..n_heads {
                let (c0, c1) = (hd * dh, (hd + 1) * dh);
                let qh = g.slice_cols(qm, c0, c1)?;
                let mut kh = g.slice_cols(km, c0, c1)?;
                let mut vh = g.slice_cols(vm, c0, c1)?;
                if let Some(p) = past {
                    kh = g.concat_rows(&[p.keys[li][hd], kh])?;
                    vh = g.concat_rows(&[p.values[li][hd], vh])?;
                }
                let scores = g.matmul_nt(qh, kh)?;
                let scores = g.scale(scores, inv_sqrt)?;
                let att = g.causal_softmax(scores)?;
                heads.push(g.matmul(att, vh)?);
                layer_keys.push(kh);
                layer_values.push(vh);
            }
            let attn = if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads)? };
            let attn = g.matmul(attn, w_o)?;
            let attn = g.add_row(attn, b_o)?;
            x = g.add(x, attn)?;
            let h = g.layer_norm(x, ln2_g, ln2_b)?;
            let h = g.matmul(h, w_fc)?;
            let h = g.add_row(h, b_fc)?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, w_proj)?;
            let h = g.add_row(h, b_proj)?;
            x = g.add(x, h)?;
            new_keys.push(layer_keys);
            new_values.push(layer_values);
        }
        let o = g.layer_norm(x, vars.lnf_gain, vars.lnf_bias)?;
        Ok((o, PastVars { keys: new_keys, values: new_values, len: start + q }))
    }

    /// `W o + b` for hidden states `o: [q, d_model]`.
    pub fn logits(&self, g: &mut Graph<S>, vars: &LmVars, o: Var) -> Result<Var> {
        let l = g.matmul(o, vars.w_out)?;
        g.add_row(l, vars.b_out)
    }

    /// Reads extended key/value matrices back into a plain [`History`].
    pub fn collect_history(&self, g: &Graph<S>, past: &PastVars) -> History<S> {
        let layers = past
            .keys
            .iter()
            .zip(&past.values)
            .map(|(ks, vs)| {
                let gather = |hs: &[Var]| hs.iter().flat_map(|&h| g.value(h).data().iter().copied()).collect();
                LayerKv { keys: gather(ks), values: gather(vs) }
            })
            .collect();
        History::from_layers(layers, past.len, self.config.n_heads, self.config.d_head())
    }

    /// One recurrent step: consumes `token` after `history`, returning the
    /// hidden state `o_{t+1}` (length `d_model`) and the extended history.
    /// `history` itself is left untouched.
    pub fn lm_step(&self, token: TokenId, history: &History<S>) -> Result<(Tensor<S>, History<S>)> {
        if history.len() >= self.config.max_context {
            return Err(Error::Capacity { len: history.len(), max: self.config.max_context });
        }
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let past = self.bind_history(&mut g, history)?;
        let (o, next) = self.forward(&mut g, &vars, StepInput::Tokens(&[token]), past.as_ref())?;
        let o_t = g.value(o).clone().reshape(vec![self.config.d_model])?;
        Ok((o_t, self.collect_history(&g, &next)))
    }

    /// `Softmax(W o + b)` for one hidden state.
    pub fn logits_to_probs(&self, o: &Tensor<S>) -> Result<Vec<S>> {
        let (d, v) = (self.config.d_model, self.config.vocab_size);
        if o.len() != d {
            return Err(Error::Dimension(format!("hidden state of {} values, d_model is {d}", o.len())));
        }
        let w = self.params.w_out.data();
        let mut logits = self.params.b_out.data().to_vec();
        for (i, &x) in o.data().iter().enumerate() {
            for (l, &wv) in logits.iter_mut().zip(&w[i * v..(i + 1) * v]) {
                *l += x * wv;
            }
        }
        let mut probs = vec![S::zero(); v];
        softmax_slice(&logits, &mut probs);
        Ok(probs)
    }

    /// Final hidden states for every position of `tokens` in one causal pass.
    pub fn forward_outputs(&self, tokens: &[TokenId]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (o, _) = self.forward(&mut g, &vars, StepInput::Tokens(tokens), None)?;
        Ok(g.value(o).clone())
    }

    /// Logits `[T, V]` for every position of `tokens` in one causal pass.
    pub fn forward_logits(&self, tokens: &[TokenId]) -> Result<Tensor<S>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let (o, _) = self.forward(&mut g, &vars, StepInput::Tokens(tokens), None)?;
        let l = self.logits(&mut g, &vars, o)?;
        Ok(g.value(l).clone())
    }

    /// `Σ_{i≥1} log p(x_i | x_<i)` in nats, computed in `f64`.
    pub fn sequence_logprob(&self, tokens: &[TokenId]) -> Result<f64> {
        if tokens.len() < 2 {
            return Err(Error::Contract(format!("sequence_logprob needs at least 2 tokens, got {}", tokens.len())));
        }
        // Sequences longer than the context are scored in overlapping
        // windows; every target is counted once with at least half a
        // context of conditioning.
        let (n, ctx, v) = (tokens.len(), self.config.max_context, self.config.vocab_size);
        let mut total = 0.0;
        let mut scored = 0;
        let mut start = 0;
        loop {
            let end = (start + ctx + 1).min(n);
            let logits = self.forward_logits(&tokens[start..end - 1])?;
            for target in (scored + 1).max(start + 1)..end {
                let i = target - start - 1;
                let row: Vec<f64> = logits.data()[i * v..(i + 1) * v].iter().map(|x| x.as_f64()).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = row.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
                total += row[tokens[target]] - lse;
            }
            scored = end - 1;
            if end == n {
                break;
            }
            start = scored - ctx / 2;
        }
        Ok(total)
    }
}
