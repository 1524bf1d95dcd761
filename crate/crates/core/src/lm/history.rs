use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One layer's cached keys and values, each laid out `[heads, t, d_head]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<S> {
    pub keys: Vec<S>,
    pub values: Vec<S>,
}

/// The key/value history of every layer. All layers share one length.
#[derive(Clone, Debug, PartialEq)]
pub struct History<S> {
    layers: Vec<LayerKv<S>>,
    len: usize,
    n_heads: usize,
    d_head: usize,
}

impl<S: Scalar> History<S> {
    pub fn empty(n_layers: usize, n_heads: usize, d_head: usize) -> Self {
        let layers = (0..n_layers).map(|_| LayerKv { keys: Vec::new(), values: Vec::new() }).collect();
        Self { layers, len: 0, n_heads, d_head }
    }

    pub(crate) fn from_layers(layers: Vec<LayerKv<S>>, len: usize, n_heads: usize, d_head: usize) -> Self {
        debug_assert!(layers.iter().all(|l| l.keys.len() == n_heads * len * d_head));
        Self { layers, len, n_heads, d_head }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_heads(&self) -> usize {
        self.n_heads
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn layers(&self) -> &[LayerKv<S>] {
        &self.layers
    }

    /// Shape of every key or value tensor: `[heads, t, d_head]`.
    pub fn tensor_shape(&self) -> [usize; 3] {
        [self.n_heads, self.len, self.d_head]
    }

    pub fn key_tensor(&self, layer: usize) -> Result<Tensor<S>> {
        Tensor::new(self.tensor_shape().to_vec(), self.layers[layer].keys.clone())
    }

    pub fn value_tensor(&self, layer: usize) -> Result<Tensor<S>> {
        Tensor::new(self.tensor_shape().to_vec(), self.layers[layer].values.clone())
    }

    /// `self + delta`, where `delta` holds one `(key, value)` pair of flat
    /// `[heads, t, d_head]` buffers per layer. Shapes never change.
    pub fn perturbed(&self, delta: &[(Vec<S>, Vec<S>)]) -> Result<Self> {
        if delta.len() != self.layers.len() {
            return Err(Error::Dimension(format!(
                "delta covers {} layers, history has {}",
                delta.len(),
                self.layers.len()
            )));
        }
        let mut out = self.clone();
        for (layer, (dk, dv)) in out.layers.iter_mut().zip(delta) {
            if dk.len() != layer.keys.len() || dv.len() != layer.values.len() {
                return Err(Error::Dimension("delta shape differs from history".into()));
            }
            layer.keys.iter_mut().zip(dk).for_each(|(a, &b)| *a += b);
            layer.values.iter_mut().zip(dv).for_each(|(a, &b)| *a += b);
        }
        Ok(out)
    }

    pub fn cast<T: Scalar>(&self) -> History<T> {
        let conv = |v: &[S]| v.iter().map(|x| T::lit(x.as_f64())).collect();
        History {
            layers: self.layers.iter().map(|l| LayerKv { keys: conv(&l.keys), values: conv(&l.values) }).collect(),
            len: self.len,
            n_heads: self.n_heads,
            d_head: self.d_head,
        }
    }
}
