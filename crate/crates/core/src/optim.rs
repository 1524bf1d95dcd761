//! Adam with bias correction and optional global-norm gradient clipping.

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

pub struct Adam<S> {
    cfg: AdamConfig,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
    t: i32,
}

impl<S: Scalar> Adam<S> {
    /// One moment buffer per parameter tensor of the given lengths.
    pub fn new(cfg: AdamConfig, sizes: impl IntoIterator<Item = usize>) -> Self {
        let m: Vec<Vec<S>> = sizes.into_iter().map(|n| vec![S::zero(); n]).collect();
        Self { cfg, v: m.clone(), m, t: 0 }
    }

    /// Applies one update; `params[i]` and `grads[i]` pair up with the
    /// `i`-th size given to [`Adam::new`].
    pub fn step(&mut self, params: Vec<&mut [S]>, grads: &[&[S]]) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed");
        self.t += 1;
        let c = self.cfg;
        let norm = grads.iter().flat_map(|g| g.iter()).map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        let clip = if c.clip_norm > 0.0 && norm > c.clip_norm { c.clip_norm / norm } else { 1.0 };
        let step = S::lit(c.lr / (1.0 - c.beta1.powi(self.t)));
        let inv_bc2 = S::lit(1.0 / (1.0 - c.beta2.powi(self.t)));
        let (b1, b2, eps, clip) = (S::lit(c.beta1), S::lit(c.beta2), S::lit(c.eps), S::lit(clip));
        for (((w, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in w.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi * clip;
                *mi = b1 * *mi + (S::one() - b1) * gi;
                *vi = b2 * *vi + (S::one() - b2) * gi * gi;
                *w -= step * *mi / ((*vi * inv_bc2).sqrt() + eps);
            }
        }
    }
}
