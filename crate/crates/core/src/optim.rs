//! AdamW with decoupled weight decay.

use alloc::vec::Vec;

use crate::model::{Gradients, Model, ParamSpec};
use crate::tensor::{Float, Matrix};

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global L2 norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamW<F: Float> {
    pub config: AdamWConfig,
    m: Vec<Matrix<F>>,
    v: Vec<Matrix<F>>,
    decays: Vec<bool>,
    step: u64,
}

/// Global L2 norm of a gradient set.
pub fn grad_norm<F: Float>(g: &Gradients<F>) -> f64 {
    let sq: f64 = g
        .grads
        .iter()
        .flat_map(|m| m.data().iter())
        .map(|v| {
            let x = v.as_f64();
            x * x
        })
        .sum();
    num_traits::Float::sqrt(sq)
}

impl<F: Float> AdamW<F> {
    pub fn new(config: AdamWConfig, specs: &[ParamSpec]) -> Self {
        let shapes: Vec<(usize, usize)> = specs.iter().map(|s| s.shape).collect();
        let decays: Vec<bool> = specs.iter().map(|s| s.kind.decays()).collect();
        Self::with_shapes(config, &shapes, &decays)
    }

    /// Optimizer over arbitrary parameter matrices; `decays[i]` enables weight decay for tensor `i`.
    pub fn with_shapes(config: AdamWConfig, shapes: &[(usize, usize)], decays: &[bool]) -> Self {
        assert_eq!(shapes.len(), decays.len());
        AdamW {
            config,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            decays: decays.to_vec(),
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update. Returns the pre-clip gradient norm.
    pub fn update(&mut self, model: &mut Model<F>, grads: &Gradients<F>) -> f64 {
        self.update_params(model.params_mut(), grads)
    }

    /// # Panics
    /// If `params` or `grads` do not match the shapes given at construction.
    pub fn update_params(&mut self, params: &mut [Matrix<F>], grads: &Gradients<F>) -> f64 {
        assert_eq!(params.len(), self.m.len(), "parameter count mismatch");
        assert_eq!(grads.grads.len(), self.m.len(), "gradient count mismatch");
        let c = &self.config;
        let norm = grad_norm(grads);
        let clip = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - num_traits::Float::powi(c.beta1, t);
        let bc2 = 1.0 - num_traits::Float::powi(c.beta2, t);
        let (b1, b2) = (F::of(c.beta1), F::of(c.beta2));
        let (one_b1, one_b2) = (F::of(1.0 - c.beta1), F::of(1.0 - c.beta2));
        let step_size = F::of(c.lr / bc1);
        let inv_bc2 = F::of(1.0 / bc2);
        let eps = F::of(c.eps);
        let decay = F::of(c.lr * c.weight_decay);
        let clip = F::of(clip);
        for (i, p) in params.iter_mut().enumerate() {
            assert_eq!(p.shape(), self.m[i].shape(), "shape mismatch");
            assert_eq!(grads.grads[i].shape(), self.m[i].shape(), "shape mismatch");
            let g = grads.grads[i].data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let decays = self.decays[i] && c.weight_decay != 0.0;
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                let gj = g[j] * clip;
                m[j] = b1 * m[j] + one_b1 * gj;
                v[j] = b2 * v[j] + one_b2 * gj * gj;
                if decays {
                    *w -= decay * *w;
                }
                *w -= step_size * m[j] / ((v[j] * inv_bc2).sqrt() + eps);
            }
        }
        norm
    }
}
