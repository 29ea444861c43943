use std::collections::BTreeMap;

use super::graph::Gradients;
use super::params::{ParamId, ParamStore};
use super::tensor::{Scalar, Tensor};

/// Adam with optional global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    step: u64,
    moments: BTreeMap<ParamId, (Tensor<T>, Tensor<T>)>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Apply one update to every parameter that has a gradient. Returns the
    /// pre-clipping global gradient norm.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        self.step += 1;
        let norm = grads
            .params()
            .flat_map(|(_, g)| g.data().iter().map(|v| v.to_f64().unwrap().powi(2)))
            .sum::<f64>()
            .sqrt();
        let clip = match self.clip_norm {
            Some(c) if norm > c && norm.is_finite() => c / norm,
            _ => 1.0,
        };
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let step_size = self.lr * bc2.sqrt() / bc1;
        for (id, g) in grads.params() {
            let (m, v) = self
                .moments
                .entry(id)
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            let w = store.value_mut(id);
            for (((wv, mv), vv), &gv) in w
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gv = gv.to_f64().unwrap() * clip;
                let mn = b1 * mv.to_f64().unwrap() + (1.0 - b1) * gv;
                let vn = b2 * vv.to_f64().unwrap() + (1.0 - b2) * gv * gv;
                *mv = T::from_f64_lossy(mn);
                *vv = T::from_f64_lossy(vn);
                let upd = step_size * mn / (vn.sqrt() + self.eps);
                *wv = T::from_f64_lossy(wv.to_f64().unwrap() - upd);
            }
        }
        norm
    }
}
