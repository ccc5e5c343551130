//! Adam with global-norm gradient clipping.

use crate::error::{Error, Result};
use crate::numerics::param::ParamSet;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    /// First and second moments, one array per parameter in set order.
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
}

impl AdamState {
    pub fn new(ps: &ParamSet, lr: f64, beta1: f64, beta2: f64, eps: f64, clip_norm: f64) -> Self {
        let zeros: Vec<Vec<f64>> = ps.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1,
            beta2,
            eps,
            clip_norm,
        }
    }

    /// Applies one update from the gradients stored in `ps` and returns the
    /// gradient norm before clipping. Frozen parameters are left alone.
    pub fn step(&mut self, ps: &mut ParamSet) -> Result<f64> {
        if self.m.len() != ps.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors, model has {}",
                self.m.len(),
                ps.len()
            )));
        }
        let norm = ps.grad_sq_norm().sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let scale = if norm > self.clip_norm {
            self.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, p) in ps.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for ((w, &g), (mj, vj)) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(p.grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                let g = g * scale;
                *mj = self.beta1 * *mj + (1.0 - self.beta1) * g;
                *vj = self.beta2 * *vj + (1.0 - self.beta2) * g * g;
                let mh = *mj / bc1;
                let vh = *vj / bc2;
                *w -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
        Ok(norm)
    }
}
