//! AdamW with decoupled weight decay, and global-norm gradient clipping.

use num_traits::Float;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    pub fn set_moments(&mut self, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>, t: u64) {
        self.m = m;
        self.v = v;
        self.t = t;
    }

    /// One update over parallel lists of parameter and gradient tensors. The
    /// tensor list must keep the same shapes between calls.
    pub fn step<T: Float>(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            assert_eq!(p.len(), m.len(), "parameter {i} changed size");
            for j in 0..p.len() {
                let gj = g[j].to_f64().unwrap();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let update = (m[j] / bc1) / ((v[j] / bc2).sqrt() + self.eps);
                let pj = p[j].to_f64().unwrap();
                let next = pj - self.lr * self.weight_decay * pj - self.lr * update;
                p[j] = T::from(next).unwrap();
            }
        }
    }
}

pub fn global_norm<T: Float>(grads: &[&[T]]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|x| {
            let x = x.to_f64().unwrap();
            x * x
        })
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns `(norm_before, norm_after)`.
pub fn clip_grad_norm<T: Float>(grads: &mut [&mut [T]], max_norm: f64) -> (f64, f64) {
    let before = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    if before > max_norm && before.is_finite() {
        let scale = T::from(max_norm / (before + 1e-12)).unwrap();
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x = *x * scale;
            }
        }
    }
    let after = global_norm(&grads.iter().map(|g| &**g).collect::<Vec<_>>());
    (before, after)
}
