use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::numerics::{Float, Tensor};

/// Cosine annealing from `base` at step 0 to `last` at step `total − 1`.
pub fn cosine_lr(base: f64, last: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return base;
    }
    let frac = step.min(total - 1) as f64 / (total - 1) as f64;
    last + 0.5 * (base - last) * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Scales every gradient so the global L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm<F: Float>(grads: &mut [Tensor<F>], max_norm: f64) -> f64 {
    let sq: f64 = grads
        .iter()
        .flat_map(|g| g.data().iter())
        .map(|v| v.as_f64() * v.as_f64())
        .sum();
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam without weight decay, with bias correction. Moments are keyed by
/// tensor name and created on first use.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam<F> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub steps: u64,
    pub moments: BTreeMap<String, (Tensor<F>, Tensor<F>)>,
}

impl<F: Float> Adam<F> {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            steps: 0,
            moments: BTreeMap::new(),
        }
    }

    /// One update of every `(name, param, grad)` triple.
    pub fn step<'a>(&mut self, lr: f64, updates: impl IntoIterator<Item = (&'a str, &'a mut Tensor<F>, &'a Tensor<F>)>) {
        self.steps += 1;
        let t = self.steps as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::from_f64_lossy(self.beta1), F::from_f64_lossy(self.beta2));
        let (one_b1, one_b2) = (F::one() - b1, F::one() - b2);
        let (lr_f, eps) = (F::from_f64_lossy(lr), F::from_f64_lossy(self.eps));
        let (c1, c2) = (F::from_f64_lossy(c1), F::from_f64_lossy(c2));
        for (name, p, g) in updates {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let mhat = *mv / c1;
                let vhat = *vv / c2;
                *pv -= lr_f * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        assert!((cosine_lr(2e-4, 6e-5, 0, 100) - 2e-4).abs() < 1e-18);
        assert!((cosine_lr(2e-4, 6e-5, 99, 100) - 6e-5).abs() < 1e-18);
        let mid = cosine_lr(1.0, 0.0, 50, 101);
        assert!((mid - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut p = Tensor::<f32>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let g = Tensor::zeros(&[3]);
        let mut adam = Adam::new(0.9, 0.95, 1e-8);
        for _ in 0..5 {
            adam.step(1e-2, [("p", &mut p, &g)]);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = Tensor::<f64>::from_f64(&[2], &[0.0, 0.0]).unwrap();
        let g = Tensor::from_f64(&[2], &[3.0, -0.1]).unwrap();
        let mut adam = Adam::new(0.9, 0.95, 1e-8);
        adam.step(0.1, [("p", &mut p, &g)]);
        assert!((p.data()[0] + 0.1).abs() < 1e-7);
        assert!((p.data()[1] - 0.1).abs() < 1e-6);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut g = vec![
            Tensor::<f64>::from_f64(&[2], &[3.0, 0.0]).unwrap(),
            Tensor::from_f64(&[1], &[4.0]).unwrap(),
        ];
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g[0].data()[0] - 0.6).abs() < 1e-12);
        assert!((g[1].data()[0] - 0.8).abs() < 1e-12);
    }
}
