//! In-place distillation losses between teacher and student logits.
//!
//! Every loss works row-wise on `[positions × vocab]` logits and averages
//! over positions. The divergence-type losses (KL, reverse KL, JS) compare
//! temperature-scaled softmax distributions; the distance-type losses (L1,
//! L2, cosine) compare raw logits. The teacher is always a constant.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};
use crate::registry::Registry;

/// A distillation loss `D(teacher, student)` with its gradient in the student.
pub trait DistillLoss: Send + Sync {
    fn name(&self) -> &'static str;

    /// Mean loss over `rows` and `d loss / d student` (same layout).
    fn loss_and_grad(
        &self,
        teacher: &[f64],
        student: &[f64],
        rows: usize,
        cols: usize,
        temperature: f64,
    ) -> (f64, Vec<f64>);
}

/// The built-in losses, keyed `forward_kl`, `reverse_kl`, `js`, `l1`, `l2`, `cosine`.
pub fn builtin() -> Registry<dyn DistillLoss> {
    let mut r: Registry<dyn DistillLoss> = Registry::new("distillation loss");
    let all: [Arc<dyn DistillLoss>; 6] = [
        Arc::new(ForwardKl),
        Arc::new(ReverseKl),
        Arc::new(JensenShannon),
        Arc::new(L1Distance),
        Arc::new(L2Distance),
        Arc::new(CosineDistance),
    ];
    for l in all {
        r.register(l.name(), l).expect("unique builtin names");
    }
    r
}

/// Looks up a built-in loss by name.
pub fn by_name(name: &str) -> Result<Arc<dyn DistillLoss>> {
    builtin().get(name)
}

/// Evaluates `kind` on two logit tensors without recording gradients.
pub fn kd_loss<F: Float>(
    kind: &dyn DistillLoss,
    teacher: &Tensor<F>,
    student: &Tensor<F>,
    temperature: f64,
) -> Result<f64> {
    if teacher.shape() != student.shape() {
        return Err(Error::Dimension {
            op: "kd_loss",
            lhs: teacher.shape().to_vec(),
            rhs: student.shape().to_vec(),
        });
    }
    if !teacher.all_finite() || !student.all_finite() {
        return Err(Error::NonFinite(format!("{} logits", kind.name())));
    }
    if !(temperature > 0.0) {
        return Err(Error::Config("distillation temperature must be positive".into()));
    }
    let (rows, cols) = student.as_matrix();
    let t: Vec<f64> = teacher.data().iter().map(|v| v.as_f64()).collect();
    let s: Vec<f64> = student.data().iter().map(|v| v.as_f64()).collect();
    Ok(kind.loss_and_grad(&t, &s, rows, cols, temperature).0)
}

fn log_softmax(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = z.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
    z.iter().map(|&v| v / temperature - lse).collect()
}

fn xlogy_ratio(x: f64, log_x: f64, log_y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (log_x - log_y)
    }
}

/// Per-row loss and gradient driver shared by the implementations.
fn rowwise(
    teacher: &[f64],
    student: &[f64],
    rows: usize,
    cols: usize,
    mut row_fn: impl FnMut(&[f64], &[f64], &mut [f64]) -> f64,
) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; rows * cols];
    let mut total = 0.0;
    for r in 0..rows {
        let span = r * cols..(r + 1) * cols;
        total += row_fn(&teacher[span.clone()], &student[span.clone()], &mut grad[span]);
    }
    let n = rows as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    (total / n, grad)
}

/// `Σ p log(p/q)`, teacher `p`, student `q`.
pub struct ForwardKl;

impl DistillLoss for ForwardKl {
    fn name(&self) -> &'static str {
        "forward_kl"
    }

    fn loss_and_grad(&self, t: &[f64], s: &[f64], rows: usize, cols: usize, temp: f64) -> (f64, Vec<f64>) {
        rowwise(t, s, rows, cols, |t, s, g| {
            let lp = log_softmax(t, temp);
            let lq = log_softmax(s, temp);
            let mut loss = 0.0;
            for j in 0..t.len() {
                let p = lp[j].exp();
                loss += xlogy_ratio(p, lp[j], lq[j]);
                g[j] = (lq[j].exp() - p) / temp;
            }
            loss
        })
    }
}

/// `Σ q log(q/p)`.
pub struct ReverseKl;

impl DistillLoss for ReverseKl {
    fn name(&self) -> &'static str {
        "reverse_kl"
    }

    fn loss_and_grad(&self, t: &[f64], s: &[f64], rows: usize, cols: usize, temp: f64) -> (f64, Vec<f64>) {
        rowwise(t, s, rows, cols, |t, s, g| {
            let lp = log_softmax(t, temp);
            let lq = log_softmax(s, temp);
            let loss: f64 = (0..t.len()).map(|j| xlogy_ratio(lq[j].exp(), lq[j], lp[j])).sum();
            for j in 0..t.len() {
                let q = lq[j].exp();
                g[j] = if q == 0.0 { 0.0 } else { q * (lq[j] - lp[j] - loss) / temp };
            }
            loss
        })
    }
}

/// `½ (Σ p log(2p/(p+q)) + Σ q log(2q/(p+q)))`.
pub struct JensenShannon;

impl DistillLoss for JensenShannon {
    fn name(&self) -> &'static str {
        "js"
    }

    fn loss_and_grad(&self, t: &[f64], s: &[f64], rows: usize, cols: usize, temp: f64) -> (f64, Vec<f64>) {
        rowwise(t, s, rows, cols, |t, s, g| {
            let lp = log_softmax(t, temp);
            let lq = log_softmax(s, temp);
            let mut loss = 0.0;
            // d loss / d q_j = ½ log(2 q_j / (p_j + q_j))
            let mut dq = vec![0.0; t.len()];
            for j in 0..t.len() {
                let (p, q) = (lp[j].exp(), lq[j].exp());
                let lm = ((p + q) / 2.0).ln();
                loss += 0.5 * (xlogy_ratio(p, lp[j], lm) + xlogy_ratio(q, lq[j], lm));
                if q > 0.0 {
                    dq[j] = 0.5 * (lq[j] - lm);
                }
            }
            let mean: f64 = (0..t.len()).map(|j| lq[j].exp() * dq[j]).sum();
            for j in 0..t.len() {
                g[j] = lq[j].exp() * (dq[j] - mean) / temp;
            }
            loss
        })
    }
}

/// `‖t − s‖₁` on raw logits.
pub struct L1Distance;

impl DistillLoss for L1Distance {
    fn name(&self) -> &'static str {
        "l1"
    }

    fn loss_and_grad(&self, t: &[f64], s: &[f64], rows: usize, cols: usize, _temp: f64) -> (f64, Vec<f64>) {
        rowwise(t, s, rows, cols, |t, s, g| {
            let mut loss = 0.0;
            for j in 0..t.len() {
                let d = s[j] - t[j];
                loss += d.abs();
                g[j] = if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                };
            }
            loss
        })
    }
}

/// `‖t − s‖₂` on raw logits.
pub struct L2Distance;

impl DistillLoss for L2Distance {
    fn name(&self) -> &'static str {
        "l2"
    }

    fn loss_and_grad(&self, t: &[f64], s: &[f64], rows: usize, cols: usize, _temp: f64) -> (f64, Vec<f64>) {
        rowwise(t, s, rows, cols, |t, s, g| {
            let norm = t.iter().zip(s).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt();
            if norm > 0.0 {
                for j in 0..t.len() {
                    g[j] = (s[j] - t[j]) / norm;
                }
            }
            norm
        })
    }
}

/// `1 − cos(t, s)` on raw logits.
pub struct CosineDistance;

impl DistillLoss for CosineDistance {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn loss_and_grad(&self, t: &[f64], s: &[f64], rows: usize, cols: usize, _temp: f64) -> (f64, Vec<f64>) {
        const EPS: f64 = 1e-12;
        rowwise(t, s, rows, cols, |t, s, g| {
            let tn = t.iter().map(|v| v * v).sum::<f64>().sqrt();
            let sn = s.iter().map(|v| v * v).sum::<f64>().sqrt();
            if tn < EPS || sn < EPS {
                return 1.0;
            }
            let dot: f64 = t.iter().zip(s).map(|(a, b)| a * b).sum();
            let cos = dot / (tn * sn);
            for j in 0..t.len() {
                g[j] = -(t[j] / (tn * sn) - cos * s[j] / (sn * sn));
            }
            1.0 - cos
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(&[rows, cols], v).unwrap()
    }

    #[test]
    fn forward_kl_matches_hand_summation() {
        // p = (0.5, 0.5), q = (0.25, 0.75)
        let teacher = t(1, 2, &[0.0, 0.0]);
        let student = t(1, 2, &[0.0, 3f64.ln()]);
        let l = kd_loss(&ForwardKl, &teacher, &student, 1.0).unwrap();
        assert!((l - 0.5 * (4.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn identical_logits_give_zero() {
        let x = t(2, 3, &[0.1, -2.0, 1.5, 3.0, 0.0, -1.0]);
        for (name, loss) in builtin().iter() {
            let l = kd_loss(loss.as_ref(), &x, &x, 2.0).unwrap();
            assert!(l.abs() < 1e-12, "{name}: {l}");
        }
    }

    #[test]
    fn non_finite_logits_are_rejected() {
        let a = t(1, 2, &[0.0, f64::NAN]);
        let b = t(1, 2, &[0.0, 0.0]);
        assert!(matches!(kd_loss(&CosineDistance, &a, &b, 1.0), Err(Error::NonFinite(_))));
    }

    #[test]
    fn unknown_name_lists_known_losses() {
        let err = by_name("hinge").err().unwrap().to_string();
        assert!(err.contains("forward_kl") && err.contains("cosine"));
    }
}
