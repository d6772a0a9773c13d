use std::sync::Arc;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{bind_weights, forward, forward_on_tape, lm_loss, ForwardOptions, SuperNetWeights, TokenBatch, Trainable};
use crate::error::Result;
use crate::numerics::{GradCheckReport, Tape};
use crate::search::SubNetworkConfig;

/// Relative error below which pairs are not compared; both sides are then
/// treated as agreeing zeros.
pub const GRAD_FLOOR: f64 = 1e-9;

/// Compares tape gradients of the LM loss of `theta` with central
/// differences (step `h`) at up to `per_tensor` random coordinates of every
/// base tensor. Relative error is `|a − n| / max(|a|, |n|)`.
pub fn check_lm_gradients(
    w: &SuperNetWeights<f64>,
    theta: &SubNetworkConfig,
    batch: &TokenBatch,
    targets: &[usize],
    per_tensor: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let bound = bind_weights(&mut tape, w, Trainable::Base);
    let (logits, _) = forward_on_tape(&mut tape, w, &bound, theta, batch, &mut ForwardOptions::default())?;
    let loss = tape.cross_entropy(logits, Arc::from(targets))?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<_> = bound
        .named_vars()
        .iter()
        .filter(|(name, _)| !name.starts_with("lora."))
        .map(|(_, v)| grads.wrt(*v))
        .collect();
    drop(tape);

    let eval = |w: &SuperNetWeights<f64>| -> Result<f64> { lm_loss(&forward(w, theta, batch)?, targets) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = w.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
        checked: 0,
    };
    for (ti, g) in analytic.iter().enumerate() {
        let n = g.numel();
        for ei in sample(&mut rng, n, per_tensor.min(n)).iter() {
            let x0 = work.named_tensors()[ti].1.data()[ei];
            let set = |work: &mut SuperNetWeights<f64>, v: f64| {
                work.named_tensors_mut()[ti].1.data_mut()[ei] = v;
            };
            set(&mut work, x0 + h);
            let fp = eval(&work)?;
            set(&mut work, x0 - h);
            let fm = eval(&work)?;
            set(&mut work, x0);
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite.get_or_insert((ti, ei));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = g.data()[ei];
            let scale = a.abs().max(numeric.abs());
            report.checked += 1;
            if scale < GRAD_FLOOR {
                continue;
            }
            let rel = (a - numeric).abs() / scale;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((ti, ei));
            }
        }
    }
    Ok(report)
}
