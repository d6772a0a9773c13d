//! Perplexity, wall-clock latency and Pareto filtering.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::model::{forward, lm_loss, SuperNetWeights, TokenBatch};
use crate::numerics::Float;
use crate::search::SubNetworkConfig;

/// Mean next-token cross-entropy over every position of `set`.
pub fn eval_loss<F: Float>(
    w: &SuperNetWeights<F>,
    theta: &SubNetworkConfig,
    set: &WindowSet,
    batch_size: usize,
) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Input("evaluation set is empty".into()));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for b in set.batches(batch_size)? {
        let logits = forward(w, theta, &b.inputs)?;
        let n = b.targets.len();
        total += lm_loss(&logits, &b.targets)? * n as f64;
        count += n;
    }
    Ok(total / count as f64)
}

/// `exp` of [`eval_loss`].
pub fn perplexity<F: Float>(
    w: &SuperNetWeights<F>,
    theta: &SubNetworkConfig,
    set: &WindowSet,
    batch_size: usize,
) -> Result<f64> {
    Ok(eval_loss(w, theta, set, batch_size)?.exp())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub median_ms: f64,
    pub p10_ms: f64,
    pub p90_ms: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Times batch-1 prefill of `seq` tokens through a materialized network.
pub fn measure_latency<F: Float>(w: &SuperNetWeights<F>, seq: usize, reps: usize, warmup: usize) -> Result<LatencyStats> {
    if reps < 3 {
        return Err(Error::Config("latency needs at least 3 repetitions".into()));
    }
    let theta = SubNetworkConfig::full(&w.cfg);
    let tokens = (0..seq).map(|i| (i * 31 % w.cfg.vocab_size) as u32).collect();
    let batch = TokenBatch::new(1, seq, tokens)?;
    for _ in 0..warmup {
        forward(w, &theta, &batch)?;
    }
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        let out = forward(w, &theta, &batch)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(out);
    }
    times.sort_by(f64::total_cmp);
    Ok(LatencyStats {
        median_ms: quantile(&times, 0.5),
        p10_ms: quantile(&times, 0.1),
        p90_ms: quantile(&times, 0.9),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub theta: SubNetworkConfig,
    /// Lower is better.
    pub quality: f64,
    /// Lower is better.
    pub cost: f64,
    pub source: String,
}

pub fn dominates(p: &ParetoPoint, q: &ParetoPoint) -> bool {
    p.quality <= q.quality && p.cost <= q.cost && (p.quality < q.quality || p.cost < q.cost)
}

/// Non-dominated points sorted by cost, then quality. Exact duplicates of a
/// non-dominated point are all kept.
pub fn pareto_front(points: &[ParetoPoint]) -> Vec<ParetoPoint> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        points[a]
            .cost
            .total_cmp(&points[b].cost)
            .then(points[a].quality.total_cmp(&points[b].quality))
            .then(a.cmp(&b))
    });
    // sweep by cost: a point survives iff its quality beats every cheaper point
    // and ties in cost are resolved by quality
    let mut out: Vec<ParetoPoint> = Vec::new();
    let mut best = f64::INFINITY;
    let mut i = 0;
    while i < order.len() {
        let cost = points[order[i]].cost;
        let mut j = i;
        while j < order.len() && points[order[j]].cost == cost {
            j += 1;
        }
        let q_min = points[order[i]].quality;
        if q_min < best {
            for &k in &order[i..j] {
                if points[k].quality == q_min {
                    out.push(points[k].clone());
                }
            }
            best = q_min;
        }
        i = j;
    }
    out
}
