//! Activation-based importance of embedding channels, FFN neurons, KV
//! groups and blocks, the permutations they induce, and the relative
//! perplexity decrease used to judge a sorting.

mod blocks;
mod sort;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::WindowSet;
use crate::error::{contract, Error, Result};
use crate::eval::perplexity;
use crate::model::{forward_traced, SuperNetWeights};
use crate::numerics::{Float, Tensor};
use crate::search::SubNetworkConfig;

pub use blocks::{block_scorers, score_blocks_by_drop, BlockScorer, CosineBlockScorer, DropBlockScorer};
pub use sort::{apply_permutations, apply_sorting, descending_order, PermutationRecord};

/// A reduction over positions or over batch items.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Agg {
    Mean,
    Norm,
    Variance,
}

impl Agg {
    pub const ALL: [Agg; 3] = [Agg::Mean, Agg::Norm, Agg::Variance];

    fn slot(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Agg::Mean => "mean",
            Agg::Norm => "norm",
            Agg::Variance => "variance",
        }
    }

    /// Reduces from `n` values given their sum and sum of squares.
    fn reduce(self, sum: f64, sumsq: f64, n: f64) -> f64 {
        match self {
            Agg::Mean => sum / n,
            Agg::Norm => sumsq.sqrt(),
            Agg::Variance => (sumsq / n - (sum / n).powi(2)).max(0.0),
        }
    }
}

impl FromStr for Agg {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Agg::Mean),
            "norm" | "l2norm" => Ok(Agg::Norm),
            "variance" | "var" => Ok(Agg::Variance),
            _ => Err(Error::Config(format!("unknown aggregation `{s}` (mean, norm, variance)"))),
        }
    }
}

/// `agg_B-agg_S`: reduce over positions first, then over batch items.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AggregationScheme {
    pub batch: Agg,
    pub seq: Agg,
}

impl AggregationScheme {
    pub const MEAN_MEAN: Self = Self {
        batch: Agg::Mean,
        seq: Agg::Mean,
    };

    pub fn all() -> Vec<Self> {
        Agg::ALL
            .iter()
            .flat_map(|&batch| Agg::ALL.iter().map(move |&seq| Self { batch, seq }))
            .collect()
    }
}

impl Default for AggregationScheme {
    fn default() -> Self {
        Self::MEAN_MEAN
    }
}

impl fmt::Display for AggregationScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.batch.name(), self.seq.name())
    }
}

impl FromStr for AggregationScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once('-') {
            Some((b, q)) => Ok(Self {
                batch: b.parse()?,
                seq: q.parse()?,
            }),
            None => {
                let a: Agg = s.parse()?;
                Ok(Self { batch: a, seq: a })
            }
        }
    }
}

/// Running per-channel statistics that serve every aggregation scheme.
///
/// For each batch item and each position reduction (mean and norm over
/// `|a|`, variance over raw `a`) the item-level value `s` is folded into
/// `Σ s` and `Σ s²`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub width: usize,
    pub items: usize,
    sum: [Vec<f64>; 3],
    sumsq: [Vec<f64>; 3],
}

impl ChannelStats {
    pub fn new(width: usize) -> Self {
        Self {
            width,
            items: 0,
            sum: std::array::from_fn(|_| vec![0.0; width]),
            sumsq: std::array::from_fn(|_| vec![0.0; width]),
        }
    }

    /// Folds in one batch item: `t` rows of `width` values.
    pub fn push_item(&mut self, rows: &[f64], t: usize) {
        debug_assert_eq!(rows.len(), t * self.width);
        let n = t as f64;
        for i in 0..self.width {
            let (mut abs, mut sq, mut raw) = (0.0, 0.0, 0.0);
            for r in 0..t {
                let a = rows[r * self.width + i];
                abs += a.abs();
                sq += a * a;
                raw += a;
            }
            let per_seq = [abs / n, sq.sqrt(), (sq / n - (raw / n).powi(2)).max(0.0)];
            for (k, s) in per_seq.into_iter().enumerate() {
                self.sum[k][i] += s;
                self.sumsq[k][i] += s * s;
            }
        }
        self.items += 1;
    }

    pub fn push_trace<F: Float>(&mut self, x: &Tensor<F>, b: usize, t: usize) {
        let data: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
        let w = self.width;
        for item in 0..b {
            self.push_item(&data[item * t * w..(item + 1) * t * w], t);
        }
    }

    pub fn score(&self, scheme: AggregationScheme) -> Vec<f64> {
        let k = scheme.seq.slot();
        let n = self.items as f64;
        (0..self.width)
            .map(|i| scheme.batch.reduce(self.sum[k][i], self.sumsq[k][i], n))
            .collect()
    }
}

/// Everything a traced calibration pass over the full network records.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub samples: usize,
    /// One per RMSNorm site: two per block, then the final norm.
    pub norm_sites: Vec<ChannelStats>,
    pub ffn: Vec<ChannelStats>,
    pub groups: Vec<ChannelStats>,
    /// `Σ cos(X_l, X_{l+1})` over every position, per block.
    pub block_cos_sum: Vec<f64>,
    pub positions: usize,
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return if na == nb { 1.0 } else { 0.0 };
    }
    dot / (na * nb)
}

/// L2 norm of each KV group's slice of the head outputs, per position.
fn group_norms<F: Float>(heads: &Tensor<F>, group_of_head: &[usize], n_groups: usize, d_head: usize) -> Vec<f64> {
    let (rows, cols) = heads.as_matrix();
    let mut out = vec![0.0; rows * n_groups];
    for r in 0..rows {
        for (h, &g) in group_of_head.iter().enumerate() {
            for c in 0..d_head {
                let v = heads.data()[r * cols + h * d_head + c].as_f64();
                out[r * n_groups + g] += v * v;
            }
        }
    }
    out.iter_mut().for_each(|v| *v = v.sqrt());
    out
}

/// Runs traced full-network passes over `calib` and accumulates statistics.
pub fn collect_stats<F: Float>(w: &SuperNetWeights<F>, calib: &WindowSet, batch_size: usize) -> Result<ActivationStats> {
    if calib.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    let cfg = &w.cfg;
    let layers = cfg.n_layers_max;
    let mut stats = ActivationStats {
        samples: 0,
        norm_sites: vec![ChannelStats::new(cfg.d_model_max); 2 * layers + 1],
        ffn: vec![ChannelStats::new(cfg.ffn_hidden_max()); layers],
        groups: vec![ChannelStats::new(cfg.n_groups_max); layers],
        block_cos_sum: vec![0.0; layers],
        positions: 0,
    };
    let theta = SubNetworkConfig::full(cfg);
    for batch in calib.batches(batch_size)? {
        let (_, tr) = forward_traced(w, &theta, &batch.inputs)?;
        let (b, t) = (tr.b, tr.t);
        for (site, x) in stats.norm_sites.iter_mut().zip(&tr.norm_outputs) {
            site.push_trace(x, b, t);
        }
        for (i, &l) in tr.blocks.iter().enumerate() {
            stats.ffn[l].push_trace(&tr.ffn_pre[i], b, t);
            let norms = group_norms(&tr.attn_heads[i], &tr.kv_group_of_head, tr.n_groups, tr.d_head);
            for item in 0..b {
                let g = tr.n_groups;
                stats.groups[l].push_item(&norms[item * t * g..(item + 1) * t * g], t);
            }
            let (xi, xo) = (&tr.block_inputs[i], &tr.block_outputs[i]);
            let d = xi.as_matrix().1;
            let xi: Vec<f64> = xi.data().iter().map(|v| v.as_f64()).collect();
            let xo: Vec<f64> = xo.data().iter().map(|v| v.as_f64()).collect();
            for r in 0..b * t {
                stats.block_cos_sum[l] += cosine(&xi[r * d..(r + 1) * d], &xo[r * d..(r + 1) * d]);
            }
        }
        stats.samples += b;
        stats.positions += b * t;
    }
    Ok(stats)
}

/// Per-component scores; larger means more important.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    pub emb: Vec<f64>,
    pub ffn: Vec<Vec<f64>>,
    pub groups: Vec<Vec<f64>>,
    pub blocks: Vec<f64>,
    pub scheme: AggregationScheme,
    pub block_scheme: String,
    pub samples: usize,
}

/// Cosine block importance `1 − mean cos(X_l, X_{l+1})`.
pub fn block_cosine_scores(stats: &ActivationStats) -> Vec<f64> {
    let n = stats.positions.max(1) as f64;
    stats.block_cos_sum.iter().map(|s| 1.0 - s / n).collect()
}

/// Scores channels, neurons and groups under `scheme`, with cosine block
/// importance. Embedding scores sum over every norm site.
pub fn score_components(stats: &ActivationStats, scheme: AggregationScheme) -> Result<ImportanceScores> {
    if stats.samples == 0 || stats.norm_sites.is_empty() {
        return Err(contract("statistics hold no calibration samples"));
    }
    let layers = stats.ffn.len();
    if stats.groups.len() != layers || stats.block_cos_sum.len() != layers || stats.norm_sites.len() != 2 * layers + 1 {
        return Err(contract("statistics do not match one network's components"));
    }
    let width = stats.norm_sites[0].width;
    let mut emb = vec![0.0; width];
    for site in &stats.norm_sites {
        if site.width != width {
            return Err(contract("norm sites disagree on width"));
        }
        for (e, s) in emb.iter_mut().zip(site.score(scheme)) {
            *e += s;
        }
    }
    let scores = ImportanceScores {
        emb,
        ffn: stats.ffn.iter().map(|s| s.score(scheme)).collect(),
        groups: stats.groups.iter().map(|s| s.score(scheme)).collect(),
        blocks: block_cosine_scores(stats),
        scheme,
        block_scheme: "cosine".into(),
        samples: stats.samples,
    };
    if !scores.emb.iter().chain(scores.ffn.iter().flatten()).chain(scores.groups.iter().flatten()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite("importance scores".into()));
    }
    Ok(scores)
}

/// Per-θ relative perplexity decrease and its summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpdReport {
    pub terms: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

/// Summarizes `(PPL_before − PPL_after) / PPL_before` per θ.
pub fn rpd_from_perplexities(before: &[f64], after: &[f64]) -> Result<RpdReport> {
    if before.is_empty() || before.len() != after.len() {
        return Err(Error::Input("relative perplexity decrease needs matching non-empty lists".into()));
    }
    let terms: Vec<f64> = before.iter().zip(after).map(|(b, a)| (b - a) / b).collect();
    let mean = terms.iter().sum::<f64>() / terms.len() as f64;
    let mut sorted = terms.clone();
    sorted.sort_by(f64::total_cmp);
    let m = sorted.len();
    let median = if m % 2 == 1 {
        sorted[m / 2]
    } else {
        0.5 * (sorted[m / 2 - 1] + sorted[m / 2])
    };
    Ok(RpdReport { terms, mean, median })
}

/// Relative perplexity decrease from `before` to `after` over `thetas`.
pub fn compute_rpd<F: Float>(
    before: &SuperNetWeights<F>,
    after: &SuperNetWeights<F>,
    thetas: &[SubNetworkConfig],
    evalset: &WindowSet,
    batch_size: usize,
) -> Result<RpdReport> {
    if thetas.is_empty() {
        return Err(Error::Input("relative perplexity decrease needs at least one sub-network".into()));
    }
    let mut pb = Vec::with_capacity(thetas.len());
    let mut pa = Vec::with_capacity(thetas.len());
    for theta in thetas {
        pb.push(perplexity(before, theta, evalset, batch_size)?);
        pa.push(perplexity(after, theta, evalset, batch_size)?);
    }
    rpd_from_perplexities(&pb, &pa)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_supernet, SuperNetConfig};

    fn calib(n: usize) -> WindowSet {
        let text: Vec<u8> = (0..n * 16 + 1).map(|i| ((i * 37 + i / 5) % 251) as u8).collect();
        WindowSet::new(&text, 16).unwrap()
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in AggregationScheme::all() {
            assert_eq!(s.to_string().parse::<AggregationScheme>().unwrap(), s);
        }
        assert_eq!("mean".parse::<AggregationScheme>().unwrap(), AggregationScheme::MEAN_MEAN);
        assert!("max-mean".parse::<AggregationScheme>().is_err());
    }

    #[test]
    fn zero_weights_give_zero_ffn_stats() {
        let cfg = SuperNetConfig::toy();
        let mut w = init_supernet::<f64>(&cfg, 1).unwrap();
        for b in &mut w.blocks {
            b.w_gate.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let stats = collect_stats(&w, &calib(4), 2).unwrap();
        let s = score_components(&stats, AggregationScheme::MEAN_MEAN).unwrap();
        assert!(s.ffn.iter().flatten().all(|&v| v == 0.0));
    }

    #[test]
    fn mean_stats_do_not_depend_on_batching() {
        let w = init_supernet::<f64>(&SuperNetConfig::toy(), 1).unwrap();
        let set = calib(8);
        let a = score_components(&collect_stats(&w, &set, 8).unwrap(), AggregationScheme::MEAN_MEAN).unwrap();
        let b = score_components(&collect_stats(&w, &set, 4).unwrap(), AggregationScheme::MEAN_MEAN).unwrap();
        for (x, y) in a.emb.iter().zip(&b.emb) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.ffn.iter().flatten().zip(b.ffn.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn every_scheme_gives_finite_scores() {
        let w = init_supernet::<f32>(&SuperNetConfig::toy(), 3).unwrap();
        let stats = collect_stats(&w, &calib(4), 4).unwrap();
        for scheme in AggregationScheme::all() {
            let s = score_components(&stats, scheme).unwrap();
            assert_eq!(s.emb.len(), 64);
            assert_eq!(s.ffn[0].len(), 224);
            assert_eq!(s.groups[0].len(), 2);
        }
    }

    #[test]
    fn empty_calibration_is_an_input_error() {
        let w = init_supernet::<f32>(&SuperNetConfig::toy(), 3).unwrap();
        let empty = WindowSet {
            seq: 16,
            windows: vec![],
        };
        assert!(matches!(collect_stats(&w, &empty, 4), Err(Error::Input(_))));
    }

    #[test]
    fn rpd_formula_cases() {
        assert_eq!(rpd_from_perplexities(&[100.0], &[50.0]).unwrap().mean, 0.5);
        assert_eq!(rpd_from_perplexities(&[7.0, 9.0], &[7.0, 9.0]).unwrap().mean, 0.0);
        let r = rpd_from_perplexities(&[10.0, 20.0, 40.0], &[5.0, 25.0, 30.0]).unwrap();
        let want = (0.5 + (-0.25) + 0.25) / 3.0;
        assert!((r.mean - want).abs() < 1e-15);
        assert_eq!(r.median, 0.25);
        assert!(rpd_from_perplexities(&[], &[]).is_err());
    }

    #[test]
    fn identity_block_scores_zero() {
        let cfg = SuperNetConfig::toy();
        let mut w = init_supernet::<f64>(&cfg, 1).unwrap();
        w.blocks[2].w_proj.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.blocks[2].w_down.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let stats = collect_stats(&w, &calib(2), 2).unwrap();
        let s = block_cosine_scores(&stats);
        assert!(s[2].abs() < 1e-12);
        assert!(s[0] > 1e-6);
    }
}
