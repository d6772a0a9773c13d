//! The calibrated candidate set: parameter-count bins filled by rejection
//! sampling, each represented by its largest-magnitude sub-network.

use std::sync::Arc;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{extract_subnet, SuperNetConfig, SuperNetWeights};
use crate::numerics::Float;
use crate::registry::Registry;
use crate::search::{count_params, SearchSpace, SubNetworkConfig};

/// `‖w_θ‖₁` over every scalar of the sliced weights, adapters merged.
pub fn subnet_magnitude<F: Float>(w: &SuperNetWeights<F>, theta: &SubNetworkConfig) -> Result<f64> {
    let sub = extract_subnet(w, theta)?;
    Ok(sub.named_tensors().iter().map(|(_, t)| t.abs_sum()).sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridEntry {
    pub theta: SubNetworkConfig,
    pub params: u64,
    pub magnitude: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridBin {
    pub lo: f64,
    pub hi: f64,
    pub selected: Option<GridEntry>,
    pub trials: usize,
    pub retained: Vec<GridEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateGrid {
    pub params_min: u64,
    pub params_max: u64,
    pub bins: Vec<GridBin>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub bins: usize,
    pub per_bin: usize,
    pub max_trials: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            bins: 22,
            per_bin: 5,
            max_trials: 10_000,
        }
    }
}

impl CandidateGrid {
    /// Bin holding `params`: half-open `[lo, hi)`, the last bin closed.
    pub fn bin_of(&self, params: u64) -> Option<usize> {
        bin_index(self.params_min, self.params_max, self.bins.len(), params)
    }

    pub fn occupied(&self) -> Vec<&GridEntry> {
        self.bins.iter().filter_map(|b| b.selected.as_ref()).collect()
    }

    /// Bins reachable by at least one member of `space`.
    pub fn feasible_bins(&self, space: &SearchSpace, cfg: &SuperNetConfig) -> Vec<usize> {
        let mut hit = vec![false; self.bins.len()];
        for theta in space.enumerate() {
            if let Some(i) = self.bin_of(count_params(cfg, &theta)) {
                hit[i] = true;
            }
        }
        (0..hit.len()).filter(|&i| hit[i]).collect()
    }

    /// Selected sub-networks that appear in more than one bin.
    pub fn duplicates(&self) -> Vec<SubNetworkConfig> {
        let occ = self.occupied();
        let mut out: Vec<SubNetworkConfig> = Vec::new();
        for (i, a) in occ.iter().enumerate() {
            if occ[..i].iter().any(|b| b.theta == a.theta) && !out.contains(&a.theta) {
                out.push(a.theta);
            }
        }
        out
    }
}

fn bin_index(lo: u64, hi: u64, k: usize, params: u64) -> Option<usize> {
    if params < lo || params > hi {
        return None;
    }
    if hi == lo {
        return Some(0);
    }
    let width = (hi - lo) as f64 / k as f64;
    let i = ((params - lo) as f64 / width).floor() as usize;
    Some(i.min(k - 1))
}

/// Fills `spec.bins` equal-width bins between the smallest and largest
/// sub-network. Each bin draws uniform sub-networks with its own stream
/// until `per_bin` land inside or `max_trials` draws are spent, then keeps
/// the largest-magnitude sample.
pub fn build_grid<F: Float>(
    space: &SearchSpace,
    w: &SuperNetWeights<F>,
    spec: GridSpec,
    seed: u64,
) -> Result<CandidateGrid> {
    if spec.bins < 2 || spec.per_bin < 1 {
        return Err(Error::Config("grid needs at least 2 bins and 1 sample per bin".into()));
    }
    let cfg = &w.cfg;
    space.check(cfg)?;
    let params_min = count_params(cfg, &space.theta_min());
    let params_max = count_params(cfg, &space.theta_max());
    let k = spec.bins;
    let width = (params_max - params_min) as f64 / k as f64;
    let mut bins = Vec::with_capacity(k);
    for i in 0..k {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64 + 1);
        let mut retained = Vec::new();
        let mut trials = 0;
        while retained.len() < spec.per_bin && trials < spec.max_trials {
            trials += 1;
            let theta = space.sample_uniform(&mut rng);
            let params = count_params(cfg, &theta);
            if bin_index(params_min, params_max, k, params) == Some(i) {
                retained.push(GridEntry {
                    theta,
                    params,
                    magnitude: subnet_magnitude(w, &theta)?,
                });
            }
        }
        let selected = retained
            .iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| a.magnitude.total_cmp(&b.magnitude).then(ib.cmp(ia)))
            .map(|(_, e)| e.clone());
        bins.push(GridBin {
            lo: params_min as f64 + i as f64 * width,
            hi: params_min as f64 + (i + 1) as f64 * width,
            selected,
            trials,
            retained,
        });
    }
    let grid = CandidateGrid {
        params_min,
        params_max,
        bins,
    };
    if grid.occupied().is_empty() {
        return Err(Error::Grid("no bin could be filled".into()));
    }
    Ok(grid)
}

/// `k` selected sub-networks: distinct when `k` does not exceed the number
/// of occupied bins, otherwise drawn with replacement.
pub fn draw<R: Rng + ?Sized>(grid: &CandidateGrid, rng: &mut R, k: usize) -> Result<Vec<SubNetworkConfig>> {
    let occ = grid.occupied();
    if occ.is_empty() {
        return Err(Error::Grid("grid has no occupied bin".into()));
    }
    if k <= occ.len() {
        Ok(rand::seq::index::sample(rng, occ.len(), k)
            .iter()
            .map(|i| occ[i].theta)
            .collect())
    } else {
        Ok((0..k).map(|_| occ[rng.random_range(0..occ.len())].theta).collect())
    }
}

/// Chooses the sub-networks trained alongside the full network each step.
pub trait ArchSampler: Send + Sync {
    fn name(&self) -> &'static str;

    fn sample(&self, rng: &mut dyn RngCore, k: usize) -> Result<Vec<SubNetworkConfig>>;
}

pub struct UniformSampler(pub SearchSpace);

impl ArchSampler for UniformSampler {
    fn name(&self) -> &'static str {
        "uniform"
    }

    fn sample(&self, rng: &mut dyn RngCore, k: usize) -> Result<Vec<SubNetworkConfig>> {
        Ok((0..k).map(|_| self.0.sample_uniform(rng)).collect())
    }
}

pub struct GridSampler(pub CandidateGrid);

impl ArchSampler for GridSampler {
    fn name(&self) -> &'static str {
        "grid"
    }

    fn sample(&self, rng: &mut dyn RngCore, k: usize) -> Result<Vec<SubNetworkConfig>> {
        draw(&self.0, rng, k)
    }
}

/// `uniform` over the space, plus `grid` when a grid exists.
pub fn samplers(space: &SearchSpace, grid: Option<&CandidateGrid>) -> Registry<dyn ArchSampler> {
    let mut r: Registry<dyn ArchSampler> = Registry::new("sampler");
    r.register("uniform", Arc::new(UniformSampler(space.clone()))).expect("unique");
    if let Some(g) = grid {
        r.register("grid", Arc::new(GridSampler(g.clone()))).expect("unique");
    }
    r
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_supernet;
    use crate::search::SpaceVariant;

    #[test]
    fn zero_weights_have_zero_magnitude() {
        let cfg = SuperNetConfig::toy();
        let mut w = init_supernet::<f32>(&cfg, 0).unwrap();
        for (_, t) in w.named_tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert_eq!(subnet_magnitude(&w, &SubNetworkConfig::full(&cfg)).unwrap(), 0.0);
    }

    #[test]
    fn full_magnitude_is_total_l1() {
        let cfg = SuperNetConfig::toy();
        let w = init_supernet::<f64>(&cfg, 0).unwrap();
        let total: f64 = w.named_tensors().iter().map(|(_, t)| t.abs_sum()).sum();
        let m = subnet_magnitude(&w, &SubNetworkConfig::full(&cfg)).unwrap();
        assert!((m - total).abs() < 1e-9 * total);
    }

    #[test]
    fn single_member_space_fills_one_bin() {
        let cfg = SuperNetConfig::toy();
        let w = init_supernet::<f32>(&cfg, 0).unwrap();
        let space = SearchSpace {
            variant: SpaceVariant::Joint,
            d_model: vec![32],
            n_heads: vec![2],
            d_head: vec![8],
            ffn_ratio: vec![2.0],
            n_layers: vec![3],
        };
        let spec = GridSpec {
            bins: 4,
            per_bin: 2,
            max_trials: 50,
        };
        let g = build_grid(&space, &w, spec, 1).unwrap();
        let occ = g.occupied();
        assert_eq!(occ.len(), 1);
        assert_eq!(occ[0].theta, space.theta_min());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(draw(&g, &mut rng, 1).unwrap(), vec![space.theta_min()]);
    }

    #[test]
    fn tiny_bin_budget_can_leave_bins_empty_but_not_all() {
        let cfg = SuperNetConfig::toy();
        let w = init_supernet::<f32>(&cfg, 0).unwrap();
        let space = SearchSpace::for_supernet(&cfg, SpaceVariant::Joint).unwrap();
        let spec = GridSpec {
            bins: 22,
            per_bin: 1,
            max_trials: 1,
        };
        match build_grid(&space, &w, spec, 3) {
            Ok(g) => assert!(g.occupied().len() < 22),
            Err(e) => assert!(matches!(e, Error::Grid(_))),
        }
    }

    #[test]
    fn last_bin_is_closed() {
        assert_eq!(bin_index(0, 100, 4, 100), Some(3));
        assert_eq!(bin_index(0, 100, 4, 25), Some(1));
        assert_eq!(bin_index(0, 100, 4, 101), None);
    }
}
