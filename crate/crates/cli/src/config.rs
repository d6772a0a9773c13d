use std::path::{Path, PathBuf};

use nasprune::grid::GridSpec;
use nasprune::model::SuperNetConfig;
use nasprune::search::{SearchSpace, SpaceVariant};
use nasprune::train::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Everything a pipeline run reads from its config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Architecture sampler of the sandwich steps: `grid` or `uniform`.
    pub sampler: String,
    pub model: SuperNetConfig,
    pub space: SpaceConfig,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub sort: SortConfig,
    pub grid: GridSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            sampler: "grid".into(),
            model: SuperNetConfig::toy(),
            space: SpaceConfig::default(),
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            sort: SortConfig::default(),
            grid: GridSpec::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// A named variant, optionally with explicit choice lists.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceConfig {
    pub variant: SpaceVariant,
    pub d_model: Option<Vec<usize>>,
    pub n_heads: Option<Vec<usize>>,
    pub d_head: Option<Vec<usize>>,
    pub ffn_ratio: Option<Vec<f64>>,
    pub n_layers: Option<Vec<usize>>,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        Self {
            variant: SpaceVariant::Joint,
            d_model: None,
            n_heads: None,
            d_head: None,
            ffn_ratio: None,
            n_layers: None,
        }
    }
}

impl SpaceConfig {
    pub fn build(&self, cfg: &SuperNetConfig) -> CliResult<SearchSpace> {
        let mut s = SearchSpace::for_supernet(cfg, self.variant)?;
        if let Some(v) = &self.d_model {
            s.d_model = v.clone();
        }
        if let Some(v) = &self.n_heads {
            s.n_heads = v.clone();
        }
        if let Some(v) = &self.d_head {
            s.d_head = v.clone();
        }
        if let Some(v) = &self.ffn_ratio {
            s.ffn_ratio = v.clone();
        }
        if let Some(v) = &self.n_layers {
            s.n_layers = v.clone();
        }
        s.check(cfg)?;
        Ok(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub corpus: PathBuf,
    /// Trailing share of the corpus held out for evaluation.
    pub valid_fraction: f64,
    pub calib_samples: usize,
    /// Sub-networks sampled to measure the effect of sorting.
    pub rpd_thetas: usize,
    pub rpd_windows: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("data/kjv-genesis-to-numbers.txt"),
            valid_fraction: 0.1,
            calib_samples: 256,
            rpd_thetas: 50,
            rpd_windows: 64,
        }
    }
}

/// Full-weight language-model training run by `init` before anything else.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub batch_size: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 0,
            lr: 3e-3,
            final_lr: 3e-4,
            batch_size: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SortConfig {
    pub scheme: String,
    pub block_scheme: String,
}

impl Default for SortConfig {
    fn default() -> Self {
        Self {
            scheme: "mean-mean".into(),
            block_scheme: "cosine".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Caps the number of validation windows; `None` uses all of them.
    pub windows: Option<usize>,
    pub batch_size: usize,
    pub latency_reps: usize,
    pub latency_warmup: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            windows: None,
            batch_size: 16,
            latency_reps: 10,
            latency_warmup: 2,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> CliResult<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Ok(toml::from_str(&text)?)
    }

    /// Resolves the corpus path against the config file's directory when relative.
    pub fn corpus_path(&self, config: Option<&Path>) -> PathBuf {
        let c = &self.data.corpus;
        if c.is_absolute() || c.exists() {
            return c.clone();
        }
        match config.and_then(Path::parent) {
            Some(dir) => dir.join(c),
            None => c.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_toy_config_matches_the_toy_network() {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let c = RunConfig::load(Some(&p)).unwrap();
        assert_eq!(c.model, SuperNetConfig::toy());
        assert_eq!(c.grid, GridSpec::default());
        assert!(c.corpus_path(Some(&p)).exists());
        c.train.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let e = toml::from_str::<RunConfig>("[data]\ncorpus_file = \"x\"\n").unwrap_err();
        assert!(e.to_string().contains("corpus_file"));
    }

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(toml::from_str::<RunConfig>("").unwrap(), RunConfig::default());
    }
}
