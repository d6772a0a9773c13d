//! The factorized search space, sub-network validity, and cost accounting.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SuperNetConfig;

/// One sub-network `[d_model, n_heads, d_head, ffn_ratio, n_layers]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubNetworkConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub ffn_ratio: f64,
    pub n_layers: usize,
}

impl SubNetworkConfig {
    pub fn new(d_model: usize, n_heads: usize, d_head: usize, ffn_ratio: f64, n_layers: usize) -> Self {
        Self {
            d_model,
            n_heads,
            d_head,
            ffn_ratio,
            n_layers,
        }
    }

    /// The sub-network equal to the whole super-network.
    pub fn full(cfg: &SuperNetConfig) -> Self {
        Self::new(
            cfg.d_model_max,
            cfg.n_heads_max,
            cfg.d_head_max,
            cfg.ffn_ratio_max,
            cfg.n_layers_max,
        )
    }

    /// KV groups kept: `n_heads · G / H`.
    pub fn n_groups(&self, cfg: &SuperNetConfig) -> usize {
        self.n_heads * cfg.n_groups_max / cfg.n_heads_max
    }

    pub fn ffn_hidden(&self, cfg: &SuperNetConfig) -> usize {
        cfg.ffn_hidden(self.d_model, self.ffn_ratio)
    }

    /// Checks the sub-network fits inside `cfg` with whole KV groups.
    pub fn check_fits(&self, cfg: &SuperNetConfig) -> Result<()> {
        let ok = self.d_model >= 1
            && self.d_model <= cfg.d_model_max
            && self.n_heads >= 1
            && self.n_heads <= cfg.n_heads_max
            && (self.n_heads * cfg.n_groups_max) % cfg.n_heads_max == 0
            && self.d_head >= 1
            && self.d_head <= cfg.d_head_max
            && self.n_layers >= 1
            && self.n_layers <= cfg.n_layers_max
            && self.ffn_ratio > 0.0
            && self.ffn_hidden(cfg) >= 1
            && self.ffn_hidden(cfg) <= cfg.ffn_hidden_max();
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("sub-network {self} does not fit the super-network")))
        }
    }

    /// Field-wise `≤`.
    pub fn nested_in(&self, other: &Self) -> bool {
        self.d_model <= other.d_model
            && self.n_heads <= other.n_heads
            && self.d_head <= other.d_head
            && self.ffn_ratio <= other.ffn_ratio
            && self.n_layers <= other.n_layers
    }
}

impl fmt::Display for SubNetworkConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}, {}, {}, {}, {}]",
            self.d_model, self.n_heads, self.d_head, self.ffn_ratio, self.n_layers
        )
    }
}

impl FromStr for SubNetworkConfig {
    type Err = Error;

    /// Parses `d_model,n_heads,d_head,ffn_ratio,n_layers`, brackets optional.
    fn from_str(s: &str) -> Result<Self> {
        let inner = s.trim().trim_start_matches('[').trim_end_matches(']');
        let parts: Vec<&str> = inner.split(',').map(str::trim).collect();
        let bad = || Error::Input(format!("cannot parse sub-network `{s}`: expected d_model,n_heads,d_head,ffn_ratio,n_layers"));
        if parts.len() != 5 {
            return Err(bad());
        }
        let int = |p: &str| p.parse::<usize>().map_err(|_| bad());
        Ok(Self::new(
            int(parts[0])?,
            int(parts[1])?,
            int(parts[2])?,
            parts[3].parse::<f64>().map_err(|_| bad())?,
            int(parts[4])?,
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceVariant {
    Joint,
    FixedHead,
    FixedHeadSize,
}

impl FromStr for SpaceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(Self::Joint),
            "fixed_head" | "fixed-head" => Ok(Self::FixedHead),
            "fixed_head_size" | "fixed-head-size" => Ok(Self::FixedHeadSize),
            _ => Err(Error::Config(format!(
                "unknown search-space variant `{s}` (joint, fixed_head, fixed_head_size)"
            ))),
        }
    }
}

/// A factorized grid of choices, one ordered set per architectural field.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub variant: SpaceVariant,
    pub d_model: Vec<usize>,
    pub n_heads: Vec<usize>,
    pub d_head: Vec<usize>,
    pub ffn_ratio: Vec<f64>,
    pub n_layers: Vec<usize>,
}

/// One failed membership or integrality check.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

const RATIO_TOL: f64 = 1e-9;

fn powers_of_two(lo: usize, hi: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut v = lo.next_power_of_two();
    while v <= hi {
        out.push(v);
        v *= 2;
    }
    out
}

impl SearchSpace {
    /// Builds the standard choice sets for a super-network.
    ///
    /// Widths are powers of two from 32 up to the maximum (or the top two
    /// powers when the maximum is below 64), head counts are `H/4, H/2, H`
    /// restricted to whole KV groups, head sizes are powers of two from 8,
    /// FFN ratios come from `{1, 2, 3, 3.5}` up to the maximum, and depth
    /// ranges over `1..=L`.
    pub fn for_supernet(cfg: &SuperNetConfig, variant: SpaceVariant) -> Result<Self> {
        cfg.validate()?;
        let mut d_model = powers_of_two(32, cfg.d_model_max);
        if d_model.len() < 2 {
            d_model = vec![(cfg.d_model_max / 2).max(1), cfg.d_model_max];
            d_model.dedup();
        }
        let mut n_heads: Vec<usize> = [4, 2, 1]
            .iter()
            .filter(|&&div| cfg.n_heads_max % div == 0)
            .map(|&div| cfg.n_heads_max / div)
            .filter(|&h| (h * cfg.n_groups_max) % cfg.n_heads_max == 0)
            .collect();
        n_heads.dedup();
        let mut d_head = powers_of_two(8, cfg.d_head_max);
        if d_head.is_empty() {
            d_head = vec![cfg.d_head_max];
        }
        let mut ffn_ratio: Vec<f64> = [1.0, 2.0, 3.0, 3.5]
            .into_iter()
            .filter(|&r| r <= cfg.ffn_ratio_max + RATIO_TOL)
            .collect();
        if ffn_ratio.last().is_none_or(|&r| (r - cfg.ffn_ratio_max).abs() > RATIO_TOL) {
            ffn_ratio.push(cfg.ffn_ratio_max);
        }
        match variant {
            SpaceVariant::Joint => {}
            SpaceVariant::FixedHead => n_heads = vec![cfg.n_heads_max],
            SpaceVariant::FixedHeadSize => d_head = vec![cfg.d_head_max],
        }
        let space = Self {
            variant,
            d_model,
            n_heads,
            d_head,
            ffn_ratio,
            n_layers: (1..=cfg.n_layers_max).collect(),
        };
        space.check(cfg)?;
        Ok(space)
    }

    /// Structural validity against a super-network.
    pub fn check(&self, cfg: &SuperNetConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model.is_empty()
            || self.n_heads.is_empty()
            || self.d_head.is_empty()
            || self.ffn_ratio.is_empty()
            || self.n_layers.is_empty()
        {
            return bad("every search-space field needs at least one choice".into());
        }
        match self.variant {
            SpaceVariant::FixedHead if self.n_heads.len() != 1 => {
                return bad("fixed_head space must have exactly one head count".into())
            }
            SpaceVariant::FixedHeadSize if self.d_head.len() != 1 => {
                return bad("fixed_head_size space must have exactly one head size".into())
            }
            _ => {}
        }
        if let Some(d) = self.d_model.iter().find(|&&d| d == 0 || d > cfg.d_model_max) {
            return bad(format!("d_model choice {d} outside 1..={}", cfg.d_model_max));
        }
        if let Some(h) = self
            .n_heads
            .iter()
            .find(|&&h| h == 0 || h > cfg.n_heads_max || (h * cfg.n_groups_max) % cfg.n_heads_max != 0)
        {
            return bad(format!(
                "n_heads choice {h} must be in 1..={} and select whole KV groups",
                cfg.n_heads_max
            ));
        }
        if let Some(d) = self.d_head.iter().find(|&&d| d == 0 || d > cfg.d_head_max) {
            return bad(format!("d_head choice {d} outside 1..={}", cfg.d_head_max));
        }
        if let Some(r) = self
            .ffn_ratio
            .iter()
            .find(|&&r| !(r > 0.0) || r > cfg.ffn_ratio_max + RATIO_TOL)
        {
            return bad(format!("ffn_ratio choice {r} outside (0, {}]", cfg.ffn_ratio_max));
        }
        for &d in &self.d_model {
            for &r in &self.ffn_ratio {
                let u = cfg.ffn_hidden(d, r);
                if u == 0 || u > cfg.ffn_hidden_max() {
                    return bad(format!("ffn width for d_model {d}, ratio {r} is {u}"));
                }
            }
        }
        if let Some(l) = self.n_layers.iter().find(|&&l| l == 0 || l > cfg.n_layers_max) {
            return bad(format!("n_layers choice {l} outside 1..={}", cfg.n_layers_max));
        }
        Ok(())
    }

    /// Smallest choice in every field.
    pub fn theta_min(&self) -> SubNetworkConfig {
        SubNetworkConfig::new(
            *self.d_model.iter().min().expect("non-empty"),
            *self.n_heads.iter().min().expect("non-empty"),
            *self.d_head.iter().min().expect("non-empty"),
            self.ffn_ratio.iter().copied().fold(f64::INFINITY, f64::min),
            *self.n_layers.iter().min().expect("non-empty"),
        )
    }

    /// Largest choice in every field.
    pub fn theta_max(&self) -> SubNetworkConfig {
        SubNetworkConfig::new(
            *self.d_model.iter().max().expect("non-empty"),
            *self.n_heads.iter().max().expect("non-empty"),
            *self.d_head.iter().max().expect("non-empty"),
            self.ffn_ratio.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            *self.n_layers.iter().max().expect("non-empty"),
        )
    }

    /// Draws every field independently and uniformly from its choice set.
    pub fn sample_uniform<R: Rng + ?Sized>(&self, rng: &mut R) -> SubNetworkConfig {
        SubNetworkConfig::new(
            self.d_model[rng.random_range(0..self.d_model.len())],
            self.n_heads[rng.random_range(0..self.n_heads.len())],
            self.d_head[rng.random_range(0..self.d_head.len())],
            self.ffn_ratio[rng.random_range(0..self.ffn_ratio.len())],
            self.n_layers[rng.random_range(0..self.n_layers.len())],
        )
    }

    /// Every sub-network of the space, in lexicographic field order.
    pub fn enumerate(&self) -> Vec<SubNetworkConfig> {
        let mut out = Vec::new();
        for &d in &self.d_model {
            for &h in &self.n_heads {
                for &dh in &self.d_head {
                    for &r in &self.ffn_ratio {
                        for &l in &self.n_layers {
                            out.push(SubNetworkConfig::new(d, h, dh, r, l));
                        }
                    }
                }
            }
        }
        out
    }

    pub fn size(&self) -> usize {
        self.d_model.len() * self.n_heads.len() * self.d_head.len() * self.ffn_ratio.len() * self.n_layers.len()
    }

    /// Lists every membership and group-integrality failure of `theta`.
    pub fn validate(&self, cfg: &SuperNetConfig, theta: &SubNetworkConfig) -> Vec<Violation> {
        let mut out = Vec::new();
        let mut member = |field: &'static str, ok: bool, value: String, choices: String| {
            if !ok {
                out.push(Violation {
                    field,
                    message: format!("{field} = {value} not in {choices}"),
                });
            }
        };
        member(
            "d_model",
            self.d_model.contains(&theta.d_model),
            theta.d_model.to_string(),
            format!("{:?}", self.d_model),
        );
        member(
            "n_heads",
            self.n_heads.contains(&theta.n_heads),
            theta.n_heads.to_string(),
            format!("{:?}", self.n_heads),
        );
        member(
            "d_head",
            self.d_head.contains(&theta.d_head),
            theta.d_head.to_string(),
            format!("{:?}", self.d_head),
        );
        member(
            "ffn_ratio",
            self.ffn_ratio.iter().any(|r| (r - theta.ffn_ratio).abs() <= RATIO_TOL),
            theta.ffn_ratio.to_string(),
            format!("{:?}", self.ffn_ratio),
        );
        member(
            "n_layers",
            self.n_layers.contains(&theta.n_layers),
            theta.n_layers.to_string(),
            format!("{:?}", self.n_layers),
        );
        if (theta.n_heads * cfg.n_groups_max) % cfg.n_heads_max != 0 {
            out.push(Violation {
                field: "n_heads",
                message: format!(
                    "group integrality: {} heads with {} heads per group leaves a partial KV group",
                    theta.n_heads,
                    cfg.heads_per_group()
                ),
            });
        }
        out
    }
}

/// Scalars in the materialized sub-network: token and position embeddings,
/// per block two norm gains, packed QKV, output projection and the three FFN
/// matrices, then the final norm gain and the LM head.
pub fn count_params(cfg: &SuperNetConfig, theta: &SubNetworkConfig) -> u64 {
    let d = theta.d_model as u64;
    let h = theta.n_heads as u64;
    let g = theta.n_groups(cfg) as u64;
    let dh = theta.d_head as u64;
    let u = theta.ffn_hidden(cfg) as u64;
    let v = cfg.vocab_size as u64;
    let s = cfg.max_seq_len as u64;
    let block = 2 * d + d * (h + 2 * g) * dh + h * dh * d + 3 * d * u;
    v * d + s * d + theta.n_layers as u64 * block + d + d * v
}

/// Floating-point operations of one batch-1 forward pass over `seq_len`
/// tokens, counted as `2 ×` multiply-adds:
///
/// ```text
/// per block: T·d·(H+2G)·dh   (QKV)
///          + 2·H·T²·dh       (scores and weighted values, full T×T)
///          + T·H·dh·d        (output projection)
///          + 3·T·d·U         (gated FFN)
/// head:      T·d·V
/// ```
pub fn estimate_flops(cfg: &SuperNetConfig, theta: &SubNetworkConfig, seq_len: usize) -> u64 {
    let t = seq_len as u64;
    let d = theta.d_model as u64;
    let h = theta.n_heads as u64;
    let g = theta.n_groups(cfg) as u64;
    let dh = theta.d_head as u64;
    let u = theta.ffn_hidden(cfg) as u64;
    let block = t * d * (h + 2 * g) * dh + 2 * h * t * t * dh + t * h * dh * d + 3 * t * d * u;
    2 * (theta.n_layers as u64 * block + t * d * cfg.vocab_size as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy() -> (SuperNetConfig, SearchSpace) {
        let cfg = SuperNetConfig::toy();
        let space = SearchSpace::for_supernet(&cfg, SpaceVariant::Joint).unwrap();
        (cfg, space)
    }

    #[test]
    fn toy_joint_space_choices() {
        let (_, s) = toy();
        assert_eq!(s.d_model, vec![32, 64]);
        assert_eq!(s.n_heads, vec![2, 4]);
        assert_eq!(s.d_head, vec![8, 16]);
        assert_eq!(s.ffn_ratio, vec![1.0, 2.0, 3.0, 3.5]);
        assert_eq!(s.n_layers, vec![1, 2, 3, 4]);
    }

    #[test]
    fn llama_scale_space_reproduces_table_choices() {
        let cfg = SuperNetConfig {
            vocab_size: 128256,
            d_model_max: 4096,
            n_layers_max: 32,
            n_heads_max: 32,
            n_groups_max: 8,
            d_head_max: 128,
            ffn_ratio_max: 3.5,
            rms_eps: 1e-5,
            max_seq_len: 512,
        };
        let joint = SearchSpace::for_supernet(&cfg, SpaceVariant::Joint).unwrap();
        assert_eq!(joint.n_heads, vec![8, 16, 32]);
        assert_eq!(joint.d_head, vec![8, 16, 32, 64, 128]);
        assert_eq!(joint.ffn_ratio, vec![1.0, 2.0, 3.0, 3.5]);
        assert_eq!(joint.d_model, vec![32, 64, 128, 256, 512, 1024, 2048, 4096]);
        let fh = SearchSpace::for_supernet(&cfg, SpaceVariant::FixedHead).unwrap();
        assert_eq!(fh.n_heads, vec![32]);
        let fhs = SearchSpace::for_supernet(&cfg, SpaceVariant::FixedHeadSize).unwrap();
        assert_eq!(fhs.d_head, vec![128]);
    }

    #[test]
    fn singleton_space_samples_its_only_member() {
        let (cfg, _) = toy();
        let theta = SubNetworkConfig::new(32, 2, 8, 2.0, 3);
        let space = SearchSpace {
            variant: SpaceVariant::Joint,
            d_model: vec![32],
            n_heads: vec![2],
            d_head: vec![8],
            ffn_ratio: vec![2.0],
            n_layers: vec![3],
        };
        space.check(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..10 {
            assert_eq!(space.sample_uniform(&mut rng), theta);
        }
    }

    #[test]
    fn validate_names_offending_field() {
        let (cfg, s) = toy();
        assert!(s.validate(&cfg, &s.theta_max()).is_empty());
        let v = s.validate(&cfg, &SubNetworkConfig::new(64, 3, 16, 3.5, 4));
        assert!(v.iter().any(|x| x.field == "n_heads" && x.message.contains("not in")));
        assert!(v.iter().any(|x| x.message.contains("group integrality")));
    }

    #[test]
    fn group_integrality_on_eight_heads_four_groups() {
        let cfg = SuperNetConfig {
            n_heads_max: 8,
            n_groups_max: 4,
            ..SuperNetConfig::toy()
        };
        let space = SearchSpace {
            n_heads: vec![2, 8],
            ..SearchSpace::for_supernet(&cfg, SpaceVariant::Joint).unwrap()
        };
        let theta = SubNetworkConfig::new(64, 2, 16, 1.0, 1);
        assert!(space.validate(&cfg, &theta).is_empty());
        assert_eq!(theta.n_groups(&cfg), 1);
        let odd = SubNetworkConfig::new(64, 3, 16, 1.0, 1);
        assert!(space.validate(&cfg, &odd).iter().any(|v| v.message.contains("group integrality")));
    }

    #[test]
    fn parse_and_display_round_trip() {
        let t: SubNetworkConfig = "[768, 8, 32, 2, 9]".parse().unwrap();
        assert_eq!(t, SubNetworkConfig::new(768, 8, 32, 2.0, 9));
        assert_eq!(t.to_string(), "[768, 8, 32, 2, 9]");
        assert!("1,2,3".parse::<SubNetworkConfig>().is_err());
    }

    #[test]
    fn flops_linear_in_depth_and_superlinear_in_length() {
        let (cfg, _) = toy();
        let one = SubNetworkConfig::new(64, 4, 16, 3.5, 1);
        let two = SubNetworkConfig { n_layers: 2, ..one };
        let head = 2 * 64 * 64 * 256;
        let block1 = estimate_flops(&cfg, &one, 64) - head;
        let block2 = estimate_flops(&cfg, &two, 64) - head;
        assert_eq!(block2, 2 * block1);
        let attn = |t: u64| 2 * 2 * 4 * t * t * 16;
        assert_eq!(attn(128), 4 * attn(64));
        assert!(estimate_flops(&cfg, &one, 128) > 2 * estimate_flops(&cfg, &one, 64));
    }
}
