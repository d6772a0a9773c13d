//! The elastic decoder-only GQA transformer super-network.
//!
//! Every sub-network is realized by first-k slicing of the shared weights:
//! the first `d_model` embedding channels, the first `n_heads / (H/G)` whole
//! KV groups, the first `d_head` columns of every head, and the first `U`
//! FFN neurons. Depth keeps the highest-ranked blocks in their original
//! order.

mod extract;
mod forward;
mod gradcheck;
mod lora;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

pub use extract::extract_subnet;
pub use forward::{
    bind_weights, forward, forward_blocks, forward_on_tape, forward_traced, lm_loss, BoundWeights,
    ForwardOptions, ForwardTrace, TokenBatch, Trainable,
};
pub use gradcheck::{check_lm_gradients, GRAD_FLOOR};
pub use lora::{
    attach_lora, merge_lora, BlockLora, LoraAdapter, LoraAdapterSet, LoraSpec, LORA_SITES,
};

/// Shape of the largest network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuperNetConfig {
    pub vocab_size: usize,
    pub d_model_max: usize,
    pub n_layers_max: usize,
    pub n_heads_max: usize,
    pub n_groups_max: usize,
    pub d_head_max: usize,
    pub ffn_ratio_max: f64,
    pub rms_eps: f64,
    pub max_seq_len: usize,
}

impl SuperNetConfig {
    /// The desk-scale configuration used throughout the tests and examples.
    pub fn toy() -> Self {
        Self {
            vocab_size: 256,
            d_model_max: 64,
            n_layers_max: 4,
            n_heads_max: 4,
            n_groups_max: 2,
            d_head_max: 16,
            ffn_ratio_max: 3.5,
            rms_eps: 1e-5,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model_max", self.d_model_max),
            ("n_layers_max", self.n_layers_max),
            ("n_heads_max", self.n_heads_max),
            ("n_groups_max", self.n_groups_max),
            ("d_head_max", self.d_head_max),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.n_heads_max % self.n_groups_max != 0 {
            return bad(format!(
                "n_heads_max {} is not a multiple of n_groups_max {}",
                self.n_heads_max, self.n_groups_max
            ));
        }
        if !self.d_model_max.is_power_of_two() || !self.d_head_max.is_power_of_two() {
            return bad("d_model_max and d_head_max must be powers of two".into());
        }
        if !(self.ffn_ratio_max > 0.0) || self.ffn_hidden(self.d_model_max, self.ffn_ratio_max) == 0 {
            return bad("ffn_ratio_max must give a non-empty FFN".into());
        }
        if !(self.rms_eps > 0.0) {
            return bad("rms_eps must be positive".into());
        }
        Ok(())
    }

    pub fn heads_per_group(&self) -> usize {
        self.n_heads_max / self.n_groups_max
    }

    /// FFN width for a given model width and ratio: `round(r · d_model)`.
    pub fn ffn_hidden(&self, d_model: usize, ratio: f64) -> usize {
        (ratio * d_model as f64).round() as usize
    }

    pub fn ffn_hidden_max(&self) -> usize {
        self.ffn_hidden(self.d_model_max, self.ffn_ratio_max)
    }

    /// Packed attention width `(H + 2G) · d_head`.
    pub fn attn_width(&self) -> usize {
        (self.n_heads_max + 2 * self.n_groups_max) * self.d_head_max
    }
}

/// One transformer block's parameters.
///
/// `w_attn` packs the query heads, then the key groups, then the value
/// groups column-wise. In the gated FFN `w_gate` feeds the SiLU, `w_up` the
/// linear path, and `w_down` maps back to the residual stream.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockWeights<F> {
    pub attn_norm: Tensor<F>,
    pub w_attn: Tensor<F>,
    pub w_proj: Tensor<F>,
    pub ffn_norm: Tensor<F>,
    pub w_gate: Tensor<F>,
    pub w_up: Tensor<F>,
    pub w_down: Tensor<F>,
}

/// All shared parameters of the super-network.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperNetWeights<F> {
    pub cfg: SuperNetConfig,
    pub emb: Tensor<F>,
    pub pos: Tensor<F>,
    pub blocks: Vec<BlockWeights<F>>,
    pub final_norm: Tensor<F>,
    pub lm_head: Tensor<F>,
    /// Block indices by decreasing importance; `None` keeps the first `L'`.
    pub block_rank: Option<Vec<usize>>,
    pub lora: Option<LoraAdapterSet<F>>,
}

pub const BLOCK_TENSORS: [&str; 7] = [
    "attn_norm", "w_attn", "w_proj", "ffn_norm", "w_gate", "w_up", "w_down",
];

impl<F: Float> BlockWeights<F> {
    pub fn tensors(&self) -> [&Tensor<F>; 7] {
        [
            &self.attn_norm,
            &self.w_attn,
            &self.w_proj,
            &self.ffn_norm,
            &self.w_gate,
            &self.w_up,
            &self.w_down,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor<F>; 7] {
        [
            &mut self.attn_norm,
            &mut self.w_attn,
            &mut self.w_proj,
            &mut self.ffn_norm,
            &mut self.w_gate,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

impl<F: Float> SuperNetWeights<F> {
    /// Expected shape of every named tensor, in canonical order.
    pub fn expected_shapes(cfg: &SuperNetConfig) -> Vec<(String, Vec<usize>)> {
        let (v, d, u) = (cfg.vocab_size, cfg.d_model_max, cfg.ffn_hidden_max());
        let mut out = vec![
            ("emb".to_string(), vec![v, d]),
            ("pos".to_string(), vec![cfg.max_seq_len, d]),
        ];
        for l in 0..cfg.n_layers_max {
            let shapes = [
                vec![d],
                vec![d, cfg.attn_width()],
                vec![cfg.n_heads_max * cfg.d_head_max, d],
                vec![d],
                vec![d, u],
                vec![d, u],
                vec![u, d],
            ];
            for (name, s) in BLOCK_TENSORS.iter().zip(shapes) {
                out.push((format!("blocks.{l}.{name}"), s));
            }
        }
        out.push(("final_norm".to_string(), vec![d]));
        out.push(("lm_head".to_string(), vec![d, v]));
        out
    }

    /// Base tensors then any adapter tensors, in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![("emb".to_string(), &self.emb), ("pos".to_string(), &self.pos)];
        for (l, b) in self.blocks.iter().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("lm_head".to_string(), &self.lm_head));
        if let Some(l) = &self.lora {
            out.extend(l.named_tensors());
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("emb".to_string(), &mut self.emb),
            ("pos".to_string(), &mut self.pos),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (name, t) in BLOCK_TENSORS.iter().zip(b.tensors_mut()) {
                out.push((format!("blocks.{l}.{name}"), t));
            }
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("lm_head".to_string(), &mut self.lm_head));
        if let Some(l) = &mut self.lora {
            out.extend(l.named_tensors_mut());
        }
        out
    }

    /// Rebuilds weights from named tensors, checking every shape.
    pub fn from_named(
        cfg: SuperNetConfig,
        mut tensors: std::collections::BTreeMap<String, Tensor<F>>,
        block_rank: Option<Vec<usize>>,
        lora: Option<LoraSpec>,
    ) -> Result<Self> {
        cfg.validate()?;
        let lora = match lora {
            Some(spec) => Some(LoraAdapterSet::take_named(&cfg, spec, &mut tensors)?),
            None => None,
        };
        let mut ordered = Vec::new();
        for (name, shape) in Self::expected_shapes(&cfg) {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    op: "load",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            ordered.push(t);
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Input(format!("unexpected tensor `{extra}`")));
        }
        let mut it = ordered.into_iter();
        let mut next = || it.next().expect("one tensor per expected shape");
        let emb = next();
        let pos = next();
        let mut blocks = Vec::with_capacity(cfg.n_layers_max);
        for _ in 0..cfg.n_layers_max {
            blocks.push(BlockWeights {
                attn_norm: next(),
                w_attn: next(),
                w_proj: next(),
                ffn_norm: next(),
                w_gate: next(),
                w_up: next(),
                w_down: next(),
            });
        }
        let final_norm = next();
        let lm_head = next();
        if let Some(rank) = &block_rank {
            check_permutation(rank, cfg.n_layers_max, "block rank")?;
        }
        Ok(Self {
            cfg,
            emb,
            pos,
            blocks,
            final_norm,
            lm_head,
            block_rank,
            lora,
        })
    }

    /// Base parameter count, adapters excluded.
    pub fn num_params(&self) -> usize {
        Self::expected_shapes(&self.cfg)
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }

    /// Blocks kept by a depth-`n` sub-network, in forward order.
    pub fn active_blocks(&self, n_layers: usize) -> Vec<usize> {
        let mut keep: Vec<usize> = match &self.block_rank {
            Some(rank) => rank.iter().take(n_layers).copied().collect(),
            None => (0..n_layers.min(self.blocks.len())).collect(),
        };
        keep.sort_unstable();
        keep
    }

    pub fn cast<G: Float>(&self) -> SuperNetWeights<G> {
        SuperNetWeights {
            cfg: self.cfg.clone(),
            emb: self.emb.cast(),
            pos: self.pos.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockWeights {
                    attn_norm: b.attn_norm.cast(),
                    w_attn: b.w_attn.cast(),
                    w_proj: b.w_proj.cast(),
                    ffn_norm: b.ffn_norm.cast(),
                    w_gate: b.w_gate.cast(),
                    w_up: b.w_up.cast(),
                    w_down: b.w_down.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            lm_head: self.lm_head.cast(),
            block_rank: self.block_rank.clone(),
            lora: self.lora.as_ref().map(|l| l.cast()),
        }
    }
}

pub(crate) fn check_permutation(p: &[usize], n: usize, what: &str) -> Result<()> {
    let mut seen = vec![false; n];
    if p.len() != n {
        return Err(Error::Contract(format!("{what}: length {} != {n}", p.len())));
    }
    for &i in p {
        if i >= n || std::mem::replace(&mut seen[i], true) {
            return Err(Error::Contract(format!("{what} is not a bijection on 0..{n}")));
        }
    }
    Ok(())
}

/// Scaled-normal initialization: std 0.02, residual output projections
/// scaled by `1/sqrt(2L)`, norm gains at one.
pub fn init_supernet<F: Float>(cfg: &SuperNetConfig, seed: u64) -> Result<SuperNetWeights<F>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = Normal::new(0.0, 0.02).expect("valid std");
    let resid = Normal::new(0.0, 0.02 / (2.0 * cfg.n_layers_max as f64).sqrt()).expect("valid std");
    let mut draw = |shape: &[usize], dist: &Normal<f64>| -> Tensor<F> {
        let n: usize = shape.iter().product();
        let data: Vec<F> = (0..n).map(|_| F::from_f64_lossy(dist.sample(&mut rng))).collect();
        Tensor::new(shape.to_vec(), data).expect("shape matches data")
    };
    let ones = |n: usize| Tensor::full(&[n], F::one());
    let (v, d, u) = (cfg.vocab_size, cfg.d_model_max, cfg.ffn_hidden_max());
    let emb = draw(&[v, d], &base);
    let pos = draw(&[cfg.max_seq_len, d], &base);
    let mut blocks = Vec::with_capacity(cfg.n_layers_max);
    for _ in 0..cfg.n_layers_max {
        blocks.push(BlockWeights {
            attn_norm: ones(d),
            w_attn: draw(&[d, cfg.attn_width()], &base),
            w_proj: draw(&[cfg.n_heads_max * cfg.d_head_max, d], &resid),
            ffn_norm: ones(d),
            w_gate: draw(&[d, u], &base),
            w_up: draw(&[d, u], &base),
            w_down: draw(&[u, d], &resid),
        });
    }
    let lm_head = draw(&[d, v], &base);
    Ok(SuperNetWeights {
        cfg: cfg.clone(),
        emb,
        pos,
        blocks,
        final_norm: ones(d),
        lm_head,
        block_rank: None,
        lora: None,
    })
}
