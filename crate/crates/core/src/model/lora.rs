//! Low-rank adapters on the query, key and value column blocks of every
//! `w_attn` and on the token embedding.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::{SuperNetConfig, SuperNetWeights};
use crate::error::{contract, Error, Result};
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 32,
            alpha: 16.0,
            dropout: 0.05,
        }
    }
}

impl LoraSpec {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("lora rank must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("lora dropout must lie in [0, 1)".into()));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora alpha must be finite".into()));
        }
        Ok(())
    }
}

/// `delta = (alpha/rank) · (B·A)ᵀ` applied to a weight stored `in × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<F> {
    /// `rank × in`
    pub a: Tensor<F>,
    /// `out × rank`
    pub b: Tensor<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockLora<F> {
    pub q: LoraAdapter<F>,
    pub k: LoraAdapter<F>,
    pub v: LoraAdapter<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapterSet<F> {
    pub spec: LoraSpec,
    pub emb: LoraAdapter<F>,
    pub blocks: Vec<BlockLora<F>>,
}

pub const LORA_SITES: [&str; 3] = ["q", "k", "v"];

impl<F: Float> LoraAdapterSet<F> {
    /// Fresh adapters: `A` uniform in `±1/sqrt(in)`, `B` zero.
    pub fn new(cfg: &SuperNetConfig, spec: LoraSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adapter = |inp: usize, out: usize| {
            let bound = 1.0 / (inp as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            let a: Vec<F> = (0..spec.rank * inp)
                .map(|_| F::from_f64_lossy(dist.sample(&mut rng)))
                .collect();
            LoraAdapter {
                a: Tensor::new(vec![spec.rank, inp], a).expect("adapter shape"),
                b: Tensor::zeros(&[out, spec.rank]),
            }
        };
        let d = cfg.d_model_max;
        let emb = adapter(cfg.vocab_size, d);
        let blocks = (0..cfg.n_layers_max)
            .map(|_| BlockLora {
                q: adapter(d, cfg.n_heads_max * cfg.d_head_max),
                k: adapter(d, cfg.n_groups_max * cfg.d_head_max),
                v: adapter(d, cfg.n_groups_max * cfg.d_head_max),
            })
            .collect();
        Ok(Self { spec, emb, blocks })
    }

    pub fn expected_shapes(cfg: &SuperNetConfig, rank: usize) -> Vec<(String, Vec<usize>)> {
        let d = cfg.d_model_max;
        let mut out = vec![
            ("lora.emb.a".to_string(), vec![rank, cfg.vocab_size]),
            ("lora.emb.b".to_string(), vec![d, rank]),
        ];
        let outs = [
            cfg.n_heads_max * cfg.d_head_max,
            cfg.n_groups_max * cfg.d_head_max,
            cfg.n_groups_max * cfg.d_head_max,
        ];
        for l in 0..cfg.n_layers_max {
            for (site, o) in LORA_SITES.iter().zip(outs) {
                out.push((format!("lora.blocks.{l}.{site}.a"), vec![rank, d]));
                out.push((format!("lora.blocks.{l}.{site}.b"), vec![o, rank]));
            }
        }
        out
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = vec![
            ("lora.emb.a".to_string(), &self.emb.a),
            ("lora.emb.b".to_string(), &self.emb.b),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for (site, ad) in LORA_SITES.iter().zip([&b.q, &b.k, &b.v]) {
                out.push((format!("lora.blocks.{l}.{site}.a"), &ad.a));
                out.push((format!("lora.blocks.{l}.{site}.b"), &ad.b));
            }
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = vec![
            ("lora.emb.a".to_string(), &mut self.emb.a),
            ("lora.emb.b".to_string(), &mut self.emb.b),
        ];
        for (l, b) in self.blocks.iter_mut().enumerate() {
            for (site, ad) in LORA_SITES.iter().zip([&mut b.q, &mut b.k, &mut b.v]) {
                out.push((format!("lora.blocks.{l}.{site}.a"), &mut ad.a));
                out.push((format!("lora.blocks.{l}.{site}.b"), &mut ad.b));
            }
        }
        out
    }

    /// Rebuilds adapters from a name map, removing the consumed entries.
    pub fn take_named(
        cfg: &SuperNetConfig,
        spec: LoraSpec,
        tensors: &mut std::collections::BTreeMap<String, Tensor<F>>,
    ) -> Result<Self> {
        spec.validate()?;
        let mut set = Self::new(cfg, spec, 0)?;
        for (name, slot) in set.named_tensors_mut() {
            let t = tensors
                .remove(&name)
                .ok_or_else(|| Error::Input(format!("missing tensor `{name}`")))?;
            if t.shape() != slot.shape() {
                return Err(Error::Dimension {
                    op: "load",
                    lhs: t.shape().to_vec(),
                    rhs: slot.shape().to_vec(),
                });
            }
            *slot = t;
        }
        Ok(set)
    }

    pub fn cast<G: Float>(&self) -> LoraAdapterSet<G> {
        let c = |a: &LoraAdapter<F>| LoraAdapter {
            a: a.a.cast(),
            b: a.b.cast(),
        };
        LoraAdapterSet {
            spec: self.spec,
            emb: c(&self.emb),
            blocks: self
                .blocks
                .iter()
                .map(|b| BlockLora {
                    q: c(&b.q),
                    k: c(&b.k),
                    v: c(&b.v),
                })
                .collect(),
        }
    }
}

/// `(B·A)ᵀ · scale`, shaped `in × out`.
fn dense_delta<F: Float>(ad: &LoraAdapter<F>, scale: f64) -> Result<Tensor<F>> {
    let ba = ad.b.matmul(&ad.a)?;
    let s = F::from_f64_lossy(scale);
    Ok(ba.transpose()?.map(|v| v * s))
}

/// Attaches fresh adapters. Fails if adapters are already present.
pub fn attach_lora<F: Float>(w: &mut SuperNetWeights<F>, spec: LoraSpec, seed: u64) -> Result<()> {
    if w.lora.is_some() {
        return Err(contract("lora adapters are already attached"));
    }
    w.lora = Some(LoraAdapterSet::new(&w.cfg, spec, seed)?);
    Ok(())
}

/// Folds the adapters into the base weights and detaches them.
pub fn merge_lora<F: Float>(w: &mut SuperNetWeights<F>) -> Result<()> {
    let Some(set) = w.lora.take() else {
        return Ok(());
    };
    let cfg = w.cfg.clone();
    let s = set.spec.scale();
    let add = |dst: &mut Tensor<F>, delta: &Tensor<F>, col0: usize| {
        let (rows, cols) = delta.as_matrix();
        for r in 0..rows {
            for c in 0..cols {
                let v = dst.get2(r, col0 + c) + delta.get2(r, c);
                dst.set2(r, col0 + c, v);
            }
        }
    };
    add(&mut w.emb, &dense_delta(&set.emb, s)?, 0);
    let dh = cfg.d_head_max;
    let offsets = [0, cfg.n_heads_max * dh, (cfg.n_heads_max + cfg.n_groups_max) * dh];
    for (blk, ad) in w.blocks.iter_mut().zip(&set.blocks) {
        for (a, off) in [&ad.q, &ad.k, &ad.v].into_iter().zip(offsets) {
            add(&mut blk.w_attn, &dense_delta(a, s)?, off);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_supernet;

    #[test]
    fn defaults() {
        let s = LoraSpec::default();
        assert_eq!((s.rank, s.alpha, s.dropout), (32, 16.0, 0.05));
    }

    #[test]
    fn second_attach_is_rejected() {
        let mut w = init_supernet::<f32>(&SuperNetConfig::toy(), 0).unwrap();
        attach_lora(&mut w, LoraSpec::default(), 1).unwrap();
        assert!(matches!(attach_lora(&mut w, LoraSpec::default(), 1), Err(Error::Contract(_))));
    }

    #[test]
    fn merge_with_zero_b_is_identity() {
        let base = init_supernet::<f64>(&SuperNetConfig::toy(), 0).unwrap();
        let mut w = base.clone();
        attach_lora(&mut w, LoraSpec::default(), 3).unwrap();
        merge_lora(&mut w).unwrap();
        assert_eq!(w, base);
    }

    #[test]
    fn merge_places_key_delta_in_key_columns() {
        let cfg = SuperNetConfig::toy();
        let mut w = init_supernet::<f64>(&cfg, 0).unwrap();
        let base = w.clone();
        attach_lora(&mut w, LoraSpec { rank: 2, alpha: 4.0, dropout: 0.0 }, 3).unwrap();
        let set = w.lora.as_mut().unwrap();
        set.blocks[1].k.b.data_mut().iter_mut().for_each(|v| *v = 1.0);
        let a = set.blocks[1].k.a.clone();
        merge_lora(&mut w).unwrap();
        let k0 = cfg.n_heads_max * cfg.d_head_max;
        let diff = w.blocks[1].w_attn.get2(5, k0 + 3) - base.blocks[1].w_attn.get2(5, k0 + 3);
        let want = 2.0 * (a.get2(0, 5) + a.get2(1, 5));
        assert!((diff - want).abs() < 1e-12);
        assert_eq!(w.blocks[1].w_attn.get2(5, 0), base.blocks[1].w_attn.get2(5, 0));
        assert_eq!(w.blocks[0], base.blocks[0]);
    }
}
