#![allow(dead_code)]

pub mod oracle;

use nasprune::model::{attach_lora, init_supernet, LoraSpec, SuperNetConfig, SuperNetWeights, TokenBatch};
use nasprune::numerics::{Float, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Toy weights with non-trivial norm gains.
pub fn toy_weights<F: Float>(seed: u64) -> SuperNetWeights<F> {
    let mut w = init_supernet::<F>(&SuperNetConfig::toy(), seed).unwrap();
    let mut r = rng(seed ^ 0xabcd);
    let mut jitter = |t: &mut Tensor<F>| {
        for v in t.data_mut() {
            *v = F::from_f64_lossy(0.5 + r.random::<f64>());
        }
    };
    for b in &mut w.blocks {
        jitter(&mut b.attn_norm);
        jitter(&mut b.ffn_norm);
    }
    jitter(&mut w.final_norm);
    w
}

/// Toy weights with adapters whose `B` factors are non-zero.
pub fn toy_weights_with_lora<F: Float>(seed: u64, rank: usize) -> SuperNetWeights<F> {
    let mut w = toy_weights::<F>(seed);
    let spec = LoraSpec {
        rank,
        alpha: 2.0 * rank as f64,
        dropout: 0.0,
    };
    attach_lora(&mut w, spec, seed + 1).unwrap();
    let mut r = rng(seed ^ 0x1234);
    for (name, t) in w.named_tensors_mut() {
        if name.ends_with(".b") {
            for v in t.data_mut() {
                *v = F::from_f64_lossy(0.05 * (r.random::<f64>() - 0.5));
            }
        }
    }
    w
}

pub fn random_batch<R: Rng>(rng: &mut R, batch: usize, seq: usize) -> TokenBatch {
    let tokens = (0..batch * seq).map(|_| rng.random_range(0..256u32)).collect();
    TokenBatch::new(batch, seq, tokens).unwrap()
}
