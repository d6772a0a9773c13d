use std::sync::Arc;

use super::{block_cosine_scores, ActivationStats};
use crate::data::WindowSet;
use crate::error::{Error, Result};
use crate::eval::eval_loss;
use crate::model::{forward_blocks, lm_loss, SuperNetWeights};
use crate::numerics::Float;
use crate::registry::Registry;
use crate::search::SubNetworkConfig;

/// A block-importance strategy; larger scores are kept first.
pub trait BlockScorer<F: Float>: Send + Sync {
    fn name(&self) -> &'static str;

    fn score(&self, w: &SuperNetWeights<F>, stats: &ActivationStats, calib: &WindowSet, batch_size: usize) -> Result<Vec<f64>>;
}

/// `1 − mean cos(X_l, X_{l+1})` from the calibration statistics.
pub struct CosineBlockScorer;

impl<F: Float> BlockScorer<F> for CosineBlockScorer {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn score(&self, _w: &SuperNetWeights<F>, stats: &ActivationStats, _calib: &WindowSet, _batch_size: usize) -> Result<Vec<f64>> {
        Ok(block_cosine_scores(stats))
    }
}

/// Perplexity increase when the block is skipped.
pub struct DropBlockScorer;

impl<F: Float> BlockScorer<F> for DropBlockScorer {
    fn name(&self) -> &'static str {
        "drop"
    }

    fn score(&self, w: &SuperNetWeights<F>, _stats: &ActivationStats, calib: &WindowSet, batch_size: usize) -> Result<Vec<f64>> {
        score_blocks_by_drop(w, calib, batch_size)
    }
}

/// The built-in block scorers, keyed `cosine` and `drop`.
pub fn block_scorers<F: Float>() -> Registry<dyn BlockScorer<F>> {
    let mut r: Registry<dyn BlockScorer<F>> = Registry::new("block scorer");
    r.register("cosine", Arc::new(CosineBlockScorer)).expect("unique");
    r.register("drop", Arc::new(DropBlockScorer)).expect("unique");
    r
}

/// `PPL(without block l) − PPL(full)` for every block.
pub fn score_blocks_by_drop<F: Float>(w: &SuperNetWeights<F>, calib: &WindowSet, batch_size: usize) -> Result<Vec<f64>> {
    let layers = w.cfg.n_layers_max;
    if layers < 2 {
        return Err(Error::Config("block-drop scoring needs at least two blocks".into()));
    }
    let theta = SubNetworkConfig::full(&w.cfg);
    let full = eval_loss(w, &theta, calib, batch_size)?.exp();
    let mut out = Vec::with_capacity(layers);
    for skip in 0..layers {
        let keep: Vec<usize> = (0..layers).filter(|&l| l != skip).collect();
        let mut total = 0.0;
        let mut count = 0;
        for b in calib.batches(batch_size)? {
            let logits = forward_blocks(w, &theta, &b.inputs, &keep)?;
            total += lm_loss(&logits, &b.targets)? * b.targets.len() as f64;
            count += b.targets.len();
        }
        out.push((total / count as f64).exp() - full);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_supernet, SuperNetConfig};

    #[test]
    fn zero_block_has_zero_drop_score() {
        let mut w = init_supernet::<f64>(&SuperNetConfig::toy(), 4).unwrap();
        w.blocks[1].w_proj.data_mut().iter_mut().for_each(|v| *v = 0.0);
        w.blocks[1].w_down.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let text: Vec<u8> = (0..129u32).map(|i| (i * 13 % 256) as u8).collect();
        let calib = WindowSet::new(&text, 16).unwrap();
        let s = score_blocks_by_drop(&w, &calib, 4).unwrap();
        assert!(s[1].abs() < 1e-9);
        assert!(s[0].abs() > 1e-9);
    }

    #[test]
    fn registry_knows_both_scorers() {
        assert_eq!(block_scorers::<f32>().names(), vec!["cosine", "drop"]);
    }
}
