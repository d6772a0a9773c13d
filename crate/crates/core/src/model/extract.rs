use super::{merge_lora, BlockWeights, SuperNetConfig, SuperNetWeights};
use crate::error::Result;
use crate::numerics::{Float, Tensor};
use crate::search::SubNetworkConfig;

fn prefix<F: Float>(t: &Tensor<F>, n: usize) -> Result<Tensor<F>> {
    Tensor::new(vec![n], t.data()[..n].to_vec())
}

/// Materializes sub-network `theta` as a standalone network whose maxima
/// equal `theta`. Adapters are merged first; the block rank is dropped
/// because the kept blocks are already in forward order.
pub fn extract_subnet<F: Float>(w: &SuperNetWeights<F>, theta: &SubNetworkConfig) -> Result<SuperNetWeights<F>> {
    let cfg = &w.cfg;
    theta.check_fits(cfg)?;
    let merged;
    let w = if w.lora.is_some() {
        let mut m = w.clone();
        merge_lora(&mut m)?;
        merged = m;
        &merged
    } else {
        w
    };
    let (d, h, g, dh) = (theta.d_model, theta.n_heads, theta.n_groups(cfg), theta.d_head);
    let u = theta.ffn_hidden(cfg);
    let dhm = cfg.d_head_max;
    let rows_d: Vec<usize> = (0..d).collect();
    let cols_u: Vec<usize> = (0..u).collect();
    let vocab: Vec<usize> = (0..cfg.vocab_size).collect();
    let heads: Vec<usize> = (0..h).flat_map(|i| (0..dh).map(move |c| i * dhm + c)).collect();
    let groups: Vec<usize> = (0..g).flat_map(|i| (0..dh).map(move |c| i * dhm + c)).collect();
    let k_off = cfg.n_heads_max * dhm;
    let v_off = k_off + cfg.n_groups_max * dhm;
    let qkv: Vec<usize> = heads
        .iter()
        .copied()
        .chain(groups.iter().map(|&c| k_off + c))
        .chain(groups.iter().map(|&c| v_off + c))
        .collect();
    let seq: Vec<usize> = (0..cfg.max_seq_len).collect();

    let mut blocks = Vec::with_capacity(theta.n_layers);
    for l in w.active_blocks(theta.n_layers) {
        let b = &w.blocks[l];
        blocks.push(BlockWeights {
            attn_norm: prefix(&b.attn_norm, d)?,
            w_attn: b.w_attn.select(&rows_d, &qkv)?,
            w_proj: b.w_proj.select(&heads, &rows_d)?,
            ffn_norm: prefix(&b.ffn_norm, d)?,
            w_gate: b.w_gate.select(&rows_d, &cols_u)?,
            w_up: b.w_up.select(&rows_d, &cols_u)?,
            w_down: b.w_down.select(&cols_u, &rows_d)?,
        });
    }
    let sub_cfg = SuperNetConfig {
        vocab_size: cfg.vocab_size,
        d_model_max: d,
        n_layers_max: theta.n_layers,
        n_heads_max: h,
        n_groups_max: g,
        d_head_max: dh,
        ffn_ratio_max: theta.ffn_ratio,
        rms_eps: cfg.rms_eps,
        max_seq_len: cfg.max_seq_len,
    };
    sub_cfg.validate()?;
    Ok(SuperNetWeights {
        cfg: sub_cfg,
        emb: w.emb.select(&vocab, &rows_d)?,
        pos: w.pos.select(&seq, &rows_d)?,
        blocks,
        final_norm: prefix(&w.final_norm, d)?,
        lm_head: w.lm_head.select(&rows_d, &vocab)?,
        block_rank: None,
        lora: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_supernet;

    #[test]
    fn full_extraction_is_identity() {
        let w = init_supernet::<f32>(&SuperNetConfig::toy(), 2).unwrap();
        let e = extract_subnet(&w, &SubNetworkConfig::full(&w.cfg)).unwrap();
        assert_eq!(e, w);
    }

    #[test]
    fn extraction_keeps_ranked_blocks() {
        let mut w = init_supernet::<f32>(&SuperNetConfig::toy(), 2).unwrap();
        w.block_rank = Some(vec![2, 0, 3, 1]);
        let e = extract_subnet(&w, &SubNetworkConfig::new(64, 4, 16, 3.5, 2)).unwrap();
        assert_eq!(e.blocks, vec![w.blocks[0].clone(), w.blocks[2].clone()]);
        assert_eq!(e.block_rank, None);
    }
}
