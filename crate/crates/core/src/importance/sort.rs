use serde::{Deserialize, Serialize};

use super::ImportanceScores;
use crate::error::{contract, Result};
use crate::model::{check_permutation, SuperNetWeights};
use crate::numerics::{Float, Tensor};

/// Indices ordered by decreasing score; ties keep the lower index first.
pub fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// New position `j` holds old component `perm[j]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermutationRecord {
    pub emb: Vec<usize>,
    pub ffn: Vec<Vec<usize>>,
    pub groups: Vec<Vec<usize>>,
    pub block_rank: Vec<usize>,
}

impl PermutationRecord {
    pub fn identity(layers: usize, d_model: usize, ffn: usize, groups: usize) -> Self {
        Self {
            emb: (0..d_model).collect(),
            ffn: vec![(0..ffn).collect(); layers],
            groups: vec![(0..groups).collect(); layers],
            block_rank: (0..layers).collect(),
        }
    }

    pub fn from_scores(scores: &ImportanceScores) -> Self {
        Self {
            emb: descending_order(&scores.emb),
            ffn: scores.ffn.iter().map(|s| descending_order(s)).collect(),
            groups: scores.groups.iter().map(|s| descending_order(s)).collect(),
            block_rank: descending_order(&scores.blocks),
        }
    }

    /// True when every channel, neuron and group permutation is the identity.
    pub fn is_identity_sort(&self) -> bool {
        let id = |p: &[usize]| p.iter().enumerate().all(|(i, &v)| i == v);
        id(&self.emb) && self.ffn.iter().all(|p| id(p)) && self.groups.iter().all(|p| id(p))
    }

    /// Query-head permutation of block `l` implied by its group permutation.
    pub fn head_permutation(&self, l: usize, heads_per_group: usize) -> Vec<usize> {
        self.groups[l]
            .iter()
            .flat_map(|&g| (0..heads_per_group).map(move |m| g * heads_per_group + m))
            .collect()
    }

    fn check<F: Float>(&self, w: &SuperNetWeights<F>) -> Result<()> {
        let cfg = &w.cfg;
        let l = cfg.n_layers_max;
        if self.ffn.len() != l || self.groups.len() != l {
            return Err(contract("permutation record does not cover every block"));
        }
        check_permutation(&self.emb, cfg.d_model_max, "embedding permutation")?;
        for p in &self.ffn {
            check_permutation(p, cfg.ffn_hidden_max(), "ffn permutation")?;
        }
        for p in &self.groups {
            check_permutation(p, cfg.n_groups_max, "group permutation")?;
        }
        check_permutation(&self.block_rank, l, "block rank")
    }
}

/// Moves column blocks: new block `j` at `offset + j·width` is old block `perm[j]`.
fn permute_cols<F: Float>(t: &mut Tensor<F>, offset: usize, width: usize, perm: &[usize]) {
    let (rows, cols) = t.as_matrix();
    let old = t.data().to_vec();
    let data = t.data_mut();
    for r in 0..rows {
        for (j, &p) in perm.iter().enumerate() {
            let dst = r * cols + offset + j * width;
            let src = r * cols + offset + p * width;
            data[dst..dst + width].copy_from_slice(&old[src..src + width]);
        }
    }
}

/// Moves row blocks: new rows at `offset + j·height` are old block `perm[j]`.
fn permute_rows<F: Float>(t: &mut Tensor<F>, offset: usize, height: usize, perm: &[usize]) {
    let (_, cols) = t.as_matrix();
    let old = t.data().to_vec();
    let data = t.data_mut();
    let span = height * cols;
    for (j, &p) in perm.iter().enumerate() {
        let dst = (offset + j * height) * cols;
        let src = (offset + p * height) * cols;
        data[dst..dst + span].copy_from_slice(&old[src..src + span]);
    }
}

/// Applies a permutation record in place and stores its block rank.
pub fn apply_permutations<F: Float>(w: &mut SuperNetWeights<F>, rec: &PermutationRecord) -> Result<()> {
    rec.check(w)?;
    let cfg = w.cfg.clone();
    let dhm = cfg.d_head_max;
    let hpg = cfg.heads_per_group();
    let k_off = cfg.n_heads_max * dhm;
    let v_off = k_off + cfg.n_groups_max * dhm;
    let e = &rec.emb;

    permute_cols(&mut w.emb, 0, 1, e);
    permute_cols(&mut w.pos, 0, 1, e);
    permute_cols(&mut w.final_norm, 0, 1, e);
    permute_rows(&mut w.lm_head, 0, 1, e);
    for (l, b) in w.blocks.iter_mut().enumerate() {
        permute_cols(&mut b.attn_norm, 0, 1, e);
        permute_cols(&mut b.ffn_norm, 0, 1, e);
        permute_rows(&mut b.w_attn, 0, 1, e);
        permute_cols(&mut b.w_proj, 0, 1, e);
        permute_rows(&mut b.w_gate, 0, 1, e);
        permute_rows(&mut b.w_up, 0, 1, e);
        permute_cols(&mut b.w_down, 0, 1, e);

        let f = &rec.ffn[l];
        permute_cols(&mut b.w_gate, 0, 1, f);
        permute_cols(&mut b.w_up, 0, 1, f);
        permute_rows(&mut b.w_down, 0, 1, f);

        let g = &rec.groups[l];
        let heads = rec.head_permutation(l, hpg);
        permute_cols(&mut b.w_attn, 0, dhm, &heads);
        permute_cols(&mut b.w_attn, k_off, dhm, g);
        permute_cols(&mut b.w_attn, v_off, dhm, g);
        permute_rows(&mut b.w_proj, 0, dhm, &heads);
    }
    if let Some(set) = &mut w.lora {
        permute_rows(&mut set.emb.b, 0, 1, e);
        for (l, b) in set.blocks.iter_mut().enumerate() {
            let heads = rec.head_permutation(l, hpg);
            for ad in [&mut b.q, &mut b.k, &mut b.v] {
                permute_cols(&mut ad.a, 0, 1, e);
            }
            permute_rows(&mut b.q.b, 0, dhm, &heads);
            permute_rows(&mut b.k.b, 0, dhm, &rec.groups[l]);
            permute_rows(&mut b.v.b, 0, dhm, &rec.groups[l]);
        }
    }
    w.block_rank = Some(rec.block_rank.clone());
    Ok(())
}

/// Sorts every component by decreasing score. The full network computes
/// the same function before and after.
pub fn apply_sorting<F: Float>(
    w: &SuperNetWeights<F>,
    scores: &ImportanceScores,
) -> Result<(SuperNetWeights<F>, PermutationRecord)> {
    let cfg = &w.cfg;
    if scores.emb.len() != cfg.d_model_max
        || scores.ffn.len() != cfg.n_layers_max
        || scores.groups.len() != cfg.n_layers_max
        || scores.blocks.len() != cfg.n_layers_max
        || scores.ffn.iter().any(|s| s.len() != cfg.ffn_hidden_max())
        || scores.groups.iter().any(|s| s.len() != cfg.n_groups_max)
    {
        return Err(contract("importance scores do not cover every component"));
    }
    let rec = PermutationRecord::from_scores(scores);
    let mut out = w.clone();
    apply_permutations(&mut out, &rec)?;
    Ok((out, rec))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use crate::importance::AggregationScheme;
    use crate::model::{init_supernet, SuperNetConfig};

    fn flat_scores(cfg: &SuperNetConfig) -> ImportanceScores {
        let down = |n: usize| (0..n).map(|i| (n - i) as f64).collect::<Vec<_>>();
        ImportanceScores {
            emb: down(cfg.d_model_max),
            ffn: vec![down(cfg.ffn_hidden_max()); cfg.n_layers_max],
            groups: vec![down(cfg.n_groups_max); cfg.n_layers_max],
            blocks: down(cfg.n_layers_max),
            scheme: AggregationScheme::MEAN_MEAN,
            block_scheme: "cosine".into(),
            samples: 1,
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        assert_eq!(descending_order(&[1.0, 3.0, 3.0, 0.5]), vec![1, 2, 0, 3]);
    }

    #[test]
    fn sorted_scores_leave_weights_bit_identical() {
        let cfg = SuperNetConfig::toy();
        let w = init_supernet::<f32>(&cfg, 0).unwrap();
        let (s, rec) = apply_sorting(&w, &flat_scores(&cfg)).unwrap();
        assert!(rec.is_identity_sort());
        assert_eq!(s.named_tensors(), w.named_tensors());
        assert_eq!(s.block_rank, Some(vec![0, 1, 2, 3]));
    }

    #[test]
    fn group_permutation_moves_heads_together() {
        let cfg = SuperNetConfig::toy();
        let mut rec = PermutationRecord::identity(4, 64, 224, 2);
        rec.groups[0] = vec![1, 0];
        assert_eq!(rec.head_permutation(0, cfg.heads_per_group()), vec![2, 3, 0, 1]);
    }

    #[test]
    fn non_bijective_record_is_rejected() {
        let cfg = SuperNetConfig::toy();
        let mut w = init_supernet::<f32>(&cfg, 0).unwrap();
        let mut rec = PermutationRecord::identity(4, 64, 224, 2);
        rec.emb[3] = 0;
        assert!(matches!(apply_permutations(&mut w, &rec), Err(Error::Contract(_))));
    }
}
