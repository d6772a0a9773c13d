//! Scalar-loop reference forward pass. Inactive components are zeroed in a
//! full-width copy of the weights, inactive blocks become identity
//! residuals, and the full-width network is evaluated position by position.

#![allow(dead_code)]

use nasprune::model::SuperNetWeights;
use nasprune::search::SubNetworkConfig;

struct Mat {
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn of(t: &nasprune::numerics::Tensor<f64>) -> Self {
        let (_, cols) = t.as_matrix();
        Self {
            cols,
            data: t.data().to_vec(),
        }
    }

    fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    fn zero_where(&mut self, f: impl Fn(usize, usize) -> bool) {
        let cols = self.cols;
        for (i, v) in self.data.iter_mut().enumerate() {
            if f(i / cols, i % cols) {
                *v = 0.0;
            }
        }
    }
}

fn rms(x: &[f64], gamma: &Mat, active: usize, eps: f64) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / active as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    x.iter().enumerate().map(|(c, v)| v * inv * gamma.at(0, c)).collect()
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

/// Logits `[T][V]` of one token sequence through sub-network `theta`.
pub fn oracle_logits(w: &SuperNetWeights<f64>, theta: &SubNetworkConfig, tokens: &[u32]) -> Vec<Vec<f64>> {
    let cfg = &w.cfg;
    let (dm, d) = (cfg.d_model_max, theta.d_model);
    let (dhm, dh) = (cfg.d_head_max, theta.d_head);
    let (hm, gm) = (cfg.n_heads_max, cfg.n_groups_max);
    let hpg = hm / gm;
    let h_act = theta.n_heads;
    let g_act = h_act / hpg;
    let u_act = (d as f64 * theta.ffn_ratio).round() as usize;
    let vocab = cfg.vocab_size;
    let k_off = hm * dhm;
    let v_off = k_off + gm * dhm;
    let off_d = move |c: usize| c >= d;
    // column of w_attn -> active?
    let qkv_active = move |c: usize| {
        let (blk, within) = if c < k_off {
            (c / dhm, c % dhm)
        } else if c < v_off {
            ((c - k_off) / dhm + 1000, (c - k_off) % dhm)
        } else {
            ((c - v_off) / dhm + 1000, (c - v_off) % dhm)
        };
        within < dh && if blk >= 1000 { blk - 1000 < g_act } else { blk < h_act }
    };
    let head_row_active = move |r: usize| r / dhm < h_act && r % dhm < dh;
    let active: Vec<usize> = w.active_blocks(theta.n_layers);
    let (scale, lora) = match &w.lora {
        Some(l) => (l.spec.scale(), Some(l)),
        None => (0.0, None),
    };

    let mut emb = Mat::of(&w.emb);
    emb.zero_where(|_, c| off_d(c));
    let mut pos = Mat::of(&w.pos);
    pos.zero_where(|_, c| off_d(c));
    let mut final_norm = Mat::of(&w.final_norm);
    final_norm.zero_where(|_, c| off_d(c));
    let mut lm_head = Mat::of(&w.lm_head);
    lm_head.zero_where(|r, _| off_d(r));

    let lora_emb = lora.map(|l| (Mat::of(&l.emb.a), Mat::of(&l.emb.b), l.spec.rank));
    let t_len = tokens.len();
    let mut x: Vec<Vec<f64>> = tokens
        .iter()
        .enumerate()
        .map(|(t, &tok)| {
            (0..dm)
                .map(|c| {
                    let mut v = emb.at(tok as usize, c) + pos.at(t, c);
                    if let (Some((a, b, rank)), false) = (&lora_emb, off_d(c)) {
                        v += scale * (0..*rank).map(|r| b.at(c, r) * a.at(r, tok as usize)).sum::<f64>();
                    }
                    v
                })
                .collect()
        })
        .collect();

    for (l, blk) in w.blocks.iter().enumerate() {
        let on = active.contains(&l);
        let mut attn_norm = Mat::of(&blk.attn_norm);
        attn_norm.zero_where(|_, c| off_d(c));
        let mut ffn_norm = Mat::of(&blk.ffn_norm);
        ffn_norm.zero_where(|_, c| off_d(c));
        let mut w_attn = Mat::of(&blk.w_attn);
        w_attn.zero_where(|r, c| off_d(r) || !qkv_active(c) || !on);
        let mut w_proj = Mat::of(&blk.w_proj);
        w_proj.zero_where(|r, c| !head_row_active(r) || off_d(c) || !on);
        let mut w_gate = Mat::of(&blk.w_gate);
        w_gate.zero_where(|r, c| off_d(r) || c >= u_act || !on);
        let mut w_up = Mat::of(&blk.w_up);
        w_up.zero_where(|r, c| off_d(r) || c >= u_act || !on);
        let mut w_down = Mat::of(&blk.w_down);
        w_down.zero_where(|r, c| r >= u_act || off_d(c) || !on);

        // dense full-width qkv, with adapter deltas on active columns
        let width = w_attn.cols;
        let mut qkv = vec![vec![0.0; width]; t_len];
        for t in 0..t_len {
            let xn = rms(&x[t], &attn_norm, d, cfg.rms_eps);
            for c in 0..width {
                qkv[t][c] = (0..dm).map(|i| xn[i] * w_attn.at(i, c)).sum();
            }
            if let (Some(set), true) = (lora, on) {
                let bl = &set.blocks[l];
                for (site, base) in [(&bl.q, 0), (&bl.k, k_off), (&bl.v, v_off)] {
                    let a = Mat::of(&site.a);
                    let b = Mat::of(&site.b);
                    let low: Vec<f64> = (0..set.spec.rank)
                        .map(|r| (0..d).map(|i| a.at(r, i) * xn[i]).sum())
                        .collect();
                    for o in 0..b.data.len() / b.cols {
                        if qkv_active(base + o) {
                            qkv[t][base + o] += scale * (0..set.spec.rank).map(|r| b.at(o, r) * low[r]).sum::<f64>();
                        }
                    }
                }
            }
        }
        let mut heads = vec![vec![0.0; hm * dhm]; t_len];
        for hh in 0..hm {
            let g = hh / hpg;
            for t in 0..t_len {
                let s: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..dhm)
                            .map(|c| qkv[t][hh * dhm + c] * qkv[s][k_off + g * dhm + c])
                            .sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - m).exp()).sum();
                for c in 0..dhm {
                    heads[t][hh * dhm + c] = (0..=t)
                        .map(|si| (s[si] - m).exp() / z * qkv[si][v_off + g * dhm + c])
                        .sum();
                }
            }
        }
        for t in 0..t_len {
            for j in 0..dm {
                x[t][j] += (0..hm * dhm).map(|r| heads[t][r] * w_proj.at(r, j)).sum::<f64>();
            }
            let xn = rms(&x[t], &ffn_norm, d, cfg.rms_eps);
            let hidden: Vec<f64> = (0..w_gate.cols)
                .map(|u| {
                    let pre: f64 = (0..dm).map(|i| xn[i] * w_gate.at(i, u)).sum();
                    let up: f64 = (0..dm).map(|i| xn[i] * w_up.at(i, u)).sum();
                    silu(pre) * up
                })
                .collect();
            for j in 0..dm {
                x[t][j] += hidden.iter().enumerate().map(|(u, h)| h * w_down.at(u, j)).sum::<f64>();
            }
        }
    }
    x.iter()
        .map(|row| {
            let xn = rms(row, &final_norm, d, cfg.rms_eps);
            (0..vocab).map(|v| (0..dm).map(|i| xn[i] * lm_head.at(i, v)).sum()).collect()
        })
        .collect()
}
