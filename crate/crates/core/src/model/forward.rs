use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{SuperNetConfig, SuperNetWeights, BLOCK_TENSORS, LORA_SITES};
use crate::error::{Error, Result};
use crate::numerics::{Float, Tape, Tensor, Var};
use crate::search::SubNetworkConfig;

/// Byte tokens laid out `batch × seq`, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub tokens: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, tokens: Vec<u32>) -> Result<Self> {
        if batch == 0 || seq == 0 || tokens.len() != batch * seq {
            return Err(Error::Input(format!(
                "token batch {batch}×{seq} does not match {} tokens",
                tokens.len()
            )));
        }
        Ok(Self { batch, seq, tokens })
    }

    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::Input("token rows differ in length".into()));
        }
        Self::new(rows.len(), seq, rows.concat())
    }
}

/// Which tape leaves receive gradients.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    Nothing,
    Base,
    Adapters,
}

/// Tape handles for every weight of a super-network.
#[derive(Clone, Debug)]
pub struct BoundWeights {
    emb: Var,
    pos: Var,
    blocks: Vec<[Var; 7]>,
    final_norm: Var,
    lm_head: Var,
    lora: Option<BoundLora>,
    names: Vec<(String, Var)>,
}

#[derive(Clone, Debug)]
struct BoundLora {
    scale: f64,
    dropout: f64,
    rank: usize,
    emb: (Var, Var),
    blocks: Vec<[(Var, Var); 3]>,
}

impl BoundWeights {
    /// Every bound tensor under its checkpoint name.
    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.names
    }
}

/// Places the weights on `tape` as leaves.
pub fn bind_weights<F: Float>(tape: &mut Tape<F>, w: &SuperNetWeights<F>, trainable: Trainable) -> BoundWeights {
    let base_grad = trainable == Trainable::Base;
    let lora_grad = trainable == Trainable::Adapters;
    let mut names = Vec::new();
    let mut put = |tape: &mut Tape<F>, name: String, t: &Tensor<F>, grad: bool| {
        let v = if grad { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        names.push((name, v));
        v
    };
    let emb = put(tape, "emb".into(), &w.emb, base_grad);
    let pos = put(tape, "pos".into(), &w.pos, base_grad);
    let blocks = w
        .blocks
        .iter()
        .enumerate()
        .map(|(l, b)| {
            let ts = b.tensors();
            std::array::from_fn(|i| put(tape, format!("blocks.{l}.{}", BLOCK_TENSORS[i]), ts[i], base_grad))
        })
        .collect();
    let final_norm = put(tape, "final_norm".into(), &w.final_norm, base_grad);
    let lm_head = put(tape, "lm_head".into(), &w.lm_head, base_grad);
    let lora = w.lora.as_ref().map(|set| {
        let emb = (
            put(tape, "lora.emb.a".into(), &set.emb.a, lora_grad),
            put(tape, "lora.emb.b".into(), &set.emb.b, lora_grad),
        );
        let blocks = set
            .blocks
            .iter()
            .enumerate()
            .map(|(l, b)| {
                let ads = [&b.q, &b.k, &b.v];
                std::array::from_fn(|i| {
                    let site = LORA_SITES[i];
                    (
                        put(tape, format!("lora.blocks.{l}.{site}.a"), &ads[i].a, lora_grad),
                        put(tape, format!("lora.blocks.{l}.{site}.b"), &ads[i].b, lora_grad),
                    )
                })
            })
            .collect();
        BoundLora {
            scale: set.spec.scale(),
            dropout: set.spec.dropout,
            rank: set.spec.rank,
            emb,
            blocks,
        }
    });
    BoundWeights {
        emb,
        pos,
        blocks,
        final_norm,
        lm_head,
        lora,
        names,
    }
}

/// Per-pass switches.
#[derive(Default)]
pub struct ForwardOptions<'a> {
    pub trace: bool,
    /// Adapter-input dropout stream; `None` disables dropout.
    pub dropout: Option<&'a mut ChaCha8Rng>,
    /// Explicit block list in forward order, overriding the depth rule.
    pub blocks: Option<Vec<usize>>,
}

/// Activations recorded during a traced pass. Row `i` of every tensor is
/// position `i % t` of batch item `i / t`.
#[derive(Clone, Debug)]
pub struct ForwardTrace<F> {
    pub b: usize,
    pub t: usize,
    /// Super-network indices of the executed blocks.
    pub blocks: Vec<usize>,
    pub block_inputs: Vec<Tensor<F>>,
    pub block_outputs: Vec<Tensor<F>>,
    /// Every RMSNorm output: two per block, then the final norm.
    pub norm_outputs: Vec<Tensor<F>>,
    /// Gate pre-activations `X·W_gate`, `[B·T, U']` per block.
    pub ffn_pre: Vec<Tensor<F>>,
    /// Concatenated head outputs before the output projection, `[B·T, H'·d_head']`.
    pub attn_heads: Vec<Tensor<F>>,
    pub kv_group_of_head: Vec<usize>,
    pub n_groups: usize,
    pub d_head: usize,
}

fn check_inputs(cfg: &SuperNetConfig, theta: &SubNetworkConfig, batch: &TokenBatch) -> Result<()> {
    theta.check_fits(cfg)?;
    if batch.seq > cfg.max_seq_len {
        return Err(Error::Input(format!(
            "sequence length {} exceeds max_seq_len {}",
            batch.seq, cfg.max_seq_len
        )));
    }
    if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(Error::Input(format!("token {t} out of range for vocabulary {}", cfg.vocab_size)));
    }
    Ok(())
}

fn dropout<F: Float>(tape: &mut Tape<F>, x: Var, p: f64, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
    let Some(rng) = rng else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let keep = F::from_f64_lossy(1.0 / (1.0 - p));
    let shape = tape.value(x).shape().to_vec();
    let n = tape.value(x).numel();
    let mask: Vec<F> = (0..n)
        .map(|_| if rng.random::<f64>() < p { F::zero() } else { keep })
        .collect();
    let m = tape.constant(Tensor::new(shape, mask)?);
    tape.mul(x, m)
}

fn arc<T: Clone>(v: Vec<T>) -> Arc<[T]> {
    v.into()
}

/// Records one forward pass of sub-network `theta` and returns the
/// `[B·T, V]` logits.
pub fn forward_on_tape<F: Float>(
    tape: &mut Tape<F>,
    w: &SuperNetWeights<F>,
    bound: &BoundWeights,
    theta: &SubNetworkConfig,
    batch: &TokenBatch,
    opts: &mut ForwardOptions<'_>,
) -> Result<(Var, Option<ForwardTrace<F>>)> {
    let cfg = &w.cfg;
    check_inputs(cfg, theta, batch)?;
    let blocks = match opts.blocks.clone() {
        Some(list) => {
            if list.iter().any(|&l| l >= cfg.n_layers_max) || list.windows(2).any(|p| p[0] >= p[1]) {
                return Err(Error::Input(format!("invalid block list {list:?}")));
            }
            list
        }
        None => w.active_blocks(theta.n_layers),
    };
    let (b, t) = (batch.batch, batch.seq);
    let bt = b * t;
    let (d, dm) = (theta.d_model, cfg.d_model_max);
    let (h, g) = (theta.n_heads, theta.n_groups(cfg));
    let (dh, dhm) = (theta.d_head, cfg.d_head_max);
    let u = theta.ffn_hidden(cfg);
    let hpg = cfg.heads_per_group();
    let v = cfg.vocab_size;
    let eps = F::from_f64_lossy(cfg.rms_eps);

    let mut trace = opts.trace.then(|| ForwardTrace {
        b,
        t,
        blocks: blocks.clone(),
        block_inputs: Vec::new(),
        block_outputs: Vec::new(),
        norm_outputs: Vec::new(),
        ffn_pre: Vec::new(),
        attn_heads: Vec::new(),
        kv_group_of_head: (0..h).map(|i| i / hpg).collect(),
        n_groups: g,
        d_head: dh,
    });
    macro_rules! record {
        ($field:ident, $var:expr) => {
            if let Some(tr) = trace.as_mut() {
                tr.$field.push(tape.value($var).clone());
            }
        };
    }

    let mut idx = Vec::with_capacity(bt * d);
    for &tok in &batch.tokens {
        idx.extend((0..d).map(|c| tok * dm as u32 + c as u32));
    }
    let mut x = tape.gather(bound.emb, arc(idx), vec![bt, d])?;
    let mut idx = Vec::with_capacity(bt * d);
    for i in 0..bt {
        idx.extend((0..d).map(|c| ((i % t) * dm + c) as u32));
    }
    let p = tape.gather(bound.pos, arc(idx), vec![bt, d])?;
    x = tape.add(x, p)?;
    if let Some(lb) = &bound.lora {
        let r = lb.rank;
        let mut idx = Vec::with_capacity(bt * r);
        for &tok in &batch.tokens {
            idx.extend((0..r).map(|k| (k * v) as u32 + tok));
        }
        let a = tape.gather(lb.emb.0, arc(idx), vec![bt, r])?;
        let bs = tape.select(lb.emb.1, arc((0..d).collect()), arc((0..r).collect()))?;
        let delta = tape.matmul_t(a, bs, false, true)?;
        let delta = tape.scale(delta, F::from_f64_lossy(lb.scale))?;
        x = tape.add(x, delta)?;
    }

    let d_idx: Arc<[usize]> = arc((0..d).collect());
    let gamma_idx: Arc<[u32]> = arc((0..d as u32).collect());
    let head_rows: Vec<usize> = (0..h).flat_map(|i| (0..dh).map(move |c| i * dhm + c)).collect();
    let group_rows: Vec<usize> = (0..g).flat_map(|i| (0..dh).map(move |c| i * dhm + c)).collect();
    let k_off = cfg.n_heads_max * dhm;
    let v_off = k_off + cfg.n_groups_max * dhm;
    let qkv_cols: Arc<[usize]> = arc(
        head_rows
            .iter()
            .copied()
            .chain(group_rows.iter().map(|&c| k_off + c))
            .chain(group_rows.iter().map(|&c| v_off + c))
            .collect(),
    );
    let site_rows = [arc(head_rows.clone()), arc(group_rows.clone()), arc(group_rows)];
    let head_rows = arc(head_rows);
    let ffn_idx: Arc<[usize]> = arc((0..u).collect());

    // [B·T, (H'+2G')·dh] -> per-head [B·H', T, dh] stacks
    let width = (h + 2 * g) * dh;
    let mut q_idx = Vec::with_capacity(b * h * t * dh);
    let mut k_idx = Vec::with_capacity(b * h * t * dh);
    let mut v_idx = Vec::with_capacity(b * h * t * dh);
    for bi in 0..b {
        for hi in 0..h {
            let gi = hi / hpg;
            for ti in 0..t {
                let row = (bi * t + ti) * width;
                for c in 0..dh {
                    q_idx.push((row + hi * dh + c) as u32);
                    k_idx.push((row + h * dh + gi * dh + c) as u32);
                    v_idx.push((row + (h + g) * dh + gi * dh + c) as u32);
                }
            }
        }
    }
    let (q_idx, k_idx, v_idx) = (arc(q_idx), arc(k_idx), arc(v_idx));
    let mut merge_idx = Vec::with_capacity(bt * h * dh);
    for bi in 0..b {
        for ti in 0..t {
            for hi in 0..h {
                merge_idx.extend((0..dh).map(|c| (((bi * h + hi) * t + ti) * dh + c) as u32));
            }
        }
    }
    let merge_idx = arc(merge_idx);
    let stack = vec![b * h, t, dh];
    let inv_sqrt = F::from_f64_lossy(1.0 / (dh as f64).sqrt());

    for &l in &blocks {
        let [attn_norm, w_attn, w_proj, ffn_norm, w_gate, w_up, w_down] = bound.blocks[l];
        record!(block_inputs, x);
        let gamma = tape.gather(attn_norm, gamma_idx.clone(), vec![d])?;
        let xn = tape.rms_norm(x, gamma, eps)?;
        record!(norm_outputs, xn);
        let wa = tape.select(w_attn, d_idx.clone(), qkv_cols.clone())?;
        let mut qkv = tape.matmul(xn, wa)?;
        if let Some(lb) = &bound.lora {
            let rank_idx: Arc<[usize]> = arc((0..lb.rank).collect());
            let mut parts = Vec::with_capacity(3);
            for (site, rows) in lb.blocks[l].iter().zip(&site_rows) {
                let xin = dropout(tape, xn, lb.dropout, opts.dropout.as_deref_mut())?;
                let a = tape.select(site.0, rank_idx.clone(), d_idx.clone())?;
                let low = tape.matmul_t(xin, a, false, true)?;
                let bs = tape.select(site.1, rows.clone(), rank_idx.clone())?;
                parts.push(tape.matmul_t(low, bs, false, true)?);
            }
            let delta = tape.concat(parts)?;
            let delta = tape.scale(delta, F::from_f64_lossy(lb.scale))?;
            qkv = tape.add(qkv, delta)?;
        }
        let q = tape.gather(qkv, q_idx.clone(), stack.clone())?;
        let k = tape.gather(qkv, k_idx.clone(), stack.clone())?;
        let vv = tape.gather(qkv, v_idx.clone(), stack.clone())?;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, inv_sqrt)?;
        let probs = tape.causal_softmax(scores)?;
        let o = tape.batch_matmul(probs, vv, false)?;
        let heads = tape.gather(o, merge_idx.clone(), vec![bt, h * dh])?;
        record!(attn_heads, heads);
        let wp = tape.select(w_proj, head_rows.clone(), d_idx.clone())?;
        let attn = tape.matmul(heads, wp)?;
        x = tape.add(x, attn)?;

        let gamma = tape.gather(ffn_norm, gamma_idx.clone(), vec![d])?;
        let xn = tape.rms_norm(x, gamma, eps)?;
        record!(norm_outputs, xn);
        let wg = tape.select(w_gate, d_idx.clone(), ffn_idx.clone())?;
        let pre = tape.matmul(xn, wg)?;
        record!(ffn_pre, pre);
        let wu = tape.select(w_up, d_idx.clone(), ffn_idx.clone())?;
        let up = tape.matmul(xn, wu)?;
        let act = tape.silu(pre)?;
        let hidden = tape.mul(act, up)?;
        let wd = tape.select(w_down, ffn_idx.clone(), d_idx.clone())?;
        let down = tape.matmul(hidden, wd)?;
        x = tape.add(x, down)?;
        record!(block_outputs, x);
    }

    let gamma = tape.gather(bound.final_norm, gamma_idx, vec![d])?;
    let xf = tape.rms_norm(x, gamma, eps)?;
    record!(norm_outputs, xf);
    let head = tape.select(bound.lm_head, d_idx, arc((0..v).collect()))?;
    let logits = tape.matmul(xf, head)?;
    Ok((logits, trace))
}

fn run<F: Float>(
    w: &SuperNetWeights<F>,
    theta: &SubNetworkConfig,
    batch: &TokenBatch,
    trace: bool,
    blocks: Option<Vec<usize>>,
) -> Result<(Tensor<F>, Option<ForwardTrace<F>>)> {
    let mut tape = Tape::inference();
    let bound = bind_weights(&mut tape, w, Trainable::Nothing);
    let mut opts = ForwardOptions {
        trace,
        dropout: None,
        blocks,
    };
    let (logits, tr) = forward_on_tape(&mut tape, w, &bound, theta, batch, &mut opts)?;
    let out = tape.value(logits).clone().reshape(&[batch.batch, batch.seq, w.cfg.vocab_size])?;
    Ok((out, tr))
}

/// Logits `[B, T, V]` of sub-network `theta`.
pub fn forward<F: Float>(w: &SuperNetWeights<F>, theta: &SubNetworkConfig, batch: &TokenBatch) -> Result<Tensor<F>> {
    Ok(run(w, theta, batch, false, None)?.0)
}

/// Logits together with the activation trace.
pub fn forward_traced<F: Float>(
    w: &SuperNetWeights<F>,
    theta: &SubNetworkConfig,
    batch: &TokenBatch,
) -> Result<(Tensor<F>, ForwardTrace<F>)> {
    let (out, tr) = run(w, theta, batch, true, None)?;
    Ok((out, tr.expect("trace requested")))
}

/// Logits with an explicit block list; omitted blocks pass the residual through.
pub fn forward_blocks<F: Float>(
    w: &SuperNetWeights<F>,
    theta: &SubNetworkConfig,
    batch: &TokenBatch,
    blocks: &[usize],
) -> Result<Tensor<F>> {
    Ok(run(w, theta, batch, false, Some(blocks.to_vec()))?.0)
}

/// Mean next-token cross-entropy of `[.., V]` logits.
pub fn lm_loss<F: Float>(logits: &Tensor<F>, targets: &[usize]) -> Result<f64> {
    let (rows, cols) = logits.as_matrix();
    let flat = logits.clone().reshape(&[rows, cols])?;
    let mut tape = Tape::inference();
    let l = tape.constant(flat);
    let loss = tape.cross_entropy(l, targets.into())?;
    Ok(tape.value(loss).data()[0].as_f64())
}
