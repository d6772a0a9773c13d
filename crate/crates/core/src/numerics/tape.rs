//! Computation record and reverse sweep.
//!
//! Every op appends its output to the tape. When recording, the op and any
//! activations its backward rule needs are kept alongside; `backward` walks
//! the record in exact reverse order.

use std::sync::Arc;

use super::ops::{self, gemm, MatView};
use super::{Float, Tensor};
use crate::error::{contract, Error, Result};
use crate::kd::DistillLoss;

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One recorded operation.
#[derive(Clone)]
pub enum Op<F: Float> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        s: F,
    },
    Sigmoid {
        a: Var,
    },
    Silu {
        a: Var,
    },
    RmsNorm {
        x: Var,
        gamma: Var,
        eps: F,
    },
    Softmax {
        a: Var,
        causal: Option<usize>,
    },
    /// `out[i] = a[index[i]]` over flattened storage.
    Gather {
        a: Var,
        index: Arc<[u32]>,
        shape: Vec<usize>,
    },
    /// Submatrix by row and column index lists.
    Select {
        a: Var,
        rows: Arc<[usize]>,
        cols: Arc<[usize]>,
    },
    /// Column-wise concatenation of 2-D tensors with equal row counts.
    Concat {
        parts: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        targets: Arc<[usize]>,
    },
    /// Distillation divergence of student logits against constant teacher logits.
    Distill {
        student: Var,
        teacher: Arc<Tensor<F>>,
        loss: Arc<dyn DistillLoss>,
        temperature: f64,
    },
    Sum {
        a: Var,
    },
}

impl<F: Float> Op<F> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Add { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Silu { .. } => "silu",
            Op::RmsNorm { .. } => "rms_norm",
            Op::Softmax { .. } => "softmax",
            Op::Gather { .. } => "gather",
            Op::Select { .. } => "select",
            Op::Concat { .. } => "concat",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Distill { .. } => "distill",
            Op::Sum { .. } => "sum",
        }
    }

    pub fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. }
            | Op::BatchMatMul { a, b, .. }
            | Op::Add { a, b }
            | Op::Mul { a, b } => vec![*a, *b],
            Op::RmsNorm { x, gamma, .. } => vec![*x, *gamma],
            Op::Scale { a, .. }
            | Op::Sigmoid { a }
            | Op::Silu { a }
            | Op::Softmax { a, .. }
            | Op::Gather { a, .. }
            | Op::Select { a, .. }
            | Op::Sum { a } => vec![*a],
            Op::Concat { parts } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Distill { student, .. } => vec![*student],
        }
    }
}

/// Append-only record of values and the ops that produced them.
pub struct Tape<F: Float> {
    values: Vec<Tensor<F>>,
    ops: Vec<Op<F>>,
    saved: Vec<Option<Vec<F>>>,
    needs_grad: Vec<bool>,
    recording: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Float> Tape<F> {
    /// A tape that records ops for a later backward pass.
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            saved: Vec::new(),
            needs_grad: Vec::new(),
            recording: true,
        }
    }

    /// A tape that only evaluates; `backward` is unavailable.
    pub fn inference() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.values[v.0]
    }

    pub fn op(&self, v: Var) -> &Op<F> {
        &self.ops[v.0]
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.needs_grad[v.0]
    }

    /// Leaf whose gradient is tracked iff `t.requires_grad`.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let ng = t.requires_grad && self.recording;
        self.push_raw(t, Op::Leaf, None, ng)
    }

    /// Leaf with gradient tracking forced on.
    pub fn param(&mut self, t: Tensor<F>) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn constant(&mut self, mut t: Tensor<F>) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    fn push_raw(&mut self, t: Tensor<F>, op: Op<F>, saved: Option<Vec<F>>, ng: bool) -> Var {
        self.values.push(t);
        if self.recording {
            self.ops.push(op);
            self.saved.push(saved);
        } else {
            self.ops.push(Op::Leaf);
            self.saved.push(None);
        }
        self.needs_grad.push(ng);
        Var(self.values.len() - 1)
    }

    fn push(&mut self, op: Op<F>) -> Result<Var> {
        let ng = self.recording && op.inputs().iter().any(|v| self.needs_grad[v.0]);
        let (out, saved) = compute(&op, &self.values)?;
        Ok(self.push_raw(out, op, if ng { saved } else { None }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul {
            a,
            b,
            ta: false,
            tb: false,
        })
    }

    /// `op(a) · op(b)` with optional transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        self.push(Op::MatMul { a, b, ta, tb })
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        self.push(Op::BatchMatMul { a, b, tb })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, s: F) -> Result<Var> {
        self.push(Op::Scale { a, s })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid { a })
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Silu { a })
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: F) -> Result<Var> {
        if !(eps > F::zero()) {
            return Err(contract("rms_norm eps must be positive"));
        }
        self.push(Op::RmsNorm { x, gamma, eps })
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax { a, causal: None })
    }

    /// Softmax over the last axis of a `[n, T, T]` stack with future positions masked.
    pub fn causal_softmax(&mut self, a: Var) -> Result<Var> {
        let s = self.values[a.0].shape().to_vec();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Dimension {
                op: "causal_softmax",
                lhs: s,
                rhs: vec![],
            });
        }
        self.push(Op::Softmax {
            a,
            causal: Some(s[1]),
        })
    }

    pub fn gather(&mut self, a: Var, index: Arc<[u32]>, shape: Vec<usize>) -> Result<Var> {
        self.push(Op::Gather { a, index, shape })
    }

    pub fn select(&mut self, a: Var, rows: Arc<[usize]>, cols: Arc<[usize]>) -> Result<Var> {
        self.push(Op::Select { a, rows, cols })
    }

    pub fn concat(&mut self, parts: Vec<Var>) -> Result<Var> {
        self.push(Op::Concat { parts })
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: Arc<[usize]>) -> Result<Var> {
        self.push(Op::CrossEntropy { logits, targets })
    }

    pub fn distill(
        &mut self,
        student: Var,
        teacher: Arc<Tensor<F>>,
        loss: Arc<dyn DistillLoss>,
        temperature: f64,
    ) -> Result<Var> {
        self.push(Op::Distill {
            student,
            teacher,
            loss,
            temperature,
        })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum { a })
    }

    /// Re-evaluates every recorded op from the stored leaves.
    pub fn replay(&self) -> Result<Vec<Tensor<F>>> {
        if !self.recording {
            return Err(contract("replay requires a recording tape"));
        }
        let mut vals: Vec<Tensor<F>> = Vec::with_capacity(self.values.len());
        for (i, op) in self.ops.iter().enumerate() {
            let v = match op {
                Op::Leaf => self.values[i].clone(),
                _ => compute(op, &vals)?.0,
            };
            vals.push(v);
        }
        Ok(vals)
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        if !self.recording {
            return Err(contract("backward on an inference tape"));
        }
        if self.values[loss.0].numel() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.values[loss.0].shape()
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.values.len()];
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.needs_grad[i] {
                continue;
            }
            if let Op::Leaf = self.ops[i] {
                grads[i] = Some(g);
                continue;
            }
            self.backprop(i, &g, &mut grads);
            // only leaves keep their gradients
        }
        let out = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.ops[i], Op::Leaf))
                    .map(|d| Tensor::new(self.values[i].shape().to_vec(), d).expect("grad shape"))
            })
            .collect();
        Ok(Gradients {
            grads: out,
            shapes: self.values.iter().map(|v| v.shape().to_vec()).collect(),
        })
    }

    fn backprop(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let vals = &self.values;
        let out = &vals[i];
        let ng = |v: &Var| self.needs_grad[v.0];
        match &self.ops[i] {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let am = MatView::row_major(av.data(), av.shape()[0], av.shape()[1]);
                let bm = MatView::row_major(bv.data(), bv.shape()[0], bv.shape()[1]);
                let ah = am.maybe_t(*ta);
                let bh = bm.maybe_t(*tb);
                let gm = MatView::row_major(g, ah.rows, bh.cols);
                if ng(a) {
                    let dst = acc_buf(grads, a.0, av.numel());
                    if *ta {
                        gemm(dst, bh, gm.t(), true);
                    } else {
                        gemm(dst, gm, bh.t(), true);
                    }
                }
                if ng(b) {
                    let dst = acc_buf(grads, b.0, bv.numel());
                    if *tb {
                        gemm(dst, gm.t(), ah, true);
                    } else {
                        gemm(dst, ah.t(), gm, true);
                    }
                }
            }
            Op::BatchMatMul { a, b, tb } => {
                let (av, bv) = (&vals[a.0], &vals[b.0]);
                let (n, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let (br, bc) = (bv.shape()[1], bv.shape()[2]);
                let p = out.shape()[2];
                if ng(a) {
                    let dst = acc_buf(grads, a.0, av.numel());
                    for s in 0..n {
                        let bh = MatView::row_major(&bv.data()[s * br * bc..(s + 1) * br * bc], br, bc)
                            .maybe_t(*tb);
                        let gm = MatView::row_major(&g[s * m * p..(s + 1) * m * p], m, p);
                        gemm(&mut dst[s * m * k..(s + 1) * m * k], gm, bh.t(), true);
                    }
                }
                if ng(b) {
                    let dst = acc_buf(grads, b.0, bv.numel());
                    for s in 0..n {
                        let ah = MatView::row_major(&av.data()[s * m * k..(s + 1) * m * k], m, k);
                        let gm = MatView::row_major(&g[s * m * p..(s + 1) * m * p], m, p);
                        let d = &mut dst[s * br * bc..(s + 1) * br * bc];
                        if *tb {
                            gemm(d, gm.t(), ah, true);
                        } else {
                            gemm(d, ah.t(), gm, true);
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if ng(v) {
                        add_into(acc_buf(grads, v.0, g.len()), g.iter().copied());
                    }
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (vals[a.0].data(), vals[b.0].data());
                if ng(a) {
                    add_into(
                        acc_buf(grads, a.0, g.len()),
                        g.iter().zip(bv).map(|(&gg, &y)| gg * y),
                    );
                }
                if ng(b) {
                    add_into(
                        acc_buf(grads, b.0, g.len()),
                        g.iter().zip(av).map(|(&gg, &x)| gg * x),
                    );
                }
            }
            Op::Scale { a, s } => {
                add_into(acc_buf(grads, a.0, g.len()), g.iter().map(|&gg| gg * *s));
            }
            Op::Sigmoid { a } => {
                let y = out.data();
                add_into(
                    acc_buf(grads, a.0, g.len()),
                    g.iter().zip(y).map(|(&gg, &s)| gg * s * (F::one() - s)),
                );
            }
            Op::Silu { a } => {
                let x = vals[a.0].data();
                add_into(
                    acc_buf(grads, a.0, g.len()),
                    g.iter().zip(x).map(|(&gg, &xv)| {
                        let s = ops::sigmoid(xv);
                        gg * s * (F::one() + xv * (F::one() - s))
                    }),
                );
            }
            Op::RmsNorm { x, gamma, .. } => {
                let inv = self.saved[i].as_ref().expect("rms_norm saved inverse rms");
                let xv = vals[x.0].data();
                let gm = vals[gamma.0].data();
                let (rows, cols) = vals[x.0].as_matrix();
                let n = F::from_usize(cols).unwrap();
                if ng(gamma) {
                    let dst = acc_buf(grads, gamma.0, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            dst[c] += g[r * cols + c] * xv[r * cols + c] * inv[r];
                        }
                    }
                }
                if ng(x) {
                    let dst = acc_buf(grads, x.0, rows * cols);
                    for r in 0..rows {
                        let ir = inv[r];
                        let row = r * cols..(r + 1) * cols;
                        let dot = g[row.clone()]
                            .iter()
                            .zip(&gm[..])
                            .zip(&xv[row.clone()])
                            .fold(F::zero(), |s, ((&gg, &ga), &xx)| s + gg * ga * xx);
                        let coef = ir * ir * ir * dot / n;
                        for c in 0..cols {
                            let j = r * cols + c;
                            dst[j] += ir * gm[c] * g[j] - coef * xv[j];
                        }
                    }
                }
            }
            Op::Softmax { a, .. } => {
                let y = out.data();
                let (rows, cols) = out.as_matrix();
                let dst = acc_buf(grads, a.0, rows * cols);
                for r in 0..rows {
                    let row = r * cols..(r + 1) * cols;
                    let dot = g[row.clone()]
                        .iter()
                        .zip(&y[row.clone()])
                        .fold(F::zero(), |s, (&gg, &yy)| s + gg * yy);
                    for j in row {
                        dst[j] += y[j] * (g[j] - dot);
                    }
                }
            }
            Op::Gather { a, index, .. } => {
                let dst = acc_buf(grads, a.0, vals[a.0].numel());
                for (&gg, &ix) in g.iter().zip(index.iter()) {
                    dst[ix as usize] += gg;
                }
            }
            Op::Select { a, rows, cols } => {
                let xc = vals[a.0].shape()[1];
                let dst = acc_buf(grads, a.0, vals[a.0].numel());
                let nc = cols.len();
                for (ri, &r) in rows.iter().enumerate() {
                    for (ci, &c) in cols.iter().enumerate() {
                        dst[r * xc + c] += g[ri * nc + ci];
                    }
                }
            }
            Op::Concat { parts } => {
                let total = out.shape()[1];
                let rows = out.shape()[0];
                let mut off = 0;
                for p in parts {
                    let pc = vals[p.0].shape()[1];
                    if ng(p) {
                        let dst = acc_buf(grads, p.0, rows * pc);
                        for r in 0..rows {
                            for c in 0..pc {
                                dst[r * pc + c] += g[r * total + off + c];
                            }
                        }
                    }
                    off += pc;
                }
            }
            Op::CrossEntropy { logits, targets } => {
                let probs = self.saved[i].as_ref().expect("cross_entropy saved probs");
                let (rows, cols) = vals[logits.0].as_matrix();
                let scale = g[0] / F::from_usize(rows).unwrap();
                let dst = acc_buf(grads, logits.0, rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        let mut d = probs[r * cols + c];
                        if c == targets[r] {
                            d -= F::one();
                        }
                        dst[r * cols + c] += scale * d;
                    }
                }
            }
            Op::Distill { student, .. } => {
                let local = self.saved[i].as_ref().expect("distill saved gradient");
                add_into(
                    acc_buf(grads, student.0, local.len()),
                    local.iter().map(|&d| d * g[0]),
                );
            }
            Op::Sum { a } => {
                let n = vals[a.0].numel();
                add_into(acc_buf(grads, a.0, n), std::iter::repeat_n(g[0], n));
            }
        }
    }
}

fn acc_buf<F: Float>(grads: &mut [Option<Vec<F>>], i: usize, n: usize) -> &mut [F] {
    grads[i].get_or_insert_with(|| vec![F::zero(); n])
}

fn add_into<F: Float>(dst: &mut [F], src: impl Iterator<Item = F>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Evaluates one op against already-computed input values.
fn compute<F: Float>(op: &Op<F>, vals: &[Tensor<F>]) -> Result<(Tensor<F>, Option<Vec<F>>)> {
    let v = |x: &Var| &vals[x.0];
    Ok(match op {
        Op::Leaf => return Err(contract("leaf has no computation")),
        Op::MatMul { a, b, ta, tb } => (ops::matmul_values(v(a), v(b), *ta, *tb)?, None),
        Op::BatchMatMul { a, b, tb } => (ops::bmm_values(v(a), v(b), *tb)?, None),
        Op::Add { a, b } => (ops::zip_values(v(a), v(b), "add", |x, y| x + y)?, None),
        Op::Mul { a, b } => (ops::zip_values(v(a), v(b), "mul", |x, y| x * y)?, None),
        Op::Scale { a, s } => (v(a).map(|x| x * *s), None),
        Op::Sigmoid { a } => (v(a).map(ops::sigmoid), None),
        Op::Silu { a } => (v(a).map(|x| x * ops::sigmoid(x)), None),
        Op::RmsNorm { x, gamma, eps } => {
            let (y, inv) = ops::rms_norm_values(v(x), v(gamma), *eps)?;
            (y, Some(inv))
        }
        Op::Softmax { a, causal } => (ops::softmax_values(v(a), *causal), None),
        Op::Gather { a, index, shape } => {
            let src = v(a).data();
            if let Some(&bad) = index.iter().find(|&&i| i as usize >= src.len()) {
                return Err(Error::Input(format!(
                    "gather index {bad} out of range for {} elements",
                    src.len()
                )));
            }
            let data = index.iter().map(|&i| src[i as usize]).collect();
            (Tensor::new(shape.clone(), data)?, None)
        }
        Op::Select { a, rows, cols } => (ops::select_values(v(a), rows, cols)?, None),
        Op::Concat { parts } => {
            let first = v(&parts[0]);
            let (rows, _) = ops::mat2(first, "concat")?;
            let mut total = 0;
            for p in parts {
                let (r, c) = ops::mat2(v(p), "concat")?;
                if r != rows {
                    return Err(Error::Dimension {
                        op: "concat",
                        lhs: first.shape().to_vec(),
                        rhs: v(p).shape().to_vec(),
                    });
                }
                total += c;
            }
            let mut data = Vec::with_capacity(rows * total);
            for r in 0..rows {
                for p in parts {
                    let t = v(p);
                    let c = t.shape()[1];
                    data.extend_from_slice(&t.data()[r * c..(r + 1) * c]);
                }
            }
            (Tensor::new(vec![rows, total], data)?, None)
        }
        Op::CrossEntropy { logits, targets } => {
            let (loss, probs) = ops::cross_entropy_values(v(logits), targets)?;
            (Tensor::scalar(loss), Some(probs))
        }
        Op::Distill {
            student,
            teacher,
            loss,
            temperature,
        } => {
            let s = v(student);
            ops::same_shape(s, teacher, "distill")?;
            if !s.all_finite() || !teacher.all_finite() {
                return Err(Error::NonFinite(format!("{} logits", loss.name())));
            }
            let (rows, cols) = s.as_matrix();
            let sd: Vec<f64> = s.data().iter().map(|x| x.as_f64()).collect();
            let td: Vec<f64> = teacher.data().iter().map(|x| x.as_f64()).collect();
            let (l, grad) = loss.loss_and_grad(&td, &sd, rows, cols, *temperature);
            (
                Tensor::scalar(F::from_f64_lossy(l)),
                Some(grad.into_iter().map(F::from_f64_lossy).collect()),
            )
        }
        Op::Sum { a } => (Tensor::scalar(v(a).data().iter().copied().sum()), None),
    })
}

/// Gradients of a scalar with respect to every leaf on the tape.
pub struct Gradients<F> {
    grads: Vec<Option<Tensor<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of `v`; zeros when `v` is not on a path to the loss.
    pub fn wrt(&self, v: Var) -> Tensor<F> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }

    pub fn get(&self, v: Var) -> Option<&Tensor<F>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<F>> {
        self.grads[v.0].take()
    }
}
