use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Strided matrix view used to express transposes without copying.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, F> {
    pub d: &'a [F],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a, F: Float> MatView<'a, F> {
    pub fn row_major(d: &'a [F], rows: usize, cols: usize) -> Self {
        Self {
            d,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            d: self.d,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    pub fn maybe_t(self, t: bool) -> Self {
        if t {
            self.t()
        } else {
            self
        }
    }
}

/// `out (m×n, row-major) (+)= a · b`.
pub(crate) fn gemm<F: Float>(out: &mut [F], a: MatView<F>, b: MatView<F>, accumulate: bool) {
    debug_assert_eq!(a.cols, b.rows);
    F::gemm_raw(
        a.rows,
        a.cols,
        b.cols,
        a.d,
        a.rs,
        a.cs,
        b.d,
        b.rs,
        b.cs,
        out,
        b.cols as isize,
        1,
        accumulate,
    );
}

pub(crate) fn mat2<F: Float>(t: &Tensor<F>, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::Dimension {
            op,
            lhs: t.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok((t.shape()[0], t.shape()[1]))
}

pub(crate) fn matmul_values<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    ta: bool,
    tb: bool,
) -> Result<Tensor<F>> {
    let (ar, ac) = mat2(a, "matmul")?;
    let (br, bc) = mat2(b, "matmul")?;
    let av = MatView::row_major(a.data(), ar, ac).maybe_t(ta);
    let bv = MatView::row_major(b.data(), br, bc).maybe_t(tb);
    if av.cols != bv.rows {
        return Err(Error::Dimension {
            op: "matmul",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    let mut out = vec![F::zero(); av.rows * bv.cols];
    gemm(&mut out, av, bv, false);
    Tensor::new(vec![av.rows, bv.cols], out)
}

pub(crate) fn bmm_dims<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    tb: bool,
) -> Result<(usize, usize, usize, usize)> {
    let err = || Error::Dimension {
        op: "batch_matmul",
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    };
    if a.shape().len() != 3 || b.shape().len() != 3 || a.shape()[0] != b.shape()[0] {
        return Err(err());
    }
    let (n, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let (bk, bn) = if tb {
        (b.shape()[2], b.shape()[1])
    } else {
        (b.shape()[1], b.shape()[2])
    };
    if bk != k {
        return Err(err());
    }
    Ok((n, m, k, bn))
}

pub(crate) fn bmm_values<F: Float>(a: &Tensor<F>, b: &Tensor<F>, tb: bool) -> Result<Tensor<F>> {
    let (n, m, k, p) = bmm_dims(a, b, tb)?;
    let (br, bc) = (b.shape()[1], b.shape()[2]);
    let mut out = vec![F::zero(); n * m * p];
    for i in 0..n {
        let av = MatView::row_major(&a.data()[i * m * k..(i + 1) * m * k], m, k);
        let bv = MatView::row_major(&b.data()[i * br * bc..(i + 1) * br * bc], br, bc).maybe_t(tb);
        gemm(&mut out[i * m * p..(i + 1) * m * p], av, bv, false);
    }
    Tensor::new(vec![n, m, p], out)
}

pub(crate) fn same_shape<F: Float>(a: &Tensor<F>, b: &Tensor<F>, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn zip_values<F: Float>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    op: &'static str,
    f: impl Fn(F, F) -> F,
) -> Result<Tensor<F>> {
    same_shape(a, b, op)?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub(crate) fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

/// Row-wise softmax over the last axis. With `causal`, the tensor is viewed as
/// a stack of square `T×T` matrices and entry `(r, c)` with `c > r` is masked.
pub(crate) fn softmax_values<F: Float>(x: &Tensor<F>, causal: Option<usize>) -> Tensor<F> {
    let (rows, cols) = x.as_matrix();
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        let limit = match causal {
            Some(t) => (r % t) + 1,
            None => cols,
        };
        let row = &x.data()[r * cols..r * cols + limit];
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
        let o = &mut out[r * cols..r * cols + limit];
        let mut sum = F::zero();
        for (dst, &v) in o.iter_mut().zip(row) {
            *dst = (v - max).exp();
            sum += *dst;
        }
        for dst in o.iter_mut() {
            *dst = *dst / sum;
        }
    }
    Tensor::new(x.shape().to_vec(), out).expect("shape preserved")
}

/// Returns the normalized rows and the per-row inverse RMS.
pub(crate) fn rms_norm_values<F: Float>(
    x: &Tensor<F>,
    gamma: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, Vec<F>)> {
    let (rows, cols) = x.as_matrix();
    if gamma.numel() != cols {
        return Err(Error::Dimension {
            op: "rms_norm",
            lhs: x.shape().to_vec(),
            rhs: gamma.shape().to_vec(),
        });
    }
    let n = F::from_usize(cols).unwrap();
    let mut out = vec![F::zero(); rows * cols];
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = &x.data()[r * cols..(r + 1) * cols];
        let ms = row.iter().fold(F::zero(), |s, &v| s + v * v) / n;
        let ir = F::one() / (ms + eps).sqrt();
        inv.push(ir);
        for ((o, &v), &g) in out[r * cols..(r + 1) * cols]
            .iter_mut()
            .zip(row)
            .zip(gamma.data())
        {
            *o = v * ir * g;
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, inv))
}

pub(crate) fn select_values<F: Float>(
    x: &Tensor<F>,
    rows: &[usize],
    cols: &[usize],
) -> Result<Tensor<F>> {
    let (xr, xc) = mat2(x, "select")?;
    if rows.iter().any(|&r| r >= xr) || cols.iter().any(|&c| c >= xc) {
        return Err(Error::Input(format!(
            "select indices out of range for shape {:?}",
            x.shape()
        )));
    }
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &r in rows {
        let row = &x.data()[r * xc..(r + 1) * xc];
        if is_prefix(cols) {
            out.extend_from_slice(&row[..cols.len()]);
        } else {
            out.extend(cols.iter().map(|&c| row[c]));
        }
    }
    Tensor::new(vec![rows.len(), cols.len()], out)
}

pub(crate) fn is_prefix(idx: &[usize]) -> bool {
    idx.iter().enumerate().all(|(i, &v)| i == v)
}

/// Mean cross-entropy of row-wise logits against integer targets; also
/// returns the softmax probabilities.
pub(crate) fn cross_entropy_values<F: Float>(
    logits: &Tensor<F>,
    targets: &[usize],
) -> Result<(F, Vec<F>)> {
    let (rows, cols) = logits.as_matrix();
    if targets.len() != rows {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: logits.shape().to_vec(),
            rhs: vec![targets.len()],
        });
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
        return Err(Error::Input(format!("target {t} out of range for vocabulary {cols}")));
    }
    let probs = softmax_values(logits, None);
    let mut total = 0.0f64;
    for (r, &t) in targets.iter().enumerate() {
        let row = &logits.data()[r * cols..(r + 1) * cols];
        let max = row.iter().fold(F::neg_infinity(), |m, &v| m.max(v)).as_f64();
        let lse = row
            .iter()
            .map(|&v| (v.as_f64() - max).exp())
            .sum::<f64>()
            .ln()
            + max;
        total += lse - row[t].as_f64();
    }
    Ok((F::from_f64_lossy(total / rows as f64), probs.into_data()))
}
