//! Forward kernels shared by the differentiable graph and the cached
//! inference path.

use super::{NumericsError, Tensor};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// `out = alpha * op(a) * op(b) + beta * out` over raw row-major buffers,
/// where `op` optionally transposes. `a` is stored `a_rows × a_cols`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[f64],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
    out: &mut [f64],
    beta: f64,
) {
    let (m, k) = if trans_a { (a_cols, a_rows) } else { (a_rows, a_cols) };
    let (k2, n) = if trans_b { (b_cols, b_rows) } else { (b_rows, b_cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!(a.len(), a_rows * a_cols);
    assert_eq!(b.len(), b_rows * b_cols);
    assert_eq!(out.len(), m * n);
    let (rsa, csa) = if trans_a { (1, a_cols) } else { (a_cols, 1) };
    let (rsb, csb) = if trans_b { (1, b_cols) } else { (b_cols, 1) };
    // SAFETY: the asserts above bound every index dgemm touches by the
    // lengths of the three slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn require_matrix(op: &'static str, t: &Tensor) -> Result<(), NumericsError> {
    if t.shape().len() != 2 {
        return Err(NumericsError::NotMatrix {
            op,
            shape: t.shape().to_vec(),
        });
    }
    Ok(())
}

/// Matrix product `a × b`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    require_matrix("matmul", a)?;
    require_matrix("matmul", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (k2, n) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), m, k, false, b.data(), k, n, false, &mut out, 0.0);
    Ok(Tensor::matrix(m, n, out))
}

/// Matrix product `a × bᵀ`, with `b` stored `n × k`.
pub fn matmul_t(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    require_matrix("matmul_t", a)?;
    require_matrix("matmul_t", b)?;
    let (m, k) = (a.rows(), a.cols());
    let (n, k2) = (b.rows(), b.cols());
    if k != k2 {
        return Err(NumericsError::ShapeMismatch {
            op: "matmul_t",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut out = vec![0.0; m * n];
    gemm(a.data(), m, k, false, b.data(), n, k, true, &mut out, 0.0);
    Ok(Tensor::matrix(m, n, out))
}

/// Numerically stable softmax of one row, in place.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}

/// `log Σ exp(row)` with max subtraction.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|v| v - lse).collect()
}

/// Softmax along the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Softmax along `axis` of a rank-2 tensor (0 = down columns, 1 = across rows).
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor, NumericsError> {
    match (x.shape().len(), axis) {
        (_, a) if a + 1 == x.shape().len() => Ok(softmax_rows(x)),
        (2, 0) => {
            let (r, c) = (x.rows(), x.cols());
            let mut out = x.clone();
            let mut col = vec![0.0; r];
            for j in 0..c {
                for i in 0..r {
                    col[i] = x.get(i, j);
                }
                softmax_in_place(&mut col);
                for i in 0..r {
                    out.data_mut()[i * c + j] = col[i];
                }
            }
            Ok(out)
        }
        _ => Err(NumericsError::InvalidAxis {
            axis,
            shape: x.shape().to_vec(),
        }),
    }
}

/// Row-wise layer normalization. Returns the output together with the
/// normalized activations and inverse standard deviations the backward
/// pass needs.
pub fn layer_norm_with_stats(
    x: &Tensor,
    gain: &[f64],
    bias: &[f64],
    eps: f64,
) -> (Tensor, Vec<f64>, Vec<f64>) {
    let (rows, cols) = (x.rows(), x.cols());
    let mut out = vec![0.0; rows * cols];
    let mut xhat = vec![0.0; rows * cols];
    let mut inv_std = vec![0.0; rows];
    for r in 0..rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / cols as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / cols as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for c in 0..cols {
            let h = (row[c] - mean) * inv;
            xhat[r * cols + c] = h;
            out[r * cols + c] = h * gain[c] + bias[c];
        }
    }
    (x.with_shape_of(out), xhat, inv_std)
}

pub fn layer_norm(
    x: &Tensor,
    gain: &Tensor,
    bias: &Tensor,
    eps: f64,
) -> Result<Tensor, NumericsError> {
    if gain.len() != x.cols() || bias.len() != x.cols() {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm",
            left: x.shape().to_vec(),
            right: gain.shape().to_vec(),
        });
    }
    Ok(layer_norm_with_stats(x, gain.data(), bias.data(), eps).0)
}

/// Sinusoidal position encoding: entry `2i` is `sin(pos / 10000^(2i/dim))`,
/// entry `2i+1` the matching cosine.
pub fn sinusoidal_encoding(position: usize, dim: usize) -> Result<Vec<f64>, NumericsError> {
    if dim == 0 || dim % 2 == 1 {
        return Err(NumericsError::OddEncodingDim { dim });
    }
    let mut out = vec![0.0; dim];
    for i in 0..dim / 2 {
        let angle = position as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
        out[2 * i] = angle.sin();
        out[2 * i + 1] = angle.cos();
    }
    Ok(out)
}

/// Encodings for positions `0..len` stacked as a `len × dim` matrix.
pub fn sinusoidal_table(len: usize, dim: usize) -> Result<Tensor, NumericsError> {
    let mut data = Vec::with_capacity(len * dim);
    for p in 0..len {
        data.extend(sinusoidal_encoding(p, dim)?);
    }
    Ok(Tensor::matrix(len, dim, data))
}
