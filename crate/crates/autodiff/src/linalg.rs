//! Dense kernels on batches of matrices stored as `(..., rows, cols)`.
//!
//! The `Tensor`-level functions here are the undifferentiated counterparts of
//! the corresponding [`Var`](crate::Var) operations.

use crate::error::{AdError, Result};
use crate::tensor::Tensor;

/// Relative asymmetry tolerated by [`cholesky`].
pub const SYMMETRY_TOL: f64 = 1e-10;

pub(crate) fn batch_count(shape: &[usize]) -> usize {
    shape[..shape.len() - 2].iter().product()
}

fn square_dim(op: &'static str, shape: &[usize]) -> Result<usize> {
    let n = shape.len();
    if n < 2 || shape[n - 1] != shape[n - 2] {
        return Err(AdError::InvalidArgument {
            op,
            msg: format!("expected a batch of square matrices, got shape {shape:?}"),
        });
    }
    Ok(shape[n - 1])
}

/// `C = A·B` for row-major `m×k` and `k×n` blocks.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    // SAFETY: slice lengths match the row-major layouts given to dgemm.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn matmul_shape(a: &[usize], b: &[usize]) -> Result<(Vec<usize>, usize, usize, usize)> {
    let mismatch = || AdError::ShapeMismatch {
        op: "matmul",
        lhs: a.to_vec(),
        rhs: b.to_vec(),
    };
    if a.len() < 2 || a.len() != b.len() || a[..a.len() - 2] != b[..b.len() - 2] {
        return Err(mismatch());
    }
    let r = a.len();
    let (m, k, k2, n) = (a[r - 2], a[r - 1], b[r - 2], b[r - 1]);
    if k != k2 {
        return Err(mismatch());
    }
    let mut out = a[..r - 2].to_vec();
    out.extend([m, n]);
    Ok((out, m, k, n))
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (out, m, k, n) = matmul_shape(a.shape(), b.shape())?;
    let batches = batch_count(&out);
    let mut c = vec![0.0; batches * m * n];
    for i in 0..batches {
        gemm(
            m,
            k,
            n,
            &a.data()[i * m * k..(i + 1) * m * k],
            &b.data()[i * k * n..(i + 1) * k * n],
            &mut c[i * m * n..(i + 1) * m * n],
        );
    }
    Ok(Tensor::from_parts(out, c))
}

/// Swaps the last two axes.
pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let shape = a.shape();
    let r = shape.len();
    if r < 2 {
        return Err(AdError::InvalidArgument {
            op: "transpose",
            msg: format!("needs at least two axes, got {shape:?}"),
        });
    }
    let (m, n) = (shape[r - 2], shape[r - 1]);
    let batches = batch_count(shape);
    let src = a.data();
    let mut out = vec![0.0; src.len()];
    for b in 0..batches {
        let base = b * m * n;
        for i in 0..m {
            for j in 0..n {
                out[base + j * m + i] = src[base + i * n + j];
            }
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape.swap(r - 2, r - 1);
    Ok(Tensor::from_parts(new_shape, out))
}

fn cholesky_block(a: &[f64], d: usize, l: &mut [f64]) -> Result<()> {
    let scale = a.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    for i in 0..d {
        for j in 0..i {
            let diff = (a[i * d + j] - a[j * d + i]).abs();
            if diff > SYMMETRY_TOL * scale {
                return Err(AdError::NotSymmetric { row: i, col: j, diff });
            }
        }
    }
    for j in 0..d {
        let mut s = a[j * d + j];
        for k in 0..j {
            s -= l[j * d + k] * l[j * d + k];
        }
        if !(s > 0.0) || !s.is_finite() {
            return Err(AdError::NotSpd { pivot: j, value: s });
        }
        let ljj = s.sqrt();
        l[j * d + j] = ljj;
        for i in j + 1..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            l[i * d + j] = s / ljj;
        }
    }
    Ok(())
}

/// Lower-triangular `L` with `L·Lᵀ = A` for each matrix of the batch.
pub fn cholesky(a: &Tensor) -> Result<Tensor> {
    let d = square_dim("cholesky", a.shape())?;
    let mut out = vec![0.0; a.numel()];
    for (src, dst) in a.data().chunks(d * d).zip(out.chunks_mut(d * d)) {
        cholesky_block(src, d, dst)?;
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Solves `L·X = B` (or `Lᵀ·X = B` when `transpose`) in place on the
/// `d×k` block `x`.
fn trisolve_block(l: &[f64], d: usize, x: &mut [f64], k: usize, transpose: bool) -> Result<()> {
    for i in 0..d {
        if l[i * d + i] == 0.0 {
            return Err(AdError::SingularTriangular { index: i });
        }
    }
    if !transpose {
        for i in 0..d {
            let lii = l[i * d + i];
            for c in 0..k {
                let mut s = x[i * k + c];
                for j in 0..i {
                    s -= l[i * d + j] * x[j * k + c];
                }
                x[i * k + c] = s / lii;
            }
        }
    } else {
        for i in (0..d).rev() {
            let lii = l[i * d + i];
            for c in 0..k {
                let mut s = x[i * k + c];
                for j in i + 1..d {
                    s -= l[j * d + i] * x[j * k + c];
                }
                x[i * k + c] = s / lii;
            }
        }
    }
    Ok(())
}

pub(crate) fn trisolve_shape(l: &[usize], b: &[usize]) -> Result<(usize, usize)> {
    let d = square_dim("triangular_solve", l)?;
    let r = l.len();
    if b.len() != r || b[..r - 2] != l[..r - 2] || b[r - 2] != d {
        return Err(AdError::ShapeMismatch {
            op: "triangular_solve",
            lhs: l.to_vec(),
            rhs: b.to_vec(),
        });
    }
    Ok((d, b[r - 1]))
}

/// Solves `L·X = B` (`Lᵀ·X = B` when `transpose`) for a batch of
/// lower-triangular `L` of shape `(..., d, d)` and `B` of shape `(..., d, k)`.
pub fn triangular_solve_matrix(l: &Tensor, b: &Tensor, transpose: bool) -> Result<Tensor> {
    let (d, k) = trisolve_shape(l.shape(), b.shape())?;
    let mut x = b.data().to_vec();
    for (lb, xb) in l.data().chunks(d * d).zip(x.chunks_mut(d * k)) {
        trisolve_block(lb, d, xb, k, transpose)?;
    }
    Ok(Tensor::from_parts(b.shape().to_vec(), x))
}

/// Vector form of [`triangular_solve_matrix`]: `l` is `d×d`, `b` has `d` entries.
pub fn triangular_solve(l: &Tensor, b: &Tensor, transpose: bool) -> Result<Tensor> {
    let n = b.numel();
    let x = triangular_solve_matrix(l, &b.reshape([n, 1])?, transpose)?;
    x.reshape(b.shape().to_vec())
}

/// `log det A = 2·Σ log diag(chol(A))` for each matrix of the batch.
pub fn logdet_spd(a: &Tensor) -> Result<Tensor> {
    let d = square_dim("logdet_spd", a.shape())?;
    let l = cholesky(a)?;
    let vals = l
        .data()
        .chunks(d * d)
        .map(|blk| 2.0 * (0..d).map(|i| blk[i * d + i].ln()).sum::<f64>())
        .collect();
    let shape = a.shape()[..a.ndim() - 2].to_vec();
    Ok(Tensor::from_parts(shape, vals))
}

/// `A⁻¹` for each SPD matrix of the batch, via its Cholesky factor.
pub fn inverse_spd(a: &Tensor) -> Result<Tensor> {
    let d = square_dim("inverse_spd", a.shape())?;
    let l = cholesky(a)?;
    let mut out = vec![0.0; a.numel()];
    for (lb, ob) in l.data().chunks(d * d).zip(out.chunks_mut(d * d)) {
        for i in 0..d {
            ob[i * d + i] = 1.0;
        }
        trisolve_block(lb, d, ob, d, false)?;
        trisolve_block(lb, d, ob, d, true)?;
        // symmetrize away round-off
        for i in 0..d {
            for j in 0..i {
                let m = 0.5 * (ob[i * d + j] + ob[j * d + i]);
                ob[i * d + j] = m;
                ob[j * d + i] = m;
            }
        }
    }
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

/// Eigenvalues (ascending) of a symmetric `d×d` matrix by cyclic Jacobi
/// rotations.
pub fn symmetric_eigenvalues(a: &[f64], d: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..d)
            .flat_map(|i| (0..d).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[i * d + j] * m[i * d + j])
            .sum();
        let diag: f64 = (0..d).map(|i| m[i * d + i] * m[i * d + i]).sum();
        if off <= 1e-30 * diag.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..d {
            for q in p + 1..d {
                let apq = m[p * d + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * d + q] - m[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let mkp = m[k * d + p];
                    let mkq = m[k * d + q];
                    m[k * d + p] = c * mkp - s * mkq;
                    m[k * d + q] = s * mkp + c * mkq;
                }
                for k in 0..d {
                    let mpk = m[p * d + k];
                    let mqk = m[q * d + k];
                    m[p * d + k] = c * mpk - s * mqk;
                    m[q * d + k] = s * mpk + c * mqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..d).map(|i| m[i * d + i]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}
