//! Dense row-major N-dimensional tensors and the raw arithmetic kernels
//! the autodiff tape is built on.
//!
//! Kernels are single-threaded with a fixed accumulation order, so results
//! are bitwise reproducible run to run.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Dense N-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S: Scalar> {
    shape: Vec<usize>,
    data: Vec<S>,
}

pub fn shape_str(shape: &[usize]) -> String {
    format!("{shape:?}")
}

impl<S: Scalar> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {shape:?} implies {numel} elements, got {}", data.len()),
            });
        }
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Contract {
                op: "Tensor::new",
                detail: format!("zero dimension in shape {shape:?}"),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![S::zero(); numel] }
    }

    pub fn full(shape: Vec<usize>, v: S) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![v; numel] }
    }

    pub fn scalar(v: S) -> Self {
        Tensor { shape: vec![1], data: vec![v] }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| S::from_f64(v)).collect())
    }

    /// 2D constructor from nested rows; rows must be equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |x| x.len());
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(Error::ShapeMismatch {
                    op: "Tensor::from_rows",
                    detail: format!("ragged rows: {} vs {}", row.len(), c),
                });
            }
            data.extend(row.iter().map(|&v| S::from_f64(v)));
        }
        Tensor::new(vec![r, c], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[S] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [S] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<S> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> S {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Rows/cols of a 2D tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [r, c] => Ok((r, c)),
            _ => Err(Error::ShapeMismatch {
                op: "dims2",
                detail: format!("expected rank 2, got {:?}", self.shape),
            }),
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> S {
        let c = self.shape[self.shape.len() - 1];
        self.data[i * c + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: S) {
        let c = self.shape[self.shape.len() - 1];
        self.data[i * c + j] = v;
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                detail: format!("{:?} -> {shape:?}", self.shape),
            });
        }
        Ok(Tensor { shape, data: self.data.clone() })
    }

    pub fn map(&self, f: impl Fn(S) -> S) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// FNV-1a 64 over the canonical little-endian byte image.
    /// Used for frozen-teacher checks: any bit flip changes the sum.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for v in &self.data {
            for b in v.to_le_byte_vec() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        }
        h
    }
}

// ── raw kernels ──────────────────────────────────────────────────────────────

/// C += A[m×k] · B[k×n].
///
/// Register-blocked: full tiles keep an MR×NR accumulator block live across
/// the whole k loop, so the inner loop is FMA-bound instead of store-bound.
/// Every C element is still accumulated in ascending-k order with a single
/// accumulator, so results are bitwise identical to the naive ikj loop.
pub fn matmul_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    const MR: usize = 6;
    const NR: usize = 8;
    let m_main = m - m % MR;
    let n_main = n - n % NR;
    for i0 in (0..m_main).step_by(MR) {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [[S::zero(); NR]; MR];
            for (di, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&c[(i0 + di) * n + j0..(i0 + di) * n + j0 + NR]);
            }
            for p in 0..k {
                let brow = &b[p * n + j0..p * n + j0 + NR];
                for (di, row) in acc.iter_mut().enumerate() {
                    let aip = a[(i0 + di) * k + p];
                    for (av, &bv) in row.iter_mut().zip(brow) {
                        *av = *av + aip * bv;
                    }
                }
            }
            for (di, row) in acc.iter().enumerate() {
                c[(i0 + di) * n + j0..(i0 + di) * n + j0 + NR].copy_from_slice(row);
            }
        }
    }
    // remainder rows: single-row NR-wide accumulator, same ascending-k order
    for i in m_main..m {
        for j0 in (0..n_main).step_by(NR) {
            let mut acc = [S::zero(); NR];
            acc.copy_from_slice(&c[i * n + j0..i * n + j0 + NR]);
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j0 + NR];
                for (av, &bv) in acc.iter_mut().zip(brow) {
                    *av = *av + aip * bv;
                }
            }
            c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
        }
    }
    // remainder columns: plain loops, same ascending-k order per element
    for i in 0..m {
        for j in n_main..n {
            let mut acc = c[i * n + j];
            for p in 0..k {
                acc = acc + a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
}

/// C = A[m×k] · B[k×n].
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut c = vec![S::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// C += A[m×k] · B[n×k]ᵀ. B is transposed up front so the hot loop is the
/// same contiguous axpy as `matmul_acc` (serial dot products defeat SIMD
/// because f64 reductions cannot be reordered).
pub fn matmul_nt_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, c, m, k, n);
}

/// C += A[k×m]ᵀ · B[k×n]: transpose A, then reuse the blocked kernel;
/// per-element accumulation stays single-accumulator in ascending-k order.
pub fn matmul_tn_acc<S: Scalar>(a: &[S], b: &[S], c: &mut [S], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let at = transpose(a, k, m);
    matmul_acc(&at, b, c, m, k, n);
}

/// Out-of-place transpose of a [r×c] matrix.
pub fn transpose<S: Scalar>(a: &[S], r: usize, c: usize) -> Vec<S> {
    let mut t = vec![S::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            t[j * r + i] = a[i * c + j];
        }
    }
    t
}
