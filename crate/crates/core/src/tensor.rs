//! Dense row-major tensors and the numeric kernels the autograd tape is built on.
//!
//! Everything is generic over [`Scalar`] so the same graph code runs in `f32` for
//! training and in `f64` for finite-difference gradient checks.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating-point element type usable in tensors.
pub trait Scalar:
    Float + Debug + Default + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn of(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

/// A dense tensor with an optional gradient buffer of the same shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
    #[serde(skip)]
    grad: Option<Vec<T>>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); n],
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: Vec::new(),
            data: vec![value],
            grad: None,
        }
    }

    /// Builds a 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    pub fn cols(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn row(&self, r: usize) -> &[T] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn grad(&self) -> Option<&[T]> {
        self.grad.as_deref()
    }

    pub fn grad_mut(&mut self) -> &mut Vec<T> {
        let n = self.data.len();
        self.grad.get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn set_grad(&mut self, grad: Option<Vec<T>>) {
        if let Some(g) = &grad {
            assert_eq!(g.len(), self.data.len(), "gradient length");
        }
        self.grad = grad;
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = &mut self.grad {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.f64())).collect(),
            grad: self
                .grad
                .as_ref()
                .map(|g| g.iter().map(|x| U::of(x.f64())).collect()),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn transpose(&self) -> Tensor<T> {
        let (r, c) = (self.rows(), self.cols());
        Tensor {
            shape: vec![c, r],
            data: transpose(&self.data, r, c),
            grad: None,
        }
    }

    /// Matrix product `self × other` on 2-D tensors.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape.len() != 2 || other.shape.len() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![T::zero(); m * n];
        matmul_into(&self.data, &other.data, &mut out, m, k, n);
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
            grad: None,
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        if axis >= self.shape.len() {
            return Err(Error::Shape {
                op: "softmax",
                lhs: self.shape.clone(),
                rhs: vec![axis],
            });
        }
        let mut data = self.data.clone();
        let (outer, len, inner) = axis_strides(&self.shape, axis);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                softmax_strided(&mut data, base, len, inner);
            }
        }
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
            grad: None,
        })
    }
}

/// `(outer, axis_len, inner)` decomposition of a shape around `axis`.
pub(crate) fn axis_strides(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softmax_strided<T: Scalar>(data: &mut [T], base: usize, len: usize, stride: usize) {
    let mut max = T::neg_infinity();
    for j in 0..len {
        max = max.max(data[base + j * stride]);
    }
    let mut sum = 0.0f64;
    for j in 0..len {
        let e = (data[base + j * stride] - max).exp();
        data[base + j * stride] = e;
        sum += e.f64();
    }
    for j in 0..len {
        let v = &mut data[base + j * stride];
        *v = T::of(v.f64() / sum);
    }
}

/// In-place row softmax of a contiguous row.
pub(crate) fn softmax_row<T: Scalar>(row: &mut [T]) {
    let n = row.len();
    softmax_strided(row, 0, n, 1);
}

pub(crate) fn transpose<T: Scalar>(data: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

const PAR_THRESHOLD: usize = 1 << 18;
const ROWS_PER_TASK: usize = 16;

const TILE: usize = 16;

/// `out[m×n] += a[m×k] · b[k×n]`.
///
/// Every output element accumulates its products in ascending `k` order,
/// whatever the blocking or the split of rows across threads, so results do
/// not depend on the thread count.
pub(crate) fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 || m == 0 {
        return;
    }
    let rows_kernel = |a_blk: &[T], c_blk: &mut [T]| {
        let rows = c_blk.len() / n;
        let mut r = 0;
        while r + 4 <= rows {
            row_tile::<T, 4>(&a_blk[r * k..(r + 4) * k], b, &mut c_blk[r * n..(r + 4) * n], k, n);
            r += 4;
        }
        while r < rows {
            row_tile::<T, 1>(&a_blk[r * k..(r + 1) * k], b, &mut c_blk[r * n..(r + 1) * n], k, n);
            r += 1;
        }
    };
    if m * k * n >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        out.par_chunks_mut(n * ROWS_PER_TASK)
            .zip(a.par_chunks(k * ROWS_PER_TASK))
            .for_each(|(c_blk, a_blk)| rows_kernel(a_blk, c_blk));
    } else {
        rows_kernel(a, out);
    }
}

/// `R` rows of the product, `TILE` columns at a time held in local accumulators.
#[inline(always)]
fn row_tile<T: Scalar, const R: usize>(a: &[T], b: &[T], c: &mut [T], k: usize, n: usize) {
    let mut j0 = 0;
    while j0 + TILE <= n {
        let mut acc = [[T::zero(); TILE]; R];
        for (r, acc_r) in acc.iter_mut().enumerate() {
            acc_r.copy_from_slice(&c[r * n + j0..r * n + j0 + TILE]);
        }
        for p in 0..k {
            let b_row: &[T; TILE] = b[p * n + j0..p * n + j0 + TILE].try_into().expect("tile");
            for (r, acc_r) in acc.iter_mut().enumerate() {
                let av = a[r * k + p];
                for (x, &bv) in acc_r.iter_mut().zip(b_row) {
                    *x += av * bv;
                }
            }
        }
        for (r, acc_r) in acc.iter().enumerate() {
            c[r * n + j0..r * n + j0 + TILE].copy_from_slice(acc_r);
        }
        j0 += TILE;
    }
    if j0 < n {
        for r in 0..R {
            let c_row = &mut c[r * n + j0..(r + 1) * n];
            for p in 0..k {
                let av = a[r * k + p];
                for (x, &bv) in c_row.iter_mut().zip(&b[p * n + j0..(p + 1) * n]) {
                    *x += av * bv;
                }
            }
        }
    }
}
