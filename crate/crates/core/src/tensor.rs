//! Dense row-major tensors and the raw kernels the autograd layer is built on.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::real::{self, Real};
use crate::{Error, Result};

/// Dense n-dimensional array stored contiguously in row-major order.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.data.len() <= 16 {
            write!(f, "Tensor{:?} {:?}", self.shape, self.data)
        } else {
            write!(f, "Tensor{:?} [{} values]", self.shape, self.data.len())
        }
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<Real>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::dim(
                "tensor",
                alloc::format!("zero-sized dimension in {shape:?}"),
            ));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                alloc::format!("shape {shape:?} holds {n} values, got {}", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: Real) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Row-major matrix from nested rows; panics on ragged input.
    pub fn from_rows(rows: &[&[Real]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor {
            shape: vec![rows.len(), cols],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn data(&self) -> &[Real] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<Real> {
        self.data
    }

    /// True when the tensor holds exactly one value.
    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Real {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::mismatch("reshape", &self.shape, shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub(crate) fn reshaped(mut self, shape: &[usize]) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(Real) -> Real) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> Real {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> Real {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, Real::max)
    }

    /// Value at a multi-index; panics when out of bounds.
    pub fn at(&self, index: &[usize]) -> Real {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: Real) {
        let o = self.offset(index);
        self.data[o] = value;
    }

    fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut o = 0;
        for (&i, &d) in index.iter().zip(&self.shape) {
            assert!(i < d, "index {index:?} out of bounds for {:?}", self.shape);
            o = o * d + i;
        }
        o
    }

    pub(crate) fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Result<Self> {
        let first = items
            .first()
            .ok_or_else(|| Error::contract("stack", "no tensors to stack"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::mismatch("stack", &first.shape, &t.shape));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Slice `index` along the leading axis.
    pub fn row(&self, index: usize) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: if self.shape.len() > 1 {
                self.shape[1..].to_vec()
            } else {
                vec![1]
            },
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Plain matrix product of two rank-2 tensors (no gradient tracking).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        if self.rank() != 2 || other.rank() != 2 || self.shape[1] != other.shape[0] {
            return Err(Error::mismatch("matmul", &self.shape, &other.shape));
        }
        let (m, k, n) = (self.shape[0], self.shape[1], other.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            &self.data,
            false,
            &other.data,
            false,
            &mut out,
            false,
        );
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(&self) -> Result<Tensor> {
        let d = *self.shape.last().unwrap_or(&0);
        if d == 0 {
            return Err(Error::dim("softmax", "empty last dimension"));
        }
        let mut out = self.data.clone();
        softmax_rows(&mut out, d);
        Ok(Tensor {
            shape: self.shape.clone(),
            data: out,
        })
    }

    pub fn gelu(&self) -> Tensor {
        self.map(gelu_scalar)
    }

    /// Axis permutation; `perm[i]` names the source axis of output axis `i`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        if perm.len() != self.rank() || !is_permutation(perm) {
            return Err(Error::dim(
                "permute",
                alloc::format!("{perm:?} is not a permutation of rank {}", self.rank()),
            ));
        }
        Ok(permute_data(self, perm))
    }
}

pub(crate) fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return false;
        }
        seen[p] = true;
    }
    true
}

pub(crate) fn permute_data(t: &Tensor, perm: &[usize]) -> Tensor {
    let rank = t.rank();
    let src_shape = &t.shape;
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * src_shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| src_shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(t.len());
    let mut idx = vec![0usize; rank];
    let last = rank - 1;
    let (inner_n, inner_stride) = (out_shape[last], strides[last]);
    loop {
        let base: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        if inner_stride == 1 {
            out.extend_from_slice(&t.data[base..base + inner_n]);
        } else {
            out.extend((0..inner_n).map(|j| t.data[base + j * inner_stride]));
        }
        // advance every axis but the last
        let mut ax = last;
        loop {
            if ax == 0 {
                return Tensor {
                    shape: out_shape,
                    data: out,
                };
            }
            ax -= 1;
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
}

pub(crate) fn inverse_permutation(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// `c (+)= op(a) · op(b)` where `op` optionally transposes. `a` is m×k after
/// the optional transpose, `b` is k×n, `c` is m×n. Row-major throughout.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[Real],
    trans_a: bool,
    b: &[Real],
    trans_b: bool,
    c: &mut [Real],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the length assertion above guarantees every strided access
    // stays inside the three slices, and `c` does not alias `a` or `b`.
    unsafe {
        #[cfg(not(feature = "single-precision"))]
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
        #[cfg(feature = "single-precision")]
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn softmax_rows(data: &mut [Real], width: usize) {
    for row in data.chunks_mut(width) {
        let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = real::exp(*v - max);
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
}

/// Standard normal CDF via `erf`.
#[inline]
pub(crate) fn normal_cdf(x: Real) -> Real {
    0.5 * (1.0 + real::erf(x / real::SQRT_2))
}

#[inline]
pub(crate) fn gelu_scalar(x: Real) -> Real {
    x * normal_cdf(x)
}

#[inline]
pub(crate) fn gelu_grad(x: Real) -> Real {
    normal_cdf(x) + x * real::FRAC_1_SQRT_2PI * real::exp(-0.5 * x * x)
}

#[inline]
pub(crate) fn sigmoid_scalar(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + real::exp(-x))
    } else {
        let e = real::exp(x);
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<Real> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for t in 0..k {
                    out[i * n + j] += a.data()[i * k + t] * b.data()[t * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn matmul_identity_and_small_product() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(a.matmul(&Tensor::eye(2)).unwrap(), a);
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]);
        assert_eq!(naive_matmul(&a, &b), vec![19.0, 22.0, 43.0, 50.0]);
        assert_eq!(a.matmul(&b).unwrap().data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_inner_dimension_error_names_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        match a.matmul(&b) {
            Err(Error::ShapeMismatch { left, right, .. }) => {
                assert_eq!(left, vec![2, 3]);
                assert_eq!(right, vec![4, 2]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gemm_transposes_match_naive() {
        let a = Tensor::new(&[3, 2], (0..6).map(|x| x as Real * 0.5 - 1.0).collect()).unwrap();
        let b = Tensor::new(&[3, 4], (0..12).map(|x| (x as Real).sin()).collect()).unwrap();
        // aᵀ·b
        let at = a.permute(&[1, 0]).unwrap();
        let want = naive_matmul(&at, &b);
        let mut got = vec![0.0; 8];
        gemm(2, 3, 4, a.data(), true, b.data(), false, &mut got, false);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
        // b·bᵀ
        let bt = b.permute(&[1, 0]).unwrap();
        let want = naive_matmul(&b, &bt);
        let mut got = vec![0.0; 9];
        gemm(3, 4, 3, b.data(), false, b.data(), true, &mut got, false);
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_examples() {
        let t = Tensor::new(&[2], vec![0.0, 0.0])
            .unwrap()
            .softmax_lastdim()
            .unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
        let t = Tensor::new(&[2], vec![0.0, (3.0 as Real).ln()])
            .unwrap()
            .softmax_lastdim()
            .unwrap();
        assert!((t.data()[0] - 0.25).abs() < 1e-12);
        assert!((t.data()[1] - 0.75).abs() < 1e-12);
        let t = Tensor::new(&[2], vec![1000.0, 1000.0])
            .unwrap()
            .softmax_lastdim()
            .unwrap();
        assert_eq!(t.data(), &[0.5, 0.5]);
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // 3·Φ(3), Φ(3) = 0.998650101968...
        assert!((gelu_scalar(3.0) - 2.99596).abs() < 1e-4);
        assert!((gelu_scalar(-3.0) + 0.00405).abs() < 1e-4);
    }

    #[test]
    fn permute_round_trip() {
        let t = Tensor::new(&[2, 3, 4], (0..24).map(|x| x as Real).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.at(&[3, 1, 2]), t.at(&[1, 2, 3]));
        let back = p.permute(&inverse_permutation(&[2, 0, 1])).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(Tensor::new(&[2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(&[0, 2], vec![]).is_err());
    }
}
