//! Dense row-major tensors and the scalar trait shared by every layer.
//!
//! Layout is channel-last everywhere: images and feature maps are
//! `[batch, height, width, channels]`, sequences are `[batch, len, features]`.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Floating point element type. Implemented for `f32` (training) and `f64`
/// (gradient verification).
pub trait Real:
    Float
    + FromPrimitive
    + Default
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    /// `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );

    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("representable constant")
    }

    fn to_f64c(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $name:literal) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the caller-provided strides address `a` as m x k and
                // `b` as k x n; both are checked against the slice bounds below.
                debug_assert!(m == 0 || k == 0 || max_offset(m, k, rsa, csa) < a.len());
                debug_assert!(k == 0 || n == 0 || max_offset(k, n, rsb, csb) < b.len());
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
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
        }
    };
}

#[allow(dead_code)]
fn max_offset(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    ((rows as isize - 1) * rs + (cols as isize - 1) * cs) as usize
}

impl_real!(f32, matrixmultiply::sgemm, "f32");
impl_real!(f64, matrixmultiply::dgemm, "f64");

/// Row-major matrix product helper: `c (m x n) = op(a) * op(b) (+ c if accumulate)`.
///
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), `b` as `k x n`
/// (or `n x k` when `trans_b`).
#[allow(clippy::too_many_arguments)]
pub fn matmul_into<T: Real>(
    a: &[T],
    b: &[T],
    c: &mut [T],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
    accumulate: bool,
) {
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, beta, c);
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor<{}>{:?}", T::NAME, self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {} values, got {}", numel(shape), data.len()),
            ));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, T::one())
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; numel(shape)],
        }
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| T::of(x)).collect())
    }

    pub fn randn<R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(z)
            })
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn uniform<R: Rng + ?Sized>(shape: &[usize], lo: f64, hi: f64, rng: &mut R) -> Self {
        let data = (0..numel(shape))
            .map(|_| T::of(rng.random_range(lo..hi)))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
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

    pub fn item(&self) -> T {
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.data.len() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {shape:?}", self.shape),
            ));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &x| if x.abs() > m { x.abs() } else { m })
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x.to_f64c().powi(2)).sum()
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64c()).collect()
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| U::of(x.to_f64c())).collect(),
        }
    }

    /// Generic axis permutation (`out.shape[i] = self.shape[axes[i]]`).
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let r = self.rank();
        let mut seen = vec![false; r];
        if axes.len() != r || axes.iter().any(|&a| a >= r || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::shape(
                "permute",
                format!("axes {axes:?} invalid for rank {r}"),
            ));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let in_strides = strides(&self.shape);
        let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let mut out = Vec::with_capacity(self.numel());
        let mut idx = vec![0usize; r];
        let n = self.numel();
        if n == 0 {
            return Tensor::new(&out_shape, out);
        }
        // Innermost loop runs contiguously over the last output axis.
        let last = r - 1;
        let inner = out_shape[last];
        let inner_stride = src_strides[last];
        loop {
            let base: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
            for j in 0..inner {
                out.push(self.data[base + j * inner_stride]);
            }
            // increment all but the last axis
            let mut ax = last;
            loop {
                if ax == 0 {
                    return Tensor::new(&out_shape, out);
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

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.rank() || start + len > self.shape[axis] {
            return Err(Error::shape(
                "narrow",
                format!("{:?} axis {axis} range {start}..{}", self.shape, start + len),
            ));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let d = self.shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * d * inner + start * inner;
            out.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, out)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let r = first.rank();
        if axis >= r {
            return Err(Error::shape("concat", format!("axis {axis} >= rank {r}")));
        }
        for p in parts {
            if p.rank() != r
                || p.shape
                    .iter()
                    .zip(&first.shape)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?} along axis {axis}", p.shape, first.shape),
                ));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape[axis] * inner;
                out.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(&shape, out)
    }
}

pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let t = Tensor::<f64>::new(&[2, 3, 4], (0..24).map(|x| x as f64).collect()).unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        for a in 0..2 {
            for b in 0..3 {
                for c in 0..4 {
                    assert_eq!(p.data()[c * 6 + a * 3 + b], t.data()[a * 12 + b * 4 + c]);
                }
            }
        }
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let t = Tensor::<f32>::new(&[2, 5, 3], (0..30).map(|x| x as f32).collect()).unwrap();
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 3).unwrap();
        assert_eq!(Tensor::concat(&[&a, &b], 1).unwrap(), t);
    }

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul_into(&a, &b, &mut c, 2, 2, 2, false, false, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        matmul_into(&a, &b, &mut c, 2, 2, 2, true, false, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        matmul_into(&a, &b, &mut c, 2, 2, 2, false, true, false);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }
}
