//! Dense row-major tensors and the numeric kernels shared by the eager
//! functions here and the recorded operations in [`crate::autodiff`].
//!
//! Storage is generic over [`Real`] so the same kernels run in `f32`
//! (production) and `f64` (reference path used by gradient checks).

use std::fmt::Debug;

use num_traits::{Float, NumAssign};

use crate::error::{Error, Result};

/// Layer-norm epsilon used throughout the encoder.
pub const LN_EPS: f64 = 1e-5;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

pub trait Real: Float + NumAssign + Default + Debug + Send + Sync + 'static {
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn c(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn c(x: f64) -> Self {
        x
    }
    #[inline]
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<T>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::contract(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape {
                lhs: shape,
                rhs: vec![data.len()],
                context: "shape product vs data length",
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Panics when `shape` and `data` disagree; for internal call sites
    /// whose shapes are established by construction.
    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![T::zero(); n],
        }
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: T) -> Self {
        let shape = shape.into();
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![value; n],
        }
    }

    pub fn scalar(value: T) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn from_rows(rows: &[&[T]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Tensor::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Size of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().expect("tensor has at least one axis")
    }

    /// Product of every axis but the last.
    pub fn rows(&self) -> usize {
        self.numel() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().product::<usize>() != self.numel() {
            return Err(Error::Shape {
                lhs: self.shape,
                rhs: shape,
                context: "reshape",
            });
        }
        self.shape = shape;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| U::c(x.f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor<T>) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a - *b).abs().f64())
            .fold(0.0, f64::max)
    }

    pub fn sum(&self) -> T {
        self.data.iter().fold(T::zero(), |acc, &x| acc + x)
    }
}

pub(crate) fn expect_matrix<T: Real>(t: &Tensor<T>, context: &'static str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        _ => Err(Error::Shape {
            lhs: t.shape().to_vec(),
            rhs: vec![],
            context,
        }),
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = expect_matrix(a, "matmul lhs must be 2-D")?;
    let (k2, n) = expect_matrix(b, "matmul rhs must be 2-D")?;
    if k != k2 {
        return Err(Error::Shape {
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
            context: "matmul inner dimensions",
        });
    }
    let mut out = vec![T::zero(); m * n];
    kernels::mm_nn(a.data(), b.data(), &mut out, m, k, n);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Softmax along `axis`, max-subtracted.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.shape().len() {
        return Err(Error::Index {
            index: axis,
            len: x.shape().len(),
        });
    }
    let mut out = x.clone();
    let outer: usize = x.shape()[..axis].iter().product();
    let len = x.shape()[axis];
    let inner: usize = x.shape()[axis + 1..].iter().product();
    let mut buf = vec![T::zero(); len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for (j, b) in buf.iter_mut().enumerate() {
                *b = x.data()[base + j * inner];
            }
            kernels::softmax_in_place(&mut buf);
            for (j, b) in buf.iter().enumerate() {
                out.data_mut()[base + j * inner] = *b;
            }
        }
    }
    Ok(out)
}

/// Per-row normalisation over the last axis followed by `gamma * x̂ + beta`.
pub fn layer_norm<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
    let h = x.cols();
    if gamma.shape() != [h] || beta.shape() != [h] {
        return Err(Error::Shape {
            lhs: gamma.shape().to_vec(),
            rhs: beta.shape().to_vec(),
            context: "layer_norm affine parameters must be [H]",
        });
    }
    let mut out = vec![T::zero(); x.numel()];
    for r in 0..x.rows() {
        let (mean, rstd) = kernels::moments(x.row(r), eps);
        for j in 0..h {
            let xhat = (x.row(r)[j] - mean) * rstd;
            out[r * h + j] = gamma.data()[j] * xhat + beta.data()[j];
        }
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Tanh-approximation GELU, elementwise.
pub fn gelu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(kernels::gelu)
}

/// `-log softmax(logits)[gold]` for a single logit vector.
pub fn cross_entropy_at_mask<T: Real>(logits: &Tensor<T>, gold: usize) -> Result<T> {
    let v = logits.numel();
    if gold >= v {
        return Err(Error::Index { index: gold, len: v });
    }
    Ok(kernels::log_sum_exp(logits.data()) - logits.data()[gold])
}

pub(crate) mod kernels {
    use super::*;

    /// out[m×n] += a[m×k] · b[k×n]
    pub fn mm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = a[i * k + p];
                if aip == T::zero() {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += aip * bv;
                }
            }
        }
    }

    /// out[m×n] += a[m×k] · b[n×k]ᵀ
    pub fn mm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            for j in 0..n {
                let brow = &b[j * k..(j + 1) * k];
                out[i * n + j] += dot(arow, brow);
            }
        }
    }

    /// out[m×n] += a[k×m]ᵀ · b[k×n]
    pub fn mm_tn<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            for i in 0..m {
                let api = a[p * m + i];
                if api == T::zero() {
                    continue;
                }
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += api * bv;
                }
            }
        }
    }

    #[inline]
    pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
        // Four accumulators let the compiler vectorise the f32 path.
        let mut acc = [T::zero(); 4];
        let chunks = a.len() / 4;
        for c in 0..chunks {
            for l in 0..4 {
                acc[l] += a[c * 4 + l] * b[c * 4 + l];
            }
        }
        let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
        for i in chunks * 4..a.len() {
            s += a[i] * b[i];
        }
        s
    }

    pub fn softmax_in_place<T: Real>(row: &mut [T]) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            sum += *x;
        }
        for x in row.iter_mut() {
            *x /= sum;
        }
    }

    pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
        let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
        let s = xs.iter().fold(T::zero(), |acc, &x| acc + (x - max).exp());
        max + s.ln()
    }

    /// Returns `(mean, 1/sqrt(var + eps))` with the biased variance.
    pub fn moments<T: Real>(row: &[T], eps: f64) -> (T, T) {
        let n = T::c(row.len() as f64);
        let mean = row.iter().fold(T::zero(), |a, &x| a + x) / n;
        let var = row.iter().fold(T::zero(), |a, &x| a + (x - mean) * (x - mean)) / n;
        (mean, T::one() / (var + T::c(eps)).sqrt())
    }

    #[inline]
    pub fn gelu<T: Real>(x: T) -> T {
        let inner = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_COEF) * x * x * x);
        T::c(0.5) * x * (T::one() + inner.tanh())
    }

    #[inline]
    pub fn gelu_grad<T: Real>(x: T) -> T {
        let inner = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_COEF) * x * x * x);
        let t = inner.tanh();
        let dinner = T::c(SQRT_2_OVER_PI) * (T::one() + T::c(3.0 * GELU_COEF) * x * x);
        T::c(0.5) * (T::one() + t) + T::c(0.5) * x * (T::one() - t * t) * dinner
    }

    /// Numerically stable `log(1 + e^x)`.
    #[inline]
    pub fn softplus<T: Real>(x: T) -> T {
        x.max(T::zero()) + (-x.abs()).exp().ln_1p()
    }

    #[inline]
    pub fn sigmoid<T: Real>(x: T) -> T {
        if x >= T::zero() {
            T::one() / (T::one() + (-x).exp())
        } else {
            let e = x.exp();
            e / (T::one() + e)
        }
    }
}
