use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Floating-point element type (`f32` for training, `f64` for checks).
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Default + Debug + Send + Sync + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("representable")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Dense row-major tensor. All tape operations work on rank-2 tensors;
/// row vectors are `1 x d`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<S = f32> {
    shape: Vec<usize>,
    data: Vec<S>,
}

impl<S: Real> Tensor<S> {
    pub fn new(shape: Vec<usize>, data: Vec<S>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<S>) -> Self {
        Self::new(vec![rows, cols], data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::matrix(rows, cols, vec![S::zero(); rows * cols])
    }

    pub fn row(data: Vec<S>) -> Self {
        let n = data.len();
        Self::matrix(1, n, data)
    }

    pub fn scalar(x: S) -> Self {
        Self::matrix(1, 1, vec![x])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(n, n);
        for i in 0..n {
            t.data[i * n + i] = S::one();
        }
        t
    }

    pub fn from_f64(rows: usize, cols: usize, data: &[f64]) -> Self {
        Self::matrix(rows, cols, data.iter().map(|&x| S::lit(x)).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape.get(1).copied().unwrap_or(1)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
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

    pub fn at(&self, r: usize, c: usize) -> S {
        self.data[r * self.cols() + c]
    }

    pub fn row_slice(&self, r: usize) -> &[S] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn item(&self) -> S {
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn zeros_like(&self) -> Self {
        Self::new(self.shape.clone(), vec![S::zero(); self.data.len()])
    }

    pub fn add_assign(&mut self, other: &Self) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn transpose(&self) -> Self {
        let (r, c) = (self.rows(), self.cols());
        let mut out = Self::zeros(c, r);
        for i in 0..r {
            for j in 0..c {
                out.data[j * r + i] = self.data[i * c + j];
            }
        }
        out
    }

    pub fn cast<T: Real>(&self) -> Tensor<T> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|x| T::from_f64(x.to_f64().unwrap()).unwrap())
                .collect(),
        }
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|x| x.to_f64().unwrap()).collect()
    }
}

/// `out += a * b` for row-major `a: n x k`, `b: k x m`, `out: n x m`.
pub(crate) fn gemm_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (p, &x) in a[i * k..(i + 1) * k].iter().enumerate() {
            if x == S::zero() {
                continue;
            }
            let b_row = &b[p * m..(p + 1) * m];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
}

/// `out += a * b^T` for `a: n x k`, `b: m x k`, `out: n x m`.
pub(crate) fn gemm_nt_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], n: usize, k: usize, m: usize) {
    for i in 0..n {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..m {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = S::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * m + j] += acc;
        }
    }
}

/// `out += a^T * b` for `a: k x n`, `b: k x m`, `out: n x m`.
pub(crate) fn gemm_tn_acc<S: Real>(a: &[S], b: &[S], out: &mut [S], k: usize, n: usize, m: usize) {
    for p in 0..k {
        let b_row = &b[p * m..(p + 1) * m];
        for (i, &x) in a[p * n..(p + 1) * n].iter().enumerate() {
            if x == S::zero() {
                continue;
            }
            let out_row = &mut out[i * m..(i + 1) * m];
            for (o, &y) in out_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
}

/// `e[2i] = sin(x / 10000^(2i/dim))`, `e[2i+1] = cos(x / 10000^(2i/dim))`.
pub fn sinusoidal_embed(x: f64, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "sinusoidal embedding needs an even width");
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / dim as f64);
        out.push((x / freq).sin());
        out.push((x / freq).cos());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a = Tensor::<f64>::from_f64(2, 3, &[1., 2., 3., 4., 5., 6.]);
        let b = Tensor::<f64>::from_f64(3, 2, &[7., 8., 9., 10., 11., 12.]);
        let mut out = vec![0.0; 4];
        gemm_acc(a.data(), b.data(), &mut out, 2, 3, 2);
        assert_eq!(out, vec![58., 64., 139., 154.]);
        let bt = b.transpose();
        let mut nt = vec![0.0; 4];
        gemm_nt_acc(a.data(), bt.data(), &mut nt, 2, 3, 2);
        assert_eq!(nt, out);
        let at = a.transpose();
        let mut tn = vec![0.0; 4];
        gemm_tn_acc(at.data(), b.data(), &mut tn, 3, 2, 2);
        assert_eq!(tn, out);
    }

    #[test]
    fn sinusoid_examples() {
        let e = sinusoidal_embed(0.0, 6);
        assert_eq!(e, vec![0., 1., 0., 1., 0., 1.]);
        let e = sinusoidal_embed(std::f64::consts::FRAC_PI_2, 2);
        assert!((e[0] - 1.0).abs() < 1e-15 && e[1].abs() < 1e-15);
        for x in [-50.0, 3.7, 1e3] {
            assert!(sinusoidal_embed(x, 16).iter().all(|v| v.abs() <= 1.0));
        }
    }
}
