//! Row-major dense tensors and the handful of kernels the transformer needs.

use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data length mismatch"
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Width of one row; 1 for vectors.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|x| *x = value);
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape, other.shape);
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, x| m.max(x.abs()))
    }
}

/// `a[m×k] · b[k×n]`.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    for (a_row, o_row) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
        for (&x, b_row) in a_row.iter().zip(b.chunks_exact(n)) {
            if x == T::zero() {
                continue;
            }
            for (o, &y) in o_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
    out
}

/// `a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = Vec::with_capacity(m * n);
    for a_row in a.chunks_exact(k) {
        out.extend(b.chunks_exact(k).map(|b_row| dot(a_row, b_row)));
    }
    out
}

/// `acc[k×n] += a[m×k]ᵀ · b[m×n]`.
pub fn acc_matmul_at<T: Scalar>(acc: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(acc.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for (a_row, b_row) in a.chunks_exact(k).zip(b.chunks_exact(n)) {
        for (&x, acc_row) in a_row.iter().zip(acc.chunks_exact_mut(n)) {
            if x == T::zero() {
                continue;
            }
            for (o, &y) in acc_row.iter_mut().zip(b_row) {
                *o += x * y;
            }
        }
    }
}

/// Adds `bias` to every row of `x`.
pub fn add_bias<T: Scalar>(x: &mut [T], bias: &[T]) {
    for row in x.chunks_exact_mut(bias.len()) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// `acc += Σ_rows x`.
pub fn acc_col_sums<T: Scalar>(acc: &mut [T], x: &[T]) {
    for row in x.chunks_exact(acc.len()) {
        for (a, &v) in acc.iter_mut().zip(row) {
            *a += v;
        }
    }
}

#[inline]
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

#[inline]
pub fn axpy<T: Scalar>(y: &mut [T], alpha: T, x: &[T]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Numerically stable softmax of one row.
pub fn softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut out: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s: T = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= s);
    out
}

/// `log Σ exp x`.
pub fn log_sum_exp<T: Scalar>(x: &[T]) -> T {
    let m = x.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if m == T::neg_infinity() {
        return m;
    }
    m + x.iter().map(|&v| (v - m).exp()).sum::<T>().ln()
}

/// Index of the largest element, ties to the lowest index.
pub fn argmax<T: Scalar>(x: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate().skip(1) {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Per-row layer normalisation. Returns `(normalised, rstd)`.
pub fn layer_norm<T: Scalar>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut xhat = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / width);
    let n = T::from_usize(width).unwrap();
    for row in x.chunks_exact(width) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        xhat.extend(row.iter().map(|&v| (v - mean) * r));
        rstd.push(r);
    }
    (xhat, rstd)
}

/// Applies gain and bias to normalised rows.
pub fn affine<T: Scalar>(xhat: &[T], gain: &[T], bias: &[T]) -> Vec<T> {
    let mut out = Vec::with_capacity(xhat.len());
    for row in xhat.chunks_exact(gain.len()) {
        out.extend(row.iter().zip(gain).zip(bias).map(|((&x, &g), &b)| g * x + b));
    }
    out
}

/// Backward of `affine ∘ layer_norm`; accumulates gain/bias gradients and
/// returns the input gradient.
pub fn layer_norm_backward<T: Scalar>(
    dy: &[T],
    xhat: &[T],
    rstd: &[T],
    gain: &[T],
    d_gain: &mut [T],
    d_bias: &mut [T],
) -> Vec<T> {
    let width = gain.len();
    let n = T::from_usize(width).unwrap();
    let mut dx = Vec::with_capacity(dy.len());
    let mut dxhat = vec![T::zero(); width];
    for ((dy_row, x_row), &r) in dy.chunks_exact(width).zip(xhat.chunks_exact(width)).zip(rstd) {
        let mut mean_d = T::zero();
        let mut mean_dx = T::zero();
        for j in 0..width {
            d_gain[j] += dy_row[j] * x_row[j];
            d_bias[j] += dy_row[j];
            dxhat[j] = dy_row[j] * gain[j];
            mean_d += dxhat[j];
            mean_dx += dxhat[j] * x_row[j];
        }
        mean_d /= n;
        mean_dx /= n;
        dx.extend((0..width).map(|j| r * (dxhat[j] - mean_d - x_row[j] * mean_dx)));
    }
    dx
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

/// tanh-approximated GELU.
pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    out[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        out
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let expect = naive(&a, &b, m, k, n);
        let close = |x: &[f64], y: &[f64]| x.iter().zip(y).all(|(p, q)| (p - q).abs() < 1e-12);
        assert!(close(&matmul(&a, &b, m, k, n), &expect));
        assert!(close(&matmul_bt(&a, &transpose(&b, k, n), m, k, n), &expect));
        let mut acc = vec![0.0; m * n];
        acc_matmul_at(&mut acc, &transpose(&a, m, k), &b, k, m, n);
        assert!(close(&acc, &expect));
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f64; 4]), 0);
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(row in prop::collection::vec(-50.0f64..50.0, 1..20)) {
            let p = softmax(&row);
            prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let lse = log_sum_exp(&row);
            for (x, q) in row.iter().zip(&p) {
                prop_assert!(*q > 0.0);
                prop_assert!((q.ln() - (x - lse)).abs() < 1e-9);
            }
        }

        #[test]
        fn layer_norm_standardises_rows(row in prop::collection::vec(-10.0f64..10.0, 16)) {
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            prop_assume!(var > 1e-2);
            let (xhat, _) = layer_norm(&row, 16, 1e-12);
            let m = xhat.iter().sum::<f64>() / 16.0;
            let v = xhat.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 16.0;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-6);
        }
    }
}
