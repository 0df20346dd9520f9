use rand::Rng;

use super::{Matrix, NumericsError, Real};
use crate::corpus::Label;

/// Row-wise softmax with max subtraction. A row that is entirely `-inf`
/// yields all zeros.
pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    out
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x /= sum);
}

/// Gradient through a row softmax given its output `p` and upstream `dp`:
/// `p * (dp - <p, dp>)` per row.
pub fn softmax_backward<T: Real>(p: &Matrix<T>, dp: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    if p.shape() != dp.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "softmax_backward",
            left: p.shape(),
            right: dp.shape(),
        });
    }
    let mut out = Matrix::zeros(p.rows(), p.cols());
    for r in 0..p.rows() {
        softmax_backward_row(p.row(r), dp.row(r), out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_backward_row<T: Real>(p: &[T], dp: &[T], out: &mut [T]) {
    let dot: T = p.iter().zip(dp).map(|(&a, &b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(dp) {
        *o = pi * (gi - dot);
    }
}

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

/// GELU, tanh approximation: `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`.
pub fn gelu_scalar<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let inner = T::from_f64(GELU_K) * (x + T::from_f64(GELU_C) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let k = T::from_f64(GELU_K);
    let c = T::from_f64(GELU_C);
    let t = (k * (x + c * x * x * x)).tanh();
    let dinner = k * (T::one() + T::from_f64(3.0) * c * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn gelu<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    m.map(gelu_scalar)
}

/// Gradient of [`gelu`] at pre-activation `x` given upstream `grad`.
pub fn gelu_backward<T: Real>(x: &Matrix<T>, grad: &Matrix<T>) -> Result<Matrix<T>, NumericsError> {
    grad.hadamard(&x.map(gelu_derivative))
}

/// Per-row statistics kept for [`layer_norm_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormCache<T: Real> {
    pub normalized: Matrix<T>,
    pub inv_std: Vec<T>,
}

/// Row-wise `(x - mean) / sqrt(var + eps) * gain + bias` with population variance.
pub fn layer_norm<T: Real>(
    x: &Matrix<T>,
    gain: &Matrix<T>,
    bias: &Matrix<T>,
    eps: T,
) -> Result<(Matrix<T>, LayerNormCache<T>), NumericsError> {
    let d = x.cols();
    for p in [gain, bias] {
        if p.shape() != (1, d) {
            return Err(NumericsError::ShapeMismatch {
                op: "layer_norm",
                left: x.shape(),
                right: p.shape(),
            });
        }
    }
    if !(eps > T::zero()) {
        return Err(NumericsError::InvalidArgument("layer_norm eps must be > 0".into()));
    }
    let n = T::from_f64(d as f64);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut normalized = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std.push(is);
        let nrow = normalized.row_mut(r);
        for (o, &v) in nrow.iter_mut().zip(row) {
            *o = (v - mean) * is;
        }
        let orow = out.row_mut(r);
        for (j, o) in orow.iter_mut().enumerate() {
            *o = normalized[(r, j)] * gain.as_slice()[j] + bias.as_slice()[j];
        }
    }
    Ok((out, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<T: Real>(
    cache: &LayerNormCache<T>,
    gain: &Matrix<T>,
    grad: &Matrix<T>,
) -> Result<(Matrix<T>, Matrix<T>, Matrix<T>), NumericsError> {
    if grad.shape() != cache.normalized.shape() {
        return Err(NumericsError::ShapeMismatch {
            op: "layer_norm_backward",
            left: cache.normalized.shape(),
            right: grad.shape(),
        });
    }
    let (rows, d) = grad.shape();
    let n = T::from_f64(d as f64);
    let g = gain.as_slice();
    let mut dx = Matrix::zeros(rows, d);
    let mut dgain = Matrix::zeros(1, d);
    let mut dbias = Matrix::zeros(1, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let xhat = cache.normalized.row(r);
        let gr = grad.row(r);
        for j in 0..d {
            dgain.as_mut_slice()[j] += gr[j] * xhat[j];
            dbias.as_mut_slice()[j] += gr[j];
            dxhat[j] = gr[j] * g[j];
        }
        let sum_dxhat: T = dxhat.iter().copied().sum();
        let sum_dxhat_xhat: T = dxhat.iter().zip(xhat).map(|(&a, &b)| a * b).sum();
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is / n * (n * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat);
        }
    }
    Ok((dx, dgain, dbias))
}

/// Mean negative log-likelihood of the true class and its gradient
/// `(softmax - onehot) / B` with respect to the logits.
pub fn cross_entropy<T: Real>(
    logits: &Matrix<T>,
    labels: &[Label],
) -> Result<(T, Matrix<T>), NumericsError> {
    if labels.len() != logits.rows() || logits.cols() != Label::COUNT {
        return Err(NumericsError::ShapeMismatch {
            op: "cross_entropy",
            left: logits.shape(),
            right: (labels.len(), Label::COUNT),
        });
    }
    let b = T::from_f64(labels.len() as f64);
    let mut grad = softmax_rows(logits);
    let mut loss = T::zero();
    for (r, y) in labels.iter().enumerate() {
        let row = logits.row(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
        loss += lse - row[y.index()];
        let g = grad.row_mut(r);
        g[y.index()] -= T::one();
        g.iter_mut().for_each(|v| *v /= b);
    }
    let loss = loss / b;
    if !loss.is_finite() {
        return Err(NumericsError::NonFiniteLoss);
    }
    Ok((loss, grad))
}

/// Inverted-dropout mask: each entry is `0` with probability `rate`,
/// otherwise `1 / (1 - rate)`.
pub fn dropout_mask<T: Real, R: Rng + ?Sized>(
    rows: usize,
    cols: usize,
    rate: f64,
    rng: &mut R,
) -> Matrix<T> {
    let keep = T::from_f64(1.0 / (1.0 - rate));
    let mut m = Matrix::zeros(rows, cols);
    for x in m.as_mut_slice() {
        if rng.random::<f64>() >= rate {
            *x = keep;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn softmax_examples() {
        let m = Matrix::<f64>::from_rows(&[&[0.0, 0.0]]);
        let p = softmax_rows(&m);
        assert_eq!(p.row(0), [0.5, 0.5]);
        let m = Matrix::<f64>::from_rows(&[&[0.0, 2f64.ln(), 3f64.ln()]]);
        let p = softmax_rows(&m);
        for (x, e) in p.row(0).iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((x - e).abs() < 1e-15);
        }
        let a = softmax_rows(&Matrix::<f64>::from_rows(&[&[123.25, 124.25]]));
        let b = softmax_rows(&Matrix::<f64>::from_rows(&[&[0.0, 1.0]]));
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_values() {
        assert_eq!(gelu_scalar(0.0f64), 0.0);
        // reference values of the tanh approximation
        assert!((gelu_scalar(1.0f64) - 0.841_191_990_607_477_2).abs() < 1e-12);
        assert!((gelu_scalar(-1.0f64) + 0.158_808_009_392_522_8).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0f64, -1.0, -0.2, 0.0, 0.4, 1.5, 4.0] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_derivative(x)).abs() < 1e-8, "x={x}");
        }
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Matrix::<f64>::filled(1, 4, 1.0);
        let zeros = Matrix::<f64>::zeros(1, 4);
        let (y, _) = layer_norm(&Matrix::filled(1, 4, 3.5), &ones, &zeros, 1e-5).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));

        let g = Matrix::<f64>::filled(1, 2, 1.0);
        let (y, _) = layer_norm(
            &Matrix::from_rows(&[&[1.0, 3.0]]),
            &g,
            &Matrix::zeros(1, 2),
            1e-12,
        )
        .unwrap();
        assert!((y[(0, 0)] + 1.0).abs() < 1e-9 && (y[(0, 1)] - 1.0).abs() < 1e-9);

        let b = Matrix::from_rows(&[&[0.25, -2.0]]);
        let (yb, _) = layer_norm(&Matrix::from_rows(&[&[1.0, 3.0]]), &g, &b, 1e-12).unwrap();
        assert!((yb[(0, 0)] - (y[(0, 0)] + 0.25)).abs() < 1e-15);
        assert!((yb[(0, 1)] - (y[(0, 1)] - 2.0)).abs() < 1e-15);

        assert!(layer_norm(&Matrix::<f64>::zeros(1, 3), &g, &b, 1e-5).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (loss, _) = cross_entropy(
            &Matrix::<f64>::from_rows(&[&[10.0, -10.0, -10.0]]),
            &[Label::Bad],
        )
        .unwrap();
        assert!(loss < 1e-4);

        let logits = Matrix::<f64>::from_rows(&[&[0.7, 0.7, 0.7], &[0.0, 0.0, 0.0]]);
        let (loss, grad) = cross_entropy(&logits, &[Label::Good, Label::Excellent]).unwrap();
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        assert!((loss - 1.098612).abs() < 1e-6);
        for r in 0..2 {
            assert!(grad.row(r).iter().sum::<f64>().abs() < 1e-15);
        }
        assert!(cross_entropy(&logits, &[Label::Good]).is_err());
    }

    #[test]
    fn dropout_mask_scaling() {
        let mut rng = crate::rng::seeded(3, 0);
        let m: Matrix<f64> = dropout_mask(50, 40, 0.25, &mut rng);
        let kept = m.as_slice().iter().filter(|&&v| v != 0.0).count();
        assert!(m.as_slice().iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        assert!((kept as f64 / 2000.0 - 0.75).abs() < 0.05);
        let none: Matrix<f64> = dropout_mask(3, 3, 0.0, &mut rng);
        assert!(none.as_slice().iter().all(|&v| v == 1.0));
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one(row in proptest::collection::vec(-1e4f32..1e4, 1..12)) {
            let n = row.len();
            let p = softmax_rows(&Matrix::from_vec(1, n, row).unwrap());
            let s: f32 = p.row(0).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            prop_assert!(p.is_finite());
        }

        #[test]
        fn layer_norm_standardizes(row in proptest::collection::vec(-50.0f32..50.0, 4..16)) {
            let n = row.len();
            let mean = row.iter().sum::<f32>() / n as f32;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / n as f32;
            prop_assume!(var > 1.0);
            let (y, _) = layer_norm(
                &Matrix::from_vec(1, n, row).unwrap(),
                &Matrix::filled(1, n, 1.0),
                &Matrix::zeros(1, n),
                1e-5,
            ).unwrap();
            let out: Vec<f64> = y.row(0).iter().map(|&x| x as f64).collect();
            let m = out.iter().sum::<f64>() / n as f64;
            let v = out.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
            prop_assert!(m.abs() < 1e-6);
            prop_assert!((v - 1.0).abs() < 1e-4);
        }
    }
}
