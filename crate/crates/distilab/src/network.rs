//! Two-layer ReLU networks `f(x) = sum_i a_i relu(<w_i, x> + b_i)`.
//!
//! Provides the symmetric cancelling initialization, exact forward and
//! gradient evaluation for the half-MSE loss, ReLU feature matrices for the
//! second training phase, and the smooth surrogate used wherever a second
//! derivative of the activation is required.
//!
//! Batched evaluation walks the dataset in column chunks so nothing larger
//! than `L x CHUNK` is materialized even for very large sample counts.

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::task::LabeledSet;

const CHUNK: usize = 4096;

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("network width {0} is odd; the symmetric initialization needs pairs")]
    OddWidth(usize),
    #[error("gradient over an empty dataset")]
    EmptyDataset,
    #[error("relu has no second derivative; use a softplus surrogate")]
    SecondDerivativeUndefined,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse: {0}")]
    Parse(String),
}

/// First-layer weights (columns of `w`), output weights `a`, biases `b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub a: DVector<f64>,
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl NetworkParams {
    pub fn width(&self) -> usize {
        self.a.len()
    }

    pub fn dim(&self) -> usize {
        self.w.nrows()
    }
}

/// Activation stand-in for places that need two derivatives.
///
/// `Relu` keeps the exact network activation; `Softplus` is
/// `h(t) = log(1 + e^{gamma_s t}) / gamma_s`, which has `h'' > 0` everywhere.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Surrogate {
    Relu,
    Softplus { gamma_s: f64 },
}

impl Surrogate {
    pub fn softplus(gamma_s: f64) -> Surrogate {
        assert!(gamma_s > 0.0, "softplus sharpness must be positive");
        Surrogate::Softplus { gamma_s }
    }

    /// Softplus with the default sharpness 8.
    pub fn default_softplus() -> Surrogate {
        Surrogate::softplus(8.0)
    }

    pub fn value(&self, t: f64) -> f64 {
        match *self {
            Surrogate::Relu => t.max(0.0),
            Surrogate::Softplus { gamma_s } => {
                let z = gamma_s * t;
                if z > 0.0 {
                    t + (-z).exp().ln_1p() / gamma_s
                } else {
                    z.exp().ln_1p() / gamma_s
                }
            }
        }
    }

    pub fn slope(&self, t: f64) -> f64 {
        match *self {
            Surrogate::Relu => {
                if t > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Surrogate::Softplus { gamma_s } => sigmoid(gamma_s * t),
        }
    }

    pub fn curvature(&self, t: f64) -> Result<f64, NetworkError> {
        match *self {
            Surrogate::Relu => Err(NetworkError::SecondDerivativeUndefined),
            Surrogate::Softplus { gamma_s } => {
                let s = sigmoid(gamma_s * t);
                Ok(gamma_s * s * (1.0 - s))
            }
        }
    }

    /// `(h, h', h'')` at `t`; the second derivative is `None` for relu.
    pub fn eval(&self, t: f64) -> (f64, f64, Option<f64>) {
        (self.value(t), self.slope(t), self.curvature(t).ok())
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn relu(z: f64) -> f64 {
    z.max(0.0)
}

fn relu_slope(z: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Draws paired unit-norm first-layer weights and antisymmetric signs so the
/// initial network is identically zero: `w_i = w_{L-1-i}`, `a_i = -a_{L-1-i}`,
/// `b = 0`.
pub fn init_symmetric(d: usize, l: usize, seed: u64) -> Result<NetworkParams, NetworkError> {
    if l % 2 != 0 {
        return Err(NetworkError::OddWidth(l));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut w = DMatrix::zeros(d, l);
    let mut a = DVector::zeros(l);
    for i in 0..l / 2 {
        let mut col = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        col /= col.norm();
        w.set_column(i, &col);
        w.set_column(l - 1 - i, &col);
        let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
        a[i] = sign;
        a[l - 1 - i] = -sign;
    }
    Ok(NetworkParams {
        a,
        w,
        b: DVector::zeros(l),
    })
}

fn preactivations(params: &NetworkParams, x: &DVector<f64>) -> DVector<f64> {
    params.w.tr_mul(x) + &params.b
}

/// Exact network output at a single input.
pub fn forward(params: &NetworkParams, x: &DVector<f64>) -> f64 {
    let z = preactivations(params, x);
    (0..params.width()).map(|i| params.a[i] * relu(z[i])).sum()
}

/// Network outputs over every column of `x`, chunked.
pub fn forward_batch(params: &NetworkParams, x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols();
    let mut out = DVector::zeros(n);
    let mut start = 0;
    while start < n {
        let width = CHUNK.min(n - start);
        let xc = x.columns(start, width);
        let mut z = params.w.tr_mul(&xc);
        for c in 0..width {
            let mut acc = 0.0;
            for i in 0..params.width() {
                acc += params.a[i] * relu(z[(i, c)] + params.b[i]);
            }
            z[(0, c)] = acc;
        }
        for c in 0..width {
            out[start + c] = z[(0, c)];
        }
        start += width;
    }
    out
}

/// Half-MSE loss `(1/2N) sum_n (f(x_n) - y_n)^2`.
pub fn loss(params: &NetworkParams, data: &LabeledSet) -> Result<f64, NetworkError> {
    if data.n() == 0 {
        return Err(NetworkError::EmptyDataset);
    }
    let pred = forward_batch(params, &data.x);
    let res = pred - &data.y;
    Ok(res.norm_squared() / (2.0 * data.n() as f64))
}

fn grad_w_impl(
    params: &NetworkParams,
    data: &LabeledSet,
    act: Option<&Surrogate>,
) -> Result<DMatrix<f64>, NetworkError> {
    let n = data.n();
    if n == 0 {
        return Err(NetworkError::EmptyDataset);
    }
    let d = params.dim();
    let l = params.width();
    let mut grad = DMatrix::zeros(d, l);
    let mut start = 0;
    while start < n {
        let width = CHUNK.min(n - start);
        let xc = data.x.columns(start, width);
        let z = params.w.tr_mul(&xc);
        let mut t = DMatrix::zeros(width, l);
        for c in 0..width {
            let mut pred = 0.0;
            for i in 0..l {
                let zi = z[(i, c)] + params.b[i];
                pred += params.a[i]
                    * match act {
                        None => relu(zi),
                        Some(s) => s.value(zi),
                    };
            }
            let res = pred - data.y[start + c];
            for i in 0..l {
                let zi = z[(i, c)] + params.b[i];
                let slope = match act {
                    None => relu_slope(zi),
                    Some(s) => s.slope(zi),
                };
                t[(c, i)] = res * params.a[i] * slope;
            }
        }
        grad += xc * t;
        start += width;
    }
    Ok(grad / n as f64)
}

/// First-layer loss gradient: column `i` is
/// `(1/N) sum_n (f(x_n) - y_n) a_i x_n 1[<w_i, x_n> + b_i > 0]`.
pub fn grad_w(params: &NetworkParams, data: &LabeledSet) -> Result<DMatrix<f64>, NetworkError> {
    grad_w_impl(params, data, None)
}

/// [`grad_w`] with the activation and its slope replaced by a smooth
/// surrogate, so the result can be checked against finite differences.
pub fn grad_w_smoothed(
    params: &NetworkParams,
    data: &LabeledSet,
    surrogate: &Surrogate,
) -> Result<DMatrix<f64>, NetworkError> {
    grad_w_impl(params, data, Some(surrogate))
}

/// [`loss`] with the activation replaced by a smooth surrogate.
pub fn loss_smoothed(
    params: &NetworkParams,
    data: &LabeledSet,
    surrogate: &Surrogate,
) -> Result<f64, NetworkError> {
    if data.n() == 0 {
        return Err(NetworkError::EmptyDataset);
    }
    let mut total = 0.0;
    for c in 0..data.n() {
        let x = data.x.column(c).into_owned();
        let z = preactivations(params, &x);
        let pred: f64 = (0..params.width())
            .map(|i| params.a[i] * surrogate.value(z[i]))
            .sum();
        let res = pred - data.y[c];
        total += res * res;
    }
    Ok(total / (2.0 * data.n() as f64))
}

/// Ridge gradient in the output weights: `(1/N) K (K^T a - y) + lambda a`.
pub fn grad_a(
    params: &NetworkParams,
    data: &LabeledSet,
    lambda: f64,
) -> Result<DVector<f64>, NetworkError> {
    let n = data.n();
    if n == 0 {
        return Err(NetworkError::EmptyDataset);
    }
    let l = params.width();
    let mut v = DVector::zeros(l);
    let mut start = 0;
    while start < n {
        let width = CHUNK.min(n - start);
        let xc = data.x.columns(start, width);
        let mut k = params.w.tr_mul(&xc);
        for c in 0..width {
            for i in 0..l {
                k[(i, c)] = relu(k[(i, c)] + params.b[i]);
            }
        }
        let u = k.tr_mul(&params.a) - data.y.rows(start, width);
        v += k * u;
        start += width;
    }
    Ok(v / n as f64 + &params.a * lambda)
}

/// ReLU feature matrix `K` with `K[(i, n)] = relu(<w_i, x_n> + b_i)`.
pub fn kernel(params: &NetworkParams, x: &DMatrix<f64>) -> DMatrix<f64> {
    let mut k = params.w.tr_mul(x);
    for c in 0..k.ncols() {
        for i in 0..k.nrows() {
            k[(i, c)] = relu(k[(i, c)] + params.b[i]);
        }
    }
    k
}

/// Chunked `(K K^T / N, K y / N)` without materializing `K`.
pub fn kernel_gram(params: &NetworkParams, data: &LabeledSet) -> (DMatrix<f64>, DVector<f64>) {
    let n = data.n();
    let l = params.width();
    let mut m = DMatrix::zeros(l, l);
    let mut z = DVector::zeros(l);
    let mut start = 0;
    while start < n {
        let width = CHUNK.min(n - start);
        let kc = kernel(params, &data.x.columns(start, width).into_owned());
        m += &kc * kc.transpose();
        z += kc * data.y.rows(start, width);
        start += width;
    }
    let nf = n as f64;
    (m / nf, z / nf)
}

/// Replaces the biases with a fresh seeded standard Gaussian draw; weights
/// and signs are untouched.
pub fn reinit_bias(params: &NetworkParams, seed: u64) -> NetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = DVector::from_fn(params.width(), |_, _| rng.sample::<f64, _>(StandardNormal));
    NetworkParams {
        a: params.a.clone(),
        w: params.w.clone(),
        b,
    }
}

/// Writes `a`, then `W` column-major, then `b`, one value per line after a
/// `d L` header.
pub fn save_checkpoint(params: &NetworkParams, path: &Path) -> Result<(), NetworkError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(file, "{} {}", params.dim(), params.width())?;
    for v in params.a.iter() {
        writeln!(file, "{v}")?;
    }
    for v in params.w.iter() {
        writeln!(file, "{v}")?;
    }
    for v in params.b.iter() {
        writeln!(file, "{v}")?;
    }
    file.flush()?;
    Ok(())
}

/// Reads a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<NetworkParams, NetworkError> {
    let file = BufReader::new(std::fs::File::open(path)?);
    let mut lines = file.lines();
    let header = lines
        .next()
        .ok_or_else(|| NetworkError::Parse("missing header".into()))??;
    let mut dims = header.split_whitespace();
    let d: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| NetworkError::Parse("bad dimension".into()))?;
    let l: usize = dims
        .next()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| NetworkError::Parse("bad width".into()))?;
    let mut values = Vec::with_capacity(l + d * l + l);
    for line in lines {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .map_err(|e| NetworkError::Parse(e.to_string()))?,
        );
    }
    if values.len() != l + d * l + l {
        return Err(NetworkError::Parse(format!(
            "expected {} values, got {}",
            l + d * l + l,
            values.len()
        )));
    }
    let a = DVector::from_row_slice(&values[0..l]);
    let w = DMatrix::from_column_slice(d, l, &values[l..l + d * l]);
    let b = DVector::from_row_slice(&values[l + d * l..]);
    Ok(NetworkParams { a, w, b })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_input(d: usize, rng: &mut ChaCha8Rng) -> DVector<f64> {
        DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
    }

    fn random_set(d: usize, n: usize, seed: u64) -> LabeledSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let y = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
        LabeledSet { x, y, meta: None }
    }

    fn random_params(d: usize, l: usize, seed: u64) -> NetworkParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        NetworkParams {
            a: DVector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal)),
            w: DMatrix::from_fn(d, l, |_, _| rng.sample::<f64, _>(StandardNormal)),
            b: DVector::from_fn(l, |_, _| rng.sample::<f64, _>(StandardNormal)),
        }
    }

    #[test]
    fn symmetric_init_outputs_zero_everywhere() {
        let params = init_symmetric(5, 8, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let x = random_input(5, &mut rng);
            assert_abs_diff_eq!(forward(&params, &x), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn symmetric_init_weights_are_unit_norm_and_paired() {
        let params = init_symmetric(7, 10, 4).unwrap();
        for i in 0..10 {
            assert_abs_diff_eq!(params.w.column(i).norm(), 1.0, epsilon = 1e-12);
        }
        for i in 0..5 {
            assert_eq!(params.w.column(i), params.w.column(9 - i));
            assert_eq!(params.a[i], -params.a[9 - i]);
            assert!(params.a[i] == 1.0 || params.a[i] == -1.0);
        }
        assert_eq!(params.b, DVector::zeros(10));
    }

    #[test]
    fn odd_width_is_rejected() {
        assert!(matches!(
            init_symmetric(4, 5, 0),
            Err(NetworkError::OddWidth(5))
        ));
    }

    #[test]
    fn paired_unit_forward_cancels() {
        let e1 = DVector::from_column_slice(&[1.0, 0.0]);
        let params = NetworkParams {
            a: DVector::from_column_slice(&[1.0, -1.0]),
            w: DMatrix::from_columns(&[e1.clone(), e1.clone()]),
            b: DVector::zeros(2),
        };
        assert_eq!(forward(&params, &e1), 0.0);
    }

    #[test]
    fn broken_pair_doubles_the_activation() {
        let e1 = DVector::from_column_slice(&[1.0, 0.0]);
        let params = NetworkParams {
            a: DVector::from_column_slice(&[1.0, 1.0]),
            w: DMatrix::from_columns(&[e1.clone(), e1.clone()]),
            b: DVector::zeros(2),
        };
        let x = DVector::from_column_slice(&[0.7, -0.3]);
        assert_abs_diff_eq!(forward(&params, &x), 2.0 * 0.7, epsilon = 1e-15);
    }

    #[test]
    fn batch_forward_matches_single_forward() {
        let params = random_params(4, 6, 8);
        let set = random_set(4, 37, 9);
        let batch = forward_batch(&params, &set.x);
        for n in 0..set.n() {
            let single = forward(&params, &set.x.column(n).into_owned());
            assert_abs_diff_eq!(batch[n], single, epsilon = 1e-12);
        }
    }

    #[test]
    fn grad_w_at_symmetric_init_reduces_to_label_term() {
        let params = init_symmetric(4, 6, 12).unwrap();
        let set = random_set(4, 25, 13);
        let grad = grad_w(&params, &set).unwrap();
        let n = set.n() as f64;
        for i in 0..6 {
            let mut expected = DVector::zeros(4);
            for c in 0..set.n() {
                let x = set.x.column(c).into_owned();
                let z = params.w.column(i).dot(&x);
                if z > 0.0 {
                    expected += x * (-set.y[c] * params.a[i]);
                }
            }
            expected /= n;
            assert!((grad.column(i).into_owned() - expected).norm() < 1e-12);
        }
    }

    #[test]
    fn grad_w_vanishes_for_zero_labels_at_symmetric_init() {
        let params = init_symmetric(3, 4, 21).unwrap();
        let mut set = random_set(3, 15, 22);
        set.y.fill(0.0);
        let grad = grad_w(&params, &set).unwrap();
        assert!(grad.norm() < 1e-13);
    }

    #[test]
    fn grad_w_rejects_empty_dataset() {
        let params = random_params(3, 4, 1);
        let set = LabeledSet {
            x: DMatrix::zeros(3, 0),
            y: DVector::zeros(0),
            meta: None,
        };
        assert!(matches!(
            grad_w(&params, &set),
            Err(NetworkError::EmptyDataset)
        ));
    }

    #[test]
    fn smoothed_grad_w_matches_finite_differences() {
        let surrogate = Surrogate::default_softplus();
        for seed in 0..4u64 {
            let d = 2 + (seed as usize % 3);
            let l = 2 + 2 * (seed as usize % 4);
            let mut params = random_params(d, l, 100 + seed);
            let set = random_set(d, 7, 200 + seed);
            let grad = grad_w_smoothed(&params, &set, &surrogate).unwrap();
            let step = 1e-5;
            for i in 0..l {
                for row in 0..d {
                    let keep = params.w[(row, i)];
                    params.w[(row, i)] = keep + step;
                    let plus = loss_smoothed(&params, &set, &surrogate).unwrap();
                    params.w[(row, i)] = keep - step;
                    let minus = loss_smoothed(&params, &set, &surrogate).unwrap();
                    params.w[(row, i)] = keep;
                    let fd = (plus - minus) / (2.0 * step);
                    let scale = grad[(row, i)].abs().max(1.0);
                    assert!(
                        (grad[(row, i)] - fd).abs() <= 1e-6 * scale,
                        "seed {seed} entry ({row},{i}): analytic {} vs fd {fd}",
                        grad[(row, i)]
                    );
                }
            }
        }
    }

    #[test]
    fn grad_a_matches_finite_differences() {
        let lambda = 0.3;
        for seed in 0..4u64 {
            let d = 2 + (seed as usize % 3);
            let l = 3 + (seed as usize % 5);
            let mut params = random_params(d, l, 300 + seed);
            let set = random_set(d, 9, 400 + seed);
            let grad = grad_a(&params, &set, lambda).unwrap();
            let step = 1e-5;
            let ridge_loss = |p: &NetworkParams| {
                let k = kernel(p, &set.x);
                let res = k.tr_mul(&p.a) - &set.y;
                res.norm_squared() / (2.0 * set.n() as f64) + 0.5 * lambda * p.a.norm_squared()
            };
            for i in 0..l {
                let keep = params.a[i];
                params.a[i] = keep + step;
                let plus = ridge_loss(&params);
                params.a[i] = keep - step;
                let minus = ridge_loss(&params);
                params.a[i] = keep;
                let fd = (plus - minus) / (2.0 * step);
                let scale = grad[i].abs().max(1.0);
                assert!(
                    (grad[i] - fd).abs() <= 1e-6 * scale,
                    "seed {seed} entry {i}: analytic {} vs fd {fd}",
                    grad[i]
                );
            }
        }
    }

    #[test]
    fn grad_a_special_cases() {
        let mut params = random_params(3, 5, 7);
        let set = random_set(3, 11, 8);
        params.a.fill(0.0);
        let grad = grad_a(&params, &set, 0.0).unwrap();
        let k = kernel(&params, &set.x);
        let expected = -(&k * &set.y) / set.n() as f64;
        assert!((grad.clone() - expected).norm() < 1e-12);

        let fitted = random_params(3, 5, 9);
        let mut consistent = random_set(3, 11, 10);
        let k = kernel(&fitted, &consistent.x);
        consistent.y = k.tr_mul(&fitted.a);
        let grad = grad_a(&fitted, &consistent, 0.0).unwrap();
        assert!(grad.norm() < 1e-12);
    }

    #[test]
    fn kernel_hand_cases() {
        let params = NetworkParams {
            a: DVector::from_column_slice(&[1.0, 1.0]),
            w: DMatrix::zeros(2, 2),
            b: DVector::zeros(2),
        };
        let x = DMatrix::from_column_slice(2, 3, &[1.0, 2.0, -1.0, 0.5, 0.0, 0.0]);
        assert_eq!(kernel(&params, &x), DMatrix::zeros(2, 3));

        let ones = NetworkParams {
            b: DVector::from_element(2, 1.0),
            ..params.clone()
        };
        assert_eq!(kernel(&ones, &x), DMatrix::from_element(2, 3, 1.0));

        let hand = NetworkParams {
            a: DVector::from_column_slice(&[1.0]),
            w: DMatrix::from_column_slice(2, 1, &[1.0, 0.0]),
            b: DVector::from_column_slice(&[-0.5]),
        };
        let p = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let k = kernel(&hand, &p);
        assert_abs_diff_eq!(k[(0, 0)], 0.5, epsilon = 1e-15);
    }

    #[test]
    fn kernel_gram_matches_dense_computation() {
        let params = random_params(4, 6, 31);
        let set = random_set(4, 53, 32);
        let (m, z) = kernel_gram(&params, &set);
        let k = kernel(&params, &set.x);
        let n = set.n() as f64;
        let m_dense = &k * k.transpose() / n;
        let z_dense = &k * &set.y / n;
        assert!((m - m_dense).norm() < 1e-12);
        assert!((z - z_dense).norm() < 1e-12);
    }

    #[test]
    fn bias_reinit_is_seeded_and_leaves_weights_alone() {
        let params = init_symmetric(4, 6, 40).unwrap();
        let first = reinit_bias(&params, 7);
        let second = reinit_bias(&params, 7);
        assert_eq!(first.b, second.b);
        assert!(first.b.norm() > 0.0);
        assert_eq!(first.a, params.a);
        assert_eq!(first.w, params.w);
    }

    #[test]
    fn reinitialized_biases_are_standard_gaussian() {
        let params = init_symmetric(2, 10_000, 41).unwrap();
        let out = reinit_bias(&params, 42);
        let l = out.b.len() as f64;
        let mean = out.b.mean();
        let var = out.b.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / l;
        let mean_se = (1.0 / l).sqrt();
        let var_se = (2.0 / l).sqrt();
        assert!(mean.abs() <= 5.0 * mean_se, "bias mean {mean}");
        assert!((var - 1.0).abs() <= 5.0 * var_se, "bias variance {var}");
    }

    #[test]
    fn softplus_values_at_zero_and_saturation() {
        let s = Surrogate::softplus(4.0);
        let (h, dh, d2h) = s.eval(0.0);
        assert_abs_diff_eq!(h, 2.0f64.ln() / 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(dh, 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(d2h.unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.slope(200.0), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(s.value(200.0), 200.0, epsilon = 1e-12);
    }

    #[test]
    fn softplus_curvature_is_positive_on_the_unit_interval() {
        let s = Surrogate::default_softplus();
        for k in 0..=40 {
            let t = -1.0 + 2.0 * k as f64 / 40.0;
            assert!(s.curvature(t).unwrap() > 0.0);
        }
    }

    #[test]
    fn relu_surrogate_has_no_curvature() {
        let s = Surrogate::Relu;
        assert_eq!(s.slope(0.3), 1.0);
        assert_eq!(s.slope(0.0), 0.0);
        assert!(matches!(
            s.curvature(0.1),
            Err(NetworkError::SecondDerivativeUndefined)
        ));
        assert_eq!(s.eval(0.1).2, None);
    }

    #[test]
    fn checkpoint_round_trip() {
        let params = random_params(3, 4, 77);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ckpt");
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded, params);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn kernel_columns_follow_dataset_permutations(seed in 0u64..1000) {
            let params = random_params(3, 4, seed);
            let set = random_set(3, 6, seed ^ 0x5ec);
            let k = kernel(&params, &set.x);
            let perm = [2usize, 0, 5, 1, 4, 3];
            let permuted = DMatrix::from_fn(3, 6, |i, j| set.x[(i, perm[j])]);
            let kp = kernel(&params, &permuted);
            for (j, &p) in perm.iter().enumerate() {
                prop_assert!((kp.column(j) - k.column(p)).norm() == 0.0);
            }
        }

        #[test]
        fn symmetric_init_is_the_zero_function(seed in 0u64..1000, d in 2usize..6, pairs in 1usize..5) {
            let params = init_symmetric(d, 2 * pairs, seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xf00d);
            let x = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
            prop_assert!(forward(&params, &x).abs() < 1e-12);
        }
    }
}
