//! Distilled-set construction for both phases.
//!
//! Phase 1 moves the synthetic point by one-step gradient matching: the
//! matching objective compares recorded teacher weight gradients with the
//! student's one-step gradients on the synthetic set, and its gradient in
//! the synthetic point has a closed form because the networks sit at the
//! cancelling initialization. Phase 2 keeps the constructed points fixed
//! and moves only the labels, either by gradient matching (which telescopes
//! to an average of teacher trajectories) or by performance matching (ridge
//! regression on the training loss of the retrained network). Retraining
//! drivers recover output weights from a distilled set.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::construct::{build_points, scalar_set, ConstructError, HingeProfile};
use crate::network::{kernel, kernel_gram, NetworkError, NetworkParams, Surrogate};
use crate::task::LabeledSet;
use crate::training::{
    auto_eta2, auto_xi, phase2_spectral, Phase2Record, RidgeSystem, TrainingError,
};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("distilled set must contain at least one point")]
    EmptySet,
    #[error("expected {expected} {what}, got {got}")]
    LenMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("gradient matching needs a twice-differentiable surrogate; use the relu variant")]
    ReluSurrogate,
    #[error("distillation step requires lambda = 1/eta, got eta = {eta}, lambda = {lambda}")]
    DecayMismatch { eta: f64, lambda: f64 },
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Construct(#[from] ConstructError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv file has no parsable rows")]
    EmptyCsv,
}

/// Synthetic dataset for one phase; inputs are stored column-wise.
#[derive(Debug, Clone)]
pub struct DistilledSet {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub phase: u8,
}

impl DistilledSet {
    pub fn m(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }

    /// View as a labeled set for the training drivers.
    pub fn as_labeled(&self) -> LabeledSet {
        LabeledSet {
            x: self.x.clone(),
            y: self.y.clone(),
            meta: None,
        }
    }
}

/// Label distribution for the initial phase-1 synthetic set.
#[derive(Debug, Clone, Copy)]
pub enum LabelMode {
    /// Every label equals the constant.
    Constant(f64),
    /// `y^2` follows the chi distribution with `d` degrees of freedom and
    /// the sign is a fair coin.
    Chi,
}

/// Draws `m1` points uniform on the unit sphere with labels per mode.
pub fn init_d1(
    m1: usize,
    d: usize,
    mode: LabelMode,
    seed: u64,
) -> Result<DistilledSet, DistillError> {
    if m1 == 0 {
        return Err(DistillError::EmptySet);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DMatrix::zeros(d, m1);
    for m in 0..m1 {
        let mut col = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        col /= col.norm();
        x.set_column(m, &col);
    }
    let y = DVector::from_fn(m1, |_, _| match mode {
        LabelMode::Constant(c) => c,
        LabelMode::Chi => {
            let chi_sq: f64 = (0..d)
                .map(|_| {
                    let g: f64 = rng.sample(StandardNormal);
                    g * g
                })
                .sum();
            let sign = if rng.gen::<bool>() { 1.0 } else { -1.0 };
            sign * chi_sq.sqrt().sqrt()
        }
    });
    Ok(DistilledSet { x, y, phase: 1 })
}

/// Teacher weight gradients for a batch of cancelling initializations,
/// computed on half the columns and mirrored: at that initialization the
/// network output is identically zero and paired neurons share weights, so
/// column `L-1-i` is exactly the negation of column `i`.
pub fn teacher_grads_symmetric(
    inits: &[NetworkParams],
    data: &LabeledSet,
) -> Result<Vec<DMatrix<f64>>, DistillError> {
    if data.n() == 0 {
        return Err(DistillError::Network(NetworkError::EmptyDataset));
    }
    let n = data.n();
    let chunk = 4096usize;
    let mut out = Vec::with_capacity(inits.len());
    for params in inits {
        let d = params.dim();
        let l = params.width();
        let half = l / 2;
        let w_half = params.w.columns(0, half).into_owned();
        let mut q = DMatrix::zeros(d, half);
        let mut start = 0;
        while start < n {
            let width = chunk.min(n - start);
            let xc = data.x.columns(start, width);
            let z = w_half.tr_mul(&xc);
            let mut t = DMatrix::zeros(width, half);
            for c in 0..width {
                for i in 0..half {
                    if z[(i, c)] + params.b[i] > 0.0 {
                        t[(c, i)] = data.y[start + c];
                    }
                }
            }
            q += xc * t;
            start += width;
        }
        q /= n as f64;
        let mut grad = DMatrix::zeros(d, l);
        for i in 0..half {
            let col = q.column(i).into_owned();
            grad.set_column(i, &(&col * -params.a[i]));
            grad.set_column(l - 1 - i, &(&col * -params.a[l - 1 - i]));
        }
        out.push(grad);
    }
    Ok(out)
}

fn check_record_shapes(
    d0: &DistilledSet,
    inits: &[NetworkParams],
    teacher_grads: &[DMatrix<f64>],
) -> Result<(), DistillError> {
    if d0.m() == 0 {
        return Err(DistillError::EmptySet);
    }
    if inits.is_empty() || teacher_grads.len() != inits.len() {
        return Err(DistillError::LenMismatch {
            what: "teacher gradient records",
            expected: inits.len(),
            got: teacher_grads.len(),
        });
    }
    for (params, grad) in inits.iter().zip(teacher_grads) {
        if grad.shape() != params.w.shape() || params.dim() != d0.dim() {
            return Err(DistillError::LenMismatch {
                what: "gradient matrix rows",
                expected: params.dim(),
                got: grad.nrows(),
            });
        }
    }
    Ok(())
}

fn gm_t1_impl(
    d0: &DistilledSet,
    inits: &[NetworkParams],
    teacher_grads: &[DMatrix<f64>],
    surrogate: &Surrogate,
    eta: f64,
) -> DistilledSet {
    let j = inits.len() as f64;
    let l_width = inits[0].width() as f64;
    let m1 = d0.m() as f64;
    let mut x = DMatrix::zeros(d0.dim(), d0.m());
    for m in 0..d0.m() {
        let xt = d0.x.column(m).into_owned();
        let mut acc = DVector::zeros(d0.dim());
        for (params, grads) in inits.iter().zip(teacher_grads) {
            let l = params.width();
            let z = params.w.tr_mul(&xt) + &params.b;
            let gproj = grads.tr_mul(&xt);
            let mut c1 = DVector::zeros(l);
            let mut c2 = DVector::zeros(l);
            for i in 0..l {
                let slope = surrogate.slope(z[i]);
                let curve = surrogate.curvature(z[i]).unwrap_or(0.0);
                c1[i] = -params.a[i] * slope;
                c2[i] = -params.a[i] * curve * gproj[i];
            }
            acc += grads * c1 + &params.w * c2;
        }
        let scale = eta * d0.y[m] / (l_width * j * m1);
        x.set_column(m, &(acc * scale));
    }
    DistilledSet {
        x,
        y: d0.y.clone(),
        phase: 1,
    }
}

/// One-step gradient matching for the phase-1 point, surrogate closed form:
///
/// `x^(1) = (eta y / (L J M1)) sum_{i,j} [ q_{i,j} h'(<w_{i,j}, x>) +
/// w_{i,j} h''(<w_{i,j}, x>) <q_{i,j}, x> ]`
///
/// where `q_{i,j} = -a_i * (recorded teacher gradient column)`. Labels are
/// unchanged. The initializations must be at the cancelling symmetric init;
/// with `lambda = 1/eta` the initial point drops out of the update exactly.
pub fn gm_t1(
    d0: &DistilledSet,
    inits: &[NetworkParams],
    teacher_grads: &[DMatrix<f64>],
    surrogate: &Surrogate,
    eta: f64,
    lambda: f64,
) -> Result<DistilledSet, DistillError> {
    if (eta * lambda - 1.0).abs() > 1e-12 {
        return Err(DistillError::DecayMismatch { eta, lambda });
    }
    if surrogate.curvature(0.0).is_err() {
        return Err(DistillError::ReluSurrogate);
    }
    check_record_shapes(d0, inits, teacher_grads)?;
    Ok(gm_t1_impl(d0, inits, teacher_grads, surrogate, eta))
}

/// Gradient matching with the exact ReLU slope and no curvature term: the
/// same accumulation as [`gm_t1`] with `h' = 1[z > 0]` and `h'' = 0`.
pub fn gm_t1_relu(
    d0: &DistilledSet,
    inits: &[NetworkParams],
    teacher_grads: &[DMatrix<f64>],
    eta: f64,
) -> Result<DistilledSet, DistillError> {
    check_record_shapes(d0, inits, teacher_grads)?;
    Ok(gm_t1_impl(d0, inits, teacher_grads, &Surrogate::Relu, eta))
}

/// The phase-1 matching objective
/// `m = 1 - (1/LJ) sum_{i,j} <g^Tr_{i,j}, g^S_{i,j}>` with the student
/// gradient taken at the synthetic set under the surrogate activation.
/// [`gm_t1`] is `-eta` times its gradient in the synthetic points.
pub fn matching_loss(
    ds: &DistilledSet,
    inits: &[NetworkParams],
    teacher_grads: &[DMatrix<f64>],
    surrogate: &Surrogate,
) -> Result<f64, DistillError> {
    check_record_shapes(ds, inits, teacher_grads)?;
    let m1 = ds.m() as f64;
    let mut total = 0.0;
    for (params, grads) in inits.iter().zip(teacher_grads) {
        let l = params.width();
        for m in 0..ds.m() {
            let xt = ds.x.column(m).into_owned();
            let z = params.w.tr_mul(&xt) + &params.b;
            let gproj = grads.tr_mul(&xt);
            let f: f64 = (0..l).map(|i| params.a[i] * surrogate.value(z[i])).sum();
            let resid = (f - ds.y[m]) / m1;
            let inner: f64 = (0..l)
                .map(|i| params.a[i] * surrogate.slope(z[i]) * gproj[i])
                .sum();
            total += resid * inner;
        }
    }
    let l = inits[0].width() as f64;
    let j = inits.len() as f64;
    Ok(1.0 - total / (l * j))
}

/// How [`init_d2`] picks construction directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConstructStrategy {
    /// One certified scalar set per phase-1 point.
    PerPoint,
    /// A single scalar set along the mean phase-1 point.
    Compact,
}

/// Builds the phase-2 points from the trained first layer: scalars certified
/// by the hinge construction, laid out along the phase-1 direction(s).
/// Labels are zero until [`label_d2_init`] fills them.
pub fn init_d2(
    w1: &DMatrix<f64>,
    b: &DVector<f64>,
    strategy: ConstructStrategy,
    d1: &DistilledSet,
) -> Result<DistilledSet, DistillError> {
    if d1.m() == 0 {
        return Err(DistillError::EmptySet);
    }
    let directions: Vec<DVector<f64>> = match strategy {
        ConstructStrategy::PerPoint => (0..d1.m()).map(|m| d1.x.column(m).into_owned()).collect(),
        ConstructStrategy::Compact => vec![d1.x.column_mean()],
    };
    let mut columns: Vec<DVector<f64>> = Vec::new();
    for v in &directions {
        let profile = HingeProfile::new(w1, b, v)?;
        let scalars = scalar_set(&profile)?;
        let points = build_points(v, &scalars);
        for c in 0..points.ncols() {
            columns.push(points.column(c).into_owned());
        }
    }
    let x = DMatrix::from_columns(&columns);
    let m2 = x.ncols();
    Ok(DistilledSet {
        x,
        y: DVector::zeros(m2),
        phase: 2,
    })
}

/// Initial phase-2 labels: the forward pass averaged over the phase-2
/// initializations, `y_m = (1/J) sum_j f_{(a_j, W, b)}(x_m)`.
pub fn label_d2_init(
    shared: &NetworkParams,
    a_inits: &[DVector<f64>],
    points: &DMatrix<f64>,
) -> Result<DVector<f64>, DistillError> {
    if a_inits.is_empty() {
        return Err(DistillError::LenMismatch {
            what: "phase-2 initializations",
            expected: 1,
            got: 0,
        });
    }
    let mut mean_a = DVector::zeros(shared.width());
    for a in a_inits {
        mean_a += a;
    }
    mean_a /= a_inits.len() as f64;
    let k = kernel(shared, points);
    Ok(k.tr_mul(&mean_a))
}

/// One-step gradient matching on the phase-2 labels:
///
/// `y^(1) = y^(0) - eta_2^D (1/J) sum_j (1/M2) K~^T c_j`
///
/// with `c_j` the recorded teacher gradient sum. With
/// `eta_2^D = M2 eta_2^Tr` and `y^(0)` from [`label_d2_init`] this
/// telescopes to `(1/J) sum_j K~^T a_j^(T)` for any teacher horizon.
pub fn gm_t2(
    d2: &DistilledSet,
    records: &[Phase2Record],
    ktilde: &DMatrix<f64>,
    eta2_d: f64,
) -> Result<DistilledSet, DistillError> {
    if records.is_empty() {
        return Err(DistillError::LenMismatch {
            what: "teacher records",
            expected: 1,
            got: 0,
        });
    }
    if ktilde.ncols() != d2.m() {
        return Err(DistillError::LenMismatch {
            what: "feature columns",
            expected: d2.m(),
            got: ktilde.ncols(),
        });
    }
    let m2 = d2.m() as f64;
    let j = records.len() as f64;
    let mut grad_total = DVector::zeros(ktilde.nrows());
    for rec in records {
        grad_total += &rec.grad_sum;
    }
    let y = &d2.y - ktilde.tr_mul(&grad_total) * (eta2_d / (j * m2));
    Ok(DistilledSet {
        x: d2.x.clone(),
        y,
        phase: 2,
    })
}

/// The quadratic the phase-2 performance matching minimizes, reduced to its
/// second moments: gradient descent on
/// `F(y) = (1/N) ||K^T (eta_2^S / M2) K~ y - y^Tr||^2 + (lambda/2) ||y||^2`
/// is the affine iteration on `(P, q)` with
/// `P = 2 (eta_2^S / M2)^2 K~^T (K K^T / N) K~` and
/// `q = 2 (eta_2^S / M2) K~^T (K y^Tr / N)`.
pub fn pm_objective_system(
    theta1: &NetworkParams,
    train: &LabeledSet,
    d2: &DistilledSet,
    eta2_s: f64,
) -> RidgeSystem {
    let (m, z) = kernel_gram(theta1, train);
    let ktilde = kernel(theta1, &d2.x);
    let scale = eta2_s / d2.m() as f64;
    let p = ktilde.tr_mul(&m) * &ktilde * (2.0 * scale * scale);
    let q = ktilde.tr_mul(&z) * (2.0 * scale);
    RidgeSystem::from_parts(p, q)
}

/// One-step performance matching: descends the training loss of the
/// one-step-retrained network in the phase-2 labels. A zero `eta2_d`
/// resolves from the stability bound, a zero `xi2_d` from [`auto_xi`] with
/// `c = 5`. Points never move.
pub fn pm_t2(
    d2: &DistilledSet,
    theta1: &NetworkParams,
    train: &LabeledSet,
    eta2_s: f64,
    eta2_d: f64,
    lambda2_d: f64,
    xi2_d: usize,
) -> Result<DistilledSet, DistillError> {
    let system = pm_objective_system(theta1, train, d2, eta2_s);
    let eta = if eta2_d > 0.0 {
        eta2_d
    } else {
        auto_eta2(system.max_curvature(), lambda2_d)
    };
    let xi = if xi2_d > 0 {
        xi2_d
    } else {
        auto_xi(5.0, eta, lambda2_d)?
    };
    let rec = phase2_spectral(&system, eta, lambda2_d, xi, &d2.y)?;
    Ok(DistilledSet {
        x: d2.x.clone(),
        y: rec.a,
        phase: 2,
    })
}

/// Smallest eigenvalue of `K~ K~^T` above the `1e-10` positivity threshold.
pub fn sigma_min_positive(ktilde: &DMatrix<f64>) -> f64 {
    let gram = ktilde * ktilde.transpose();
    let sym = (&gram + gram.transpose()) * 0.5;
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .cloned()
        .filter(|&v| v > 1e-10)
        .fold(f64::INFINITY, f64::min)
}

/// Plain gradient descent on the distilled least squares from zero output
/// weights; converges to the minimum-norm interpolant `(K~^T)^+ y`. Zero
/// `eta2_r` or `xi2_r` resolve automatically, the iteration count from the
/// smallest positive eigenvalue of `K~ K~^T`.
pub fn retrain_t2_gd(
    theta1: &NetworkParams,
    d2: &DistilledSet,
    eta2_r: f64,
    xi2_r: usize,
) -> Result<DVector<f64>, DistillError> {
    let ktilde = kernel(theta1, &d2.x);
    let m2 = d2.m() as f64;
    let gram = &ktilde * ktilde.transpose() / m2;
    let z = &ktilde * &d2.y / m2;
    let system = RidgeSystem::from_parts(gram, z);
    let eta = if eta2_r > 0.0 {
        eta2_r
    } else {
        auto_eta2(system.max_curvature(), 0.0)
    };
    let xi = if xi2_r > 0 {
        xi2_r
    } else {
        auto_xi(5.0, eta, sigma_min_positive(&ktilde) / m2)?
    };
    let a0 = DVector::zeros(theta1.width());
    let rec = phase2_spectral(&system, eta, 0.0, xi, &a0)?;
    Ok(rec.a)
}

/// The single retraining step from zero output weights:
/// `a^(1) = (eta_2^R / M2) K~ y`.
pub fn retrain_t2_onestep(
    theta1: &NetworkParams,
    d2: &DistilledSet,
    eta2_r: f64,
) -> DVector<f64> {
    let ktilde = kernel(theta1, &d2.x);
    &ktilde * &d2.y * (eta2_r / d2.m() as f64)
}

/// Writes a distilled set as CSV with columns `x_0..x_{d-1}, y, phase`.
pub fn save_distilled(set: &DistilledSet, path: &Path) -> Result<(), DistillError> {
    let mut writer = csv::WriterBuilder::new().from_path(path)?;
    let d = set.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    header.push("y".to_string());
    header.push("phase".to_string());
    writer.write_record(&header)?;
    for m in 0..set.m() {
        let mut row: Vec<String> = (0..d).map(|i| set.x[(i, m)].to_string()).collect();
        row.push(set.y[m].to_string());
        row.push(set.phase.to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a distilled set written by [`save_distilled`].
pub fn load_distilled(path: &Path) -> Result<DistilledSet, DistillError> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row: Vec<f64> = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| DistillError::EmptyCsv)?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(DistillError::EmptyCsv);
    }
    let d = rows[0].len() - 2;
    let n = rows.len();
    let x = DMatrix::from_fn(d, n, |i, j| rows[j][i]);
    let y = DVector::from_fn(n, |j, _| rows[j][d]);
    let phase = rows[0][d + 1] as u8;
    Ok(DistilledSet { x, y, phase })
}
