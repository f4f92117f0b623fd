//! The two training phases and their hyperparameter plans.
//!
//! Phase 1 is a single gradient step on the first-layer weights with weight
//! decay `lambda = 1/eta`, which cancels the initialization exactly. Phase 2
//! is ridge gradient descent on the output weights with the first layer
//! frozen. Because the phase-2 map is affine in `a`, a batch of
//! initializations sharing the same features can be trained through one
//! eigendecomposition of the feature second-moment matrix; the literal loop
//! is kept alongside as the reference implementation.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::network::{forward_batch, grad_w, kernel_gram, NetworkError, NetworkParams};
use crate::task::LabeledSet;

#[derive(Debug, Error)]
pub enum TrainingError {
    #[error("phase 1 requires lambda = 1/eta, got eta = {eta}, lambda = {lambda}")]
    PhaseOneDecayMismatch { eta: f64, lambda: f64 },
    #[error("step size {eta} exceeds the stability bound {bound}")]
    UnstableStep { eta: f64, bound: f64 },
    #[error("phase {t} does not accept this initialization batch")]
    PhaseMismatch { t: u8 },
    #[error("hyperparameter must be resolved before use: {0}")]
    UnresolvedHyper(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
}

/// Step size, decay, and iteration count for one phase in one role.
///
/// A zero `eta` or `xi` on a phase-2 entry means "resolve from data": the
/// step size from the stability bound, the iteration count from
/// [`auto_xi`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseHyper {
    pub eta: f64,
    pub lambda: f64,
    pub xi: usize,
}

/// Which first-phase scaling to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlanKind {
    SingleIndex,
    MultiIndex,
}

/// Hyperparameters for both phases across the teacher (tr), student (s),
/// distillation (d), and retraining (r) roles, plus the initialization batch
/// size `j` and the distilled set sizes `m1`, `m2`.
#[derive(Debug, Clone, PartialEq)]
pub struct PhasePlan {
    pub t1_tr: PhaseHyper,
    pub t1_s: PhaseHyper,
    pub t1_d: PhaseHyper,
    pub t1_r: PhaseHyper,
    pub t2_tr: PhaseHyper,
    pub t2_s: PhaseHyper,
    pub t2_d: PhaseHyper,
    pub t2_r: PhaseHyper,
    pub j: usize,
    pub m1: usize,
    pub m2: usize,
}

impl PhasePlan {
    /// Checks the phase-1 reciprocal decay, the one-step student phase, and
    /// positive sizes.
    pub fn validate(&self) -> Result<(), TrainingError> {
        for hyper in [&self.t1_tr, &self.t1_s, &self.t1_d, &self.t1_r] {
            if (hyper.eta * hyper.lambda - 1.0).abs() > 1e-9 {
                return Err(TrainingError::PhaseOneDecayMismatch {
                    eta: hyper.eta,
                    lambda: hyper.lambda,
                });
            }
            if hyper.xi != 1 {
                return Err(TrainingError::UnresolvedHyper(format!(
                    "phase 1 is a single step, got xi = {}",
                    hyper.xi
                )));
            }
        }
        if self.t2_s.xi != 1 {
            return Err(TrainingError::UnresolvedHyper(format!(
                "the phase-2 student takes one step, got xi = {}",
                self.t2_s.xi
            )));
        }
        if self.j == 0 || self.m1 == 0 || self.m2 == 0 {
            return Err(TrainingError::UnresolvedHyper(
                "j, m1, m2 must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Defaults with every order constant set to one: `eta_1^D = sqrt(d)` and
/// `eta_1^R = d` for single-index plans (`sqrt(d)/r` for multi-index), all
/// phase-1 decays reciprocal, `m1 = 1` or `ceil(r^2 log d)`. Phase-2 step
/// sizes and iteration counts are left at zero for data-driven resolution.
pub fn default_plan(d: usize, r: usize, kind: PlanKind) -> PhasePlan {
    let sqrt_d = (d as f64).sqrt();
    let eta_fast = sqrt_d;
    let eta_slow = match kind {
        PlanKind::SingleIndex => d as f64,
        PlanKind::MultiIndex => sqrt_d / r as f64,
    };
    let one_step = |eta: f64| PhaseHyper {
        eta,
        lambda: 1.0 / eta,
        xi: 1,
    };
    let unresolved = PhaseHyper {
        eta: 0.0,
        lambda: 0.0,
        xi: 0,
    };
    let m1 = match kind {
        PlanKind::SingleIndex => 1,
        PlanKind::MultiIndex => ((r * r) as f64 * (d as f64).ln()).ceil() as usize,
    };
    PhasePlan {
        t1_tr: one_step(eta_slow),
        t1_s: one_step(eta_fast),
        t1_d: one_step(eta_fast),
        t1_r: one_step(eta_slow),
        t2_tr: unresolved,
        t2_s: PhaseHyper { xi: 1, ..unresolved },
        t2_d: unresolved,
        t2_r: unresolved,
        j: 1,
        m1,
        m2: 1,
    }
}

/// Record of a phase-1 step: the updated parameters and the weight gradient
/// that produced them.
#[derive(Debug, Clone)]
pub struct Phase1Record {
    pub params: NetworkParams,
    pub grad: DMatrix<f64>,
}

/// Record of a phase-2 run: the final output weights, the exact gradient sum
/// `(a^(0) - a^(xi)) / eta`, and the per-iteration gradients when requested.
#[derive(Debug, Clone)]
pub struct Phase2Record {
    pub a: DVector<f64>,
    pub grad_sum: DVector<f64>,
    pub grads: Option<Vec<DVector<f64>>>,
}

/// One weight-decayed gradient step on the first layer. With
/// `lambda = 1/eta` the initialization cancels and the output weights equal
/// `-eta * grad_w` exactly.
pub fn phase1_step(
    params: &NetworkParams,
    data: &LabeledSet,
    eta: f64,
    lambda: f64,
) -> Result<Phase1Record, TrainingError> {
    if (eta * lambda - 1.0).abs() > 1e-12 {
        return Err(TrainingError::PhaseOneDecayMismatch { eta, lambda });
    }
    let grad = grad_w(params, data)?;
    let w = &grad * (-eta);
    Ok(Phase1Record {
        params: NetworkParams {
            a: params.a.clone(),
            w,
            b: params.b.clone(),
        },
        grad,
    })
}

/// Feature second moments of a frozen first layer on a dataset:
/// `m = K K^T / N`, `z = K y / N`, and the eigendecomposition of `m` that
/// the spectral phase-2 solvers run on.
#[derive(Debug, Clone)]
pub struct RidgeSystem {
    m: DMatrix<f64>,
    z: DVector<f64>,
    q: DMatrix<f64>,
    evals: DVector<f64>,
}

impl RidgeSystem {
    pub fn new(params: &NetworkParams, data: &LabeledSet) -> RidgeSystem {
        let (m, z) = kernel_gram(params, data);
        RidgeSystem::from_parts(m, z)
    }

    pub fn from_parts(m: DMatrix<f64>, z: DVector<f64>) -> RidgeSystem {
        let sym = (&m + m.transpose()) * 0.5;
        let eig = sym.clone().symmetric_eigen();
        RidgeSystem {
            m: sym,
            z,
            q: eig.eigenvectors,
            evals: eig.eigenvalues,
        }
    }

    pub fn second_moment(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn moment_vector(&self) -> &DVector<f64> {
        &self.z
    }

    /// Largest eigenvalue of `K K^T / N`.
    pub fn max_curvature(&self) -> f64 {
        self.evals.iter().cloned().fold(0.0f64, f64::max)
    }

    /// Smallest eigenvalue above the numerical rank cutoff.
    pub fn min_positive_curvature(&self) -> f64 {
        let tol = self.rank_tol();
        self.evals
            .iter()
            .cloned()
            .filter(|&v| v > tol)
            .fold(f64::INFINITY, f64::min)
    }

    fn rank_tol(&self) -> f64 {
        1e-12 * self.max_curvature().max(1.0)
    }

    /// Ridge solution `(m + lambda I)^{-1} z`; at `lambda = 0` the null
    /// modes are dropped, giving the minimum-norm solution.
    pub fn closed_form(&self, lambda: f64) -> DVector<f64> {
        let tol = self.rank_tol();
        let zt = self.q.tr_mul(&self.z);
        let coef = DVector::from_fn(zt.len(), |k, _| {
            let denom = self.evals[k] + lambda;
            if denom > tol {
                zt[k] / denom
            } else {
                0.0
            }
        });
        &self.q * coef
    }
}

/// Stability bound for the affine phase-2 map: `eta < 2/(lambda + max_eig)`.
fn check_stability(eta: f64, lambda: f64, max_curvature: f64) -> Result<(), TrainingError> {
    let bound = 2.0 / (lambda + max_curvature);
    if !(eta > 0.0) || eta >= bound {
        return Err(TrainingError::UnstableStep { eta, bound });
    }
    Ok(())
}

/// Step size `0.9 * 2 / (lambda + max_eig)`, safely inside the stability
/// region.
pub fn auto_eta2(max_curvature: f64, lambda: f64) -> f64 {
    0.9 * 2.0 / (lambda + max_curvature)
}

/// Iteration count `ceil(c / (eta * rate))` for a mode contracting at
/// `1 - eta * rate` per step.
pub fn auto_xi(c: f64, eta: f64, rate: f64) -> Result<usize, TrainingError> {
    if eta * rate <= 0.0 {
        return Err(TrainingError::UnresolvedHyper(format!(
            "iteration count needs eta * rate > 0, got {eta} * {rate}"
        )));
    }
    Ok((c / (eta * rate)).ceil() as usize)
}

/// Literal phase-2 loop: `xi` iterations of
/// `a <- a - eta * ((1/N) K (K^T a - y) + lambda a)`, computed through the
/// precomputed second moments. Gradients are stored when `record_grads` is
/// set; their sum is always returned.
pub fn phase2_ridge(
    params: &NetworkParams,
    data: &LabeledSet,
    eta: f64,
    lambda: f64,
    xi: usize,
    a0: &DVector<f64>,
    record_grads: bool,
) -> Result<Phase2Record, TrainingError> {
    let system = RidgeSystem::new(params, data);
    check_stability(eta, lambda, system.max_curvature())?;
    let mut a = a0.clone();
    let mut grad_sum = DVector::zeros(a.len());
    let mut grads = if record_grads {
        Some(Vec::with_capacity(xi))
    } else {
        None
    };
    for _ in 0..xi {
        let g = &system.m * &a - &system.z + &a * lambda;
        grad_sum += &g;
        if let Some(list) = grads.as_mut() {
            list.push(g.clone());
        }
        a -= &g * eta;
    }
    Ok(Phase2Record { a, grad_sum, grads })
}

/// Spectral phase-2 solve: the same affine iteration resolved per eigenmode
/// with geometric sums, so the cost is independent of `xi`.
pub fn phase2_spectral(
    system: &RidgeSystem,
    eta: f64,
    lambda: f64,
    xi: usize,
    a0: &DVector<f64>,
) -> Result<Phase2Record, TrainingError> {
    check_stability(eta, lambda, system.max_curvature())?;
    let zt = system.q.tr_mul(&system.z);
    let at = system.q.tr_mul(a0);
    let mut out = DVector::zeros(a0.len());
    for k in 0..out.len() {
        let denom = system.evals[k] + lambda;
        let rho = 1.0 - eta * denom;
        let decay = if xi <= i32::MAX as usize {
            rho.powi(xi as i32)
        } else {
            rho.powf(xi as f64)
        };
        out[k] = if denom.abs() < 1e-300 {
            at[k] + eta * xi as f64 * zt[k]
        } else {
            decay * at[k] + (1.0 - decay) * zt[k] / denom
        };
    }
    let a = &system.q * out;
    let grad_sum = (a0 - &a) / eta;
    Ok(Phase2Record {
        a,
        grad_sum,
        grads: None,
    })
}

/// Selects the phase-2 teacher decay on a log grid `10^-4 .. 10^0` by
/// validation mean squared error of the closed-form ridge fit. Returns the
/// winning decay and its validation error.
pub fn select_lambda2(
    params: &NetworkParams,
    train: &LabeledSet,
    val: &LabeledSet,
    grid: Option<&[f64]>,
) -> (f64, f64) {
    let default_grid: Vec<f64> = (0..=12).map(|i| 10f64.powf(-4.0 + i as f64 / 3.0)).collect();
    let grid = grid.unwrap_or(&default_grid);
    let system = RidgeSystem::new(params, train);
    let mut best = (grid[0], f64::INFINITY);
    for &lambda in grid {
        let a = system.closed_form(lambda);
        let candidate = NetworkParams {
            a,
            w: params.w.clone(),
            b: params.b.clone(),
        };
        let pred = forward_batch(&candidate, &val.x);
        let mse = (pred - &val.y).norm_squared() / val.n() as f64;
        if mse < best.1 {
            best = (lambda, mse);
        }
    }
    best
}

/// Phase-2 initialization batch: all networks share the frozen first layer
/// and biases and differ only in their starting output weights.
#[derive(Debug, Clone)]
pub struct Phase2Batch {
    pub shared: NetworkParams,
    pub a0: Vec<DVector<f64>>,
}

/// Builds the phase-2 batch: index 0 starts from zero output weights (the
/// retraining target trajectory), indices `1..=j` from seeded random signs.
pub fn make_phase2_batch(shared: &NetworkParams, j: usize, seed: u64) -> Phase2Batch {
    let l = shared.width();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut a0 = Vec::with_capacity(j + 1);
    a0.push(DVector::zeros(l));
    for _ in 0..j {
        a0.push(DVector::from_fn(l, |_, _| {
            if rng.gen::<bool>() {
                1.0
            } else {
                -1.0
            }
        }));
    }
    Phase2Batch {
        shared: shared.clone(),
        a0,
    }
}

/// Initializations for one round of teacher training.
pub enum InitBatch<'a> {
    PhaseOne(&'a [NetworkParams]),
    PhaseTwo(&'a Phase2Batch),
}

/// Teacher training output for one round.
pub enum TrainRecords {
    PhaseOne(Vec<Phase1Record>),
    PhaseTwo(Vec<Phase2Record>),
}

/// Runs teacher training for phase `t` over the whole initialization batch.
/// Phase 2 resolves a zero step size from the stability bound and a zero
/// iteration count from [`auto_xi`] with `c = 5`.
pub fn teacher_train(
    batch: InitBatch,
    data: &LabeledSet,
    plan: &PhasePlan,
    t: u8,
) -> Result<TrainRecords, TrainingError> {
    match (t, batch) {
        (1, InitBatch::PhaseOne(inits)) => {
            let mut records = Vec::with_capacity(inits.len());
            for params in inits {
                records.push(phase1_step(params, data, plan.t1_tr.eta, plan.t1_tr.lambda)?);
            }
            Ok(TrainRecords::PhaseOne(records))
        }
        (2, InitBatch::PhaseTwo(batch)) => {
            let lambda = plan.t2_tr.lambda;
            let system = RidgeSystem::new(&batch.shared, data);
            let eta = if plan.t2_tr.eta > 0.0 {
                plan.t2_tr.eta
            } else {
                auto_eta2(system.max_curvature(), lambda)
            };
            let xi = if plan.t2_tr.xi > 0 {
                plan.t2_tr.xi
            } else {
                auto_xi(5.0, eta, lambda)?
            };
            let mut records = Vec::with_capacity(batch.a0.len());
            for a0 in &batch.a0 {
                records.push(phase2_spectral(&system, eta, lambda, xi, a0)?);
            }
            Ok(TrainRecords::PhaseTwo(records))
        }
        (t, _) => Err(TrainingError::PhaseMismatch { t }),
    }
}
