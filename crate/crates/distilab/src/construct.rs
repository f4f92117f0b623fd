//! Rank-certified point construction for the second distilled set.
//!
//! All points live on one line `{s v}`, so each ReLU feature
//! `relu(alpha_i s + b_i)` is a piecewise-affine function of the scalar `s`
//! with a single hinge at `-b_i / alpha_i`. Sampling two scalars inside
//! every interval between consecutive hinges, plus points beyond both ends
//! and the mirrored set, certifies that the feature matrix reaches the
//! maximal rank any point set can achieve for the given first layer.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConstructError {
    #[error("no active neurons: every projection onto the direction is zero")]
    NoActiveNeurons,
    #[error("direction has dimension {got}, first layer expects {expected}")]
    DimMismatch { expected: usize, got: usize },
}

/// Feature geometry along one direction `v`: projections
/// `alpha_i = <w_i, v>`, the active index set, and the sorted hinge
/// locations with ties separated.
#[derive(Debug, Clone)]
pub struct HingeProfile {
    pub alpha: DVector<f64>,
    pub b: DVector<f64>,
    pub active: Vec<usize>,
    pub hinges: Vec<f64>,
    pub tau_bar: f64,
}

impl HingeProfile {
    pub fn new(
        w1: &DMatrix<f64>,
        b: &DVector<f64>,
        v: &DVector<f64>,
    ) -> Result<HingeProfile, ConstructError> {
        if v.len() != w1.nrows() {
            return Err(ConstructError::DimMismatch {
                expected: w1.nrows(),
                got: v.len(),
            });
        }
        let alpha = w1.tr_mul(v);
        let max_alpha = alpha.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        let active: Vec<usize> = (0..alpha.len())
            .filter(|&i| alpha[i].abs() > 1e-12 * max_alpha.max(1e-300))
            .collect();
        let mut hinges: Vec<f64> = active.iter().map(|&i| -b[i] / alpha[i]).collect();
        hinges.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let tau_bar = 1.0 + hinges.iter().fold(0.0f64, |m, t| m.max(t.abs()));
        for k in 1..hinges.len() {
            if hinges[k] - hinges[k - 1] < 1e-12 * tau_bar {
                hinges[k] = hinges[k - 1] + 1e-9 * tau_bar;
            }
        }
        Ok(HingeProfile {
            alpha,
            b: b.clone(),
            active,
            hinges,
            tau_bar,
        })
    }

    pub fn l_star(&self) -> usize {
        self.active.len()
    }
}

/// The certified scalar set `C = C' u (-C')`: two points inside every
/// interval between consecutive hinges, two beyond each end at offsets
/// `tau_bar` and `2 tau_bar`, then the mirror image, duplicates removed.
/// Returned sorted ascending.
pub fn scalar_set(profile: &HingeProfile) -> Result<Vec<f64>, ConstructError> {
    if profile.l_star() == 0 {
        return Err(ConstructError::NoActiveNeurons);
    }
    let taus = &profile.hinges;
    let l_star = taus.len();
    let tau_bar = profile.tau_bar;
    let mut c_prime = Vec::with_capacity(2 * l_star + 2);
    for k in 0..l_star - 1 {
        c_prime.push((3.0 * taus[k] + taus[k + 1]) / 4.0);
        c_prime.push((taus[k] + 3.0 * taus[k + 1]) / 4.0);
    }
    c_prime.push(taus[0] - tau_bar);
    c_prime.push(taus[0] - 2.0 * tau_bar);
    c_prime.push(taus[l_star - 1] + tau_bar);
    c_prime.push(taus[l_star - 1] + 2.0 * tau_bar);

    let mut c: Vec<f64> = c_prime.iter().flat_map(|&s| [s, -s]).collect();
    c.sort_by(|x, y| x.partial_cmp(y).unwrap());
    c.dedup();
    Ok(c)
}

/// The largest feature-matrix rank any point set can reach: the number of
/// nonzero first-layer weights, plus one when some inactive neuron has a
/// positive bias (its feature row is a nonzero constant).
pub fn max_attainable_rank(w1: &DMatrix<f64>, b: &DVector<f64>) -> usize {
    let mut active = 0usize;
    let mut constant_row = false;
    for i in 0..w1.ncols() {
        if w1.column(i).norm() > 1e-12 {
            active += 1;
        } else if b[i] > 0.0 {
            constant_row = true;
        }
    }
    active + usize::from(constant_row)
}

/// Report from [`check_regularity`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegularityReport {
    pub ok: bool,
    pub achieved: usize,
    pub required: usize,
}

/// Compares the numeric rank of a feature matrix (singular values above
/// `1e-10 * sigma_max`) against [`max_attainable_rank`].
pub fn check_regularity(
    ktilde: &DMatrix<f64>,
    w1: &DMatrix<f64>,
    b: &DVector<f64>,
) -> RegularityReport {
    let required = max_attainable_rank(w1, b);
    let achieved = numeric_rank(ktilde);
    RegularityReport {
        ok: achieved >= required,
        achieved,
        required,
    }
}

fn numeric_rank(m: &DMatrix<f64>) -> usize {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0;
    }
    let svd = m.clone().svd(false, false);
    let sigma_max = svd.singular_values.iter().fold(0.0f64, |a, &s| a.max(s));
    if sigma_max == 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|&&s| s > 1e-10 * sigma_max)
        .count()
}

/// Lays the scalars out along the direction: column `m` is `c[m] * v`.
pub fn build_points(v: &DVector<f64>, c: &[f64]) -> DMatrix<f64> {
    let mut points = DMatrix::zeros(v.len(), c.len());
    for (m, &s) in c.iter().enumerate() {
        points.set_column(m, &(v * s));
    }
    points
}
