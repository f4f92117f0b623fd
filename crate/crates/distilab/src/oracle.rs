//! Population gradients of the phase-1 matching objective.
//!
//! The matched point moves along `G = E_w[E_x[f(x) x relu'(<w,x>)] h'(<w,xt>)]
//! + E_w[w h''(<w,xt>) <E_x[f(x) x relu'(<w,x>)], xt>]` with `w` uniform on
//! the sphere and `x` standard normal. For a single-index task the outer
//! expectation collapses to one-dimensional integrals against the sphere
//! overlap density; for several indices only the dominant term `c_d H xt`
//! is closed-form. A nested Monte-Carlo estimator serves as the reference
//! for both, and the integration-by-parts identities behind the reduction
//! are checkable on their own.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::hermite::relu_hermite_coeff;
use crate::network::Surrogate;
use crate::quadrature::{
    log_density_normalizer, sphere_moment, weighted_integral, QuadratureError, QuadratureRule,
};
use crate::task::{eval_target_batch, task_spectra, MultiIndexTask, SpectraMode, TaskError};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("closed form needs a single-index task, got r = {0}")]
    MultiIndexTask(usize),
    #[error("probe point must have unit norm, got {0}")]
    ProbeNotUnit(f64),
    #[error("population gradient needs a twice-differentiable surrogate")]
    ReluSurrogate,
    #[error("monte carlo needs at least 4 sphere samples and 1 input sample")]
    TooFewSamples,
    #[error(transparent)]
    Quadrature(#[from] QuadratureError),
    #[error(transparent)]
    Task(#[from] TaskError),
}

/// Closed form, Monte-Carlo reference, and the dominant-term comparison for
/// one probe point.
#[derive(Debug, Clone)]
pub struct PopGradReport {
    pub closed_form: DVector<f64>,
    pub mc: DVector<f64>,
    pub se: DVector<f64>,
    pub cos_to_target: f64,
    pub c_d: f64,
}

/// Gaps of the three sphere-marginal identities evaluated by quadrature.
#[derive(Debug, Clone, Copy)]
pub struct IbpReport {
    /// `|E_t[t h'(t)] - (1/d) E_z[h''(z)]|` with `z` under the `d+2` marginal.
    pub parts_gap: f64,
    /// `|E_t[t^2] - 1/d|`.
    pub square_gap: f64,
    /// `|E_t[1 - t^2] - Z_d / Z_{d+2}|` with `Z` the marginal normalizers.
    pub mass_gap: f64,
}

/// The sphere coefficients of one degree for a single-index task: the
/// binomial sums over even and odd powers of the off-axis overlap, each a
/// product of a sphere moment and a one-dimensional weighted integral.
#[derive(Debug, Clone, Copy)]
pub struct SphereCoefficients {
    pub a: f64,
    pub b: f64,
    pub d: f64,
    pub e: f64,
    pub f: f64,
    pub g: f64,
    pub h: f64,
}

fn binom(n: usize, k: usize) -> f64 {
    let mut out = 1.0;
    for i in 0..k {
        out *= (n - i) as f64 / (i + 1) as f64;
    }
    out
}

fn require_c2(h: &Surrogate) -> Result<(), OracleError> {
    h.curvature(0.0).map_err(|_| OracleError::ReluSurrogate)?;
    Ok(())
}

fn require_unit(xt: &DVector<f64>) -> Result<(), OracleError> {
    let norm = xt.norm();
    if (norm - 1.0).abs() > 1e-8 {
        return Err(OracleError::ProbeNotUnit(norm));
    }
    Ok(())
}

fn even_split<F: Fn(f64) -> f64>(
    k: usize,
    s: f64,
    rho2: f64,
    shift: u32,
    rule: &QuadratureRule,
    g: &F,
) -> Result<f64, OracleError> {
    let mut total = 0.0;
    for i in 0..=(k / 2) {
        let moment = sphere_moment(i, rule.d())?;
        let integral = weighted_integral(g, (k - 2 * i) as u32 + shift, i as u32, rule);
        total += binom(k, 2 * i) * s.powi((k - 2 * i) as i32) * rho2.powi(i as i32) * moment
            * integral;
    }
    Ok(total)
}

fn odd_split<F: Fn(f64) -> f64>(
    k: usize,
    s: f64,
    rho2: f64,
    shift: u32,
    rule: &QuadratureRule,
    g: &F,
) -> Result<f64, OracleError> {
    if k == 0 {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for i in 0..=((k - 1) / 2) {
        let moment = sphere_moment(i + 1, rule.d())?;
        let integral = weighted_integral(g, (k - 2 * i - 1) as u32 + shift, i as u32 + 1, rule);
        total += binom(k, 2 * i + 1) * s.powi((k - 2 * i - 1) as i32) * rho2.powi(i as i32)
            * moment
            * integral;
    }
    Ok(total)
}

/// All seven degree-`k` coefficients at overlap `s = <beta, xt>` and
/// orthogonal mass `rho2 = ||beta - s xt||^2`.
pub fn sphere_coefficients(
    k: usize,
    s: f64,
    rho2: f64,
    rule: &QuadratureRule,
    h: &Surrogate,
) -> Result<SphereCoefficients, OracleError> {
    require_c2(h)?;
    let slope = |t: f64| h.slope(t);
    let curve = |t: f64| h.curvature(t).unwrap_or(0.0);
    Ok(SphereCoefficients {
        a: even_split(k, s, rho2, 1, rule, &slope)?,
        b: odd_split(k, s, rho2, 0, rule, &slope)?,
        d: even_split(k, s, rho2, 0, rule, &slope)?,
        e: even_split(k, s, rho2, 1, rule, &curve)?,
        f: odd_split(k, s, rho2, 0, rule, &curve)?,
        g: even_split(k, s, rho2, 2, rule, &curve)?,
        h: odd_split(k, s, rho2, 1, rule, &curve)?,
    })
}

/// Leading dominant-term coefficient from a generic curvature function:
/// `(1/d) E_{d+2}[g] + (1/(d-1)) E_d[(1-t^2) g]`.
pub fn leading_coefficient_generic<F: Fn(f64) -> f64>(
    d: usize,
    nodes: usize,
    g: F,
) -> Result<f64, OracleError> {
    let rule_d = QuadratureRule::new(d, nodes)?;
    let rule_up = QuadratureRule::new(d + 2, nodes)?;
    let bulk = weighted_integral(&g, 0, 0, &rule_up) / d as f64;
    let edge = weighted_integral(&g, 0, 1, &rule_d) / (d as f64 - 1.0);
    Ok(bulk + edge)
}

/// The coefficient for a surrogate's curvature.
pub fn leading_coefficient(
    h: &Surrogate,
    d: usize,
    nodes: usize,
) -> Result<f64, OracleError> {
    require_c2(h)?;
    leading_coefficient_generic(d, nodes, |t| h.curvature(t).unwrap_or(0.0))
}

/// Exact population centering `(alpha, gamma)` of the target: the mean and
/// the linear Hermite component mapped back to ambient coordinates.
pub fn population_centering(
    task: &MultiIndexTask,
) -> Result<(f64, DVector<f64>), OracleError> {
    let spectra = task_spectra(task, SpectraMode::Analytic)?;
    let alpha = spectra.c[0].as_scalar();
    let gamma = if spectra.c.len() > 1 {
        task.b() * spectra.c[1].to_vector()
    } else {
        DVector::zeros(task.d())
    };
    Ok((alpha, gamma))
}

/// Single-index population gradient, exact up to quadrature: a combination
/// of `beta`, `xt`, and `beta_perp` with coefficients built from
/// [`sphere_coefficients`] and the relu Hermite constants.
pub fn popgrad_single_closed(
    task: &MultiIndexTask,
    xt: &DVector<f64>,
    h: &Surrogate,
    rule: &QuadratureRule,
) -> Result<DVector<f64>, OracleError> {
    if task.r() != 1 {
        return Err(OracleError::MultiIndexTask(task.r()));
    }
    require_unit(xt)?;
    require_c2(h)?;
    let spectra = task_spectra(task, SpectraMode::Analytic)?;
    let beta = task.beta();
    let s = beta.dot(xt);
    let bperp = &beta - xt * s;
    let rho2 = bperp.norm_squared();
    let p = task.degree();
    let link_c = |k: usize| spectra.c[k].values()[0];

    let mut factorial = vec![1.0f64; p + 1];
    for k in 1..=p {
        factorial[k] = factorial[k - 1] * k as f64;
    }

    let mut beta_coef = 0.0;
    let mut xt_coef = 0.0;
    let mut perp_coef = 0.0;
    for k in 1..=p {
        let coeffs = sphere_coefficients(k, s, rho2, rule, h)?;
        if k + 1 <= p {
            let s1 = relu_hermite_coeff(k + 1) * link_c(k + 1) / factorial[k];
            beta_coef += s1 * coeffs.d;
            xt_coef += s * s1 * coeffs.e;
            perp_coef += s * s1 * coeffs.f;
        }
        if k >= 2 {
            let s2 = relu_hermite_coeff(k + 2) * link_c(k) / factorial[k];
            xt_coef += s2 * (coeffs.a + coeffs.g);
            perp_coef += s2 * (coeffs.b + coeffs.h);
        }
    }
    Ok(beta * beta_coef + xt * xt_coef + bperp * perp_coef)
}

/// Dominant multi-index term `c_d H xt` plus the predicted scale `r/d^2` of
/// the neglected remainder.
pub fn popgrad_multi_dominant(
    task: &MultiIndexTask,
    xt: &DVector<f64>,
    h: &Surrogate,
    nodes: usize,
) -> Result<(DVector<f64>, f64), OracleError> {
    require_unit(xt)?;
    require_c2(h)?;
    let spectra = task_spectra(task, SpectraMode::Analytic)?;
    let c_d = leading_coefficient(h, task.d(), nodes)?;
    let residual = task.r() as f64 / (task.d() as f64).powi(2);
    Ok((&spectra.h * xt * c_d, residual))
}

/// Nested Monte-Carlo reference: `nw` sphere directions in antithetic pairs,
/// `nx` fresh inputs per pair, the target centered with the exact population
/// `(alpha, gamma)`. Returns the estimate and per-coordinate standard errors
/// over the pair averages.
pub fn popgrad_mc(
    task: &MultiIndexTask,
    xt: &DVector<f64>,
    h: &Surrogate,
    nw: usize,
    nx: usize,
    seed: u64,
) -> Result<(DVector<f64>, DVector<f64>), OracleError> {
    require_unit(xt)?;
    require_c2(h)?;
    if nw < 4 || nx == 0 {
        return Err(OracleError::TooFewSamples);
    }
    let d = task.d();
    let (alpha, gamma) = population_centering(task)?;
    let pairs = nw / 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sum = DVector::zeros(d);
    let mut sumsq = DVector::zeros(d);
    for _ in 0..pairs {
        let mut w = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        w /= w.norm();
        let x = DMatrix::from_fn(d, nx, |_, _| rng.sample::<f64, _>(StandardNormal));
        let mut fhat = eval_target_batch(task, &x);
        fhat.add_scalar_mut(-alpha);
        fhat -= x.tr_mul(&gamma);
        let z = x.tr_mul(&w);
        let mut gated = fhat.clone();
        for (g, &zv) in gated.iter_mut().zip(z.iter()) {
            if zv <= 0.0 {
                *g = 0.0;
            }
        }
        let inner_plus = &x * &gated / nx as f64;
        let inner_mean = &x * &fhat / nx as f64;
        let inner_minus = inner_mean - &inner_plus;
        let mut pair_avg = DVector::zeros(d);
        for (wv, inner) in [(w.clone(), inner_plus), (-w.clone(), inner_minus)] {
            let t = wv.dot(xt);
            let slope = h.slope(t);
            let curve = h.curvature(t).unwrap_or(0.0);
            pair_avg += &inner * slope + &wv * (curve * inner.dot(xt));
        }
        pair_avg /= 2.0;
        sum += &pair_avg;
        sumsq += pair_avg.component_mul(&pair_avg);
    }
    let n = pairs as f64;
    let mean = sum / n;
    let denom = (pairs.max(2) - 1) as f64;
    let se = DVector::from_fn(d, |i, _| {
        let var = (sumsq[i] / n - mean[i] * mean[i]).max(0.0) * n / denom;
        (var / n).sqrt()
    });
    Ok((mean, se))
}

/// Evaluates the three identities for a generic slope/curvature pair.
pub fn ibp_gaps_generic<F, G>(
    d: usize,
    nodes: usize,
    slope: F,
    curvature: G,
) -> Result<IbpReport, OracleError>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    let rule_d = QuadratureRule::new(d, nodes)?;
    let rule_up = QuadratureRule::new(d + 2, nodes)?;
    let lhs = weighted_integral(&slope, 1, 0, &rule_d);
    let rhs = weighted_integral(&curvature, 0, 0, &rule_up) / d as f64;
    let square = weighted_integral(|_| 1.0, 2, 0, &rule_d);
    let mass = weighted_integral(|_| 1.0, 0, 1, &rule_d);
    let mass_ref = (log_density_normalizer(d) - log_density_normalizer(d + 2)).exp();
    Ok(IbpReport {
        parts_gap: (lhs - rhs).abs(),
        square_gap: (square - 1.0 / d as f64).abs(),
        mass_gap: (mass - mass_ref).abs(),
    })
}

/// The identity gaps for a surrogate.
pub fn ibp_suite(h: &Surrogate, d: usize, nodes: usize) -> Result<IbpReport, OracleError> {
    require_c2(h)?;
    ibp_gaps_generic(d, nodes, |t| h.slope(t), |t| h.curvature(t).unwrap_or(0.0))
}

/// Runs closed form, Monte Carlo, and the dominant-term cosine for one probe.
pub fn popgrad_report(
    task: &MultiIndexTask,
    xt: &DVector<f64>,
    h: &Surrogate,
    nodes: usize,
    nw: usize,
    nx: usize,
    seed: u64,
) -> Result<PopGradReport, OracleError> {
    let closed_form = if task.r() == 1 {
        let rule = QuadratureRule::new(task.d(), nodes)?;
        popgrad_single_closed(task, xt, h, &rule)?
    } else {
        popgrad_multi_dominant(task, xt, h, nodes)?.0
    };
    let (mc, se) = popgrad_mc(task, xt, h, nw, nx, seed)?;
    let spectra = task_spectra(task, SpectraMode::Analytic)?;
    let target = &spectra.h * xt;
    let denom = mc.norm() * target.norm();
    let cos_to_target = if denom > 0.0 {
        (mc.dot(&target) / denom).clamp(-1.0, 1.0)
    } else {
        0.0
    };
    Ok(PopGradReport {
        closed_form,
        mc,
        se,
        cos_to_target,
        c_d: leading_coefficient(h, task.d(), nodes)?,
    })
}
