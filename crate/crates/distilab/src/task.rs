//! Multi-index regression tasks: polynomial link functions in the Hermite
//! basis composed with an orthonormal index matrix, dataset sampling with
//! two-point label noise, preprocessing, and derivative spectra.
//!
//! A task computes `f*(x) = sigma*(B^T x)` where `B` is `d x r` with
//! orthonormal columns and `sigma*` is a polynomial over `r` latent
//! coordinates written as a sum of products of probabilists' Hermite
//! polynomials. The spectra `C_k = E[grad^k sigma*(z)]` drive the closed-form
//! population gradients, and `H = B C_2 B^T` is the curvature matrix whose
//! range carries the index subspace.

use std::collections::HashMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hermite::hermite1d;
use crate::tensor::DenseTensor;

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("intrinsic dimension {r} exceeds ambient dimension {d}")]
    IntrinsicDimExceedsAmbient { r: usize, d: usize },
    #[error("link polynomial must have at least one term")]
    EmptyLink,
    #[error("link term has {got} degrees but the task has {expected} latent coordinates")]
    DegreeArityMismatch { expected: usize, got: usize },
    #[error("Monte-Carlo spectra need at least 100 samples, got {0}")]
    TooFewMcSamples(usize),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv file has no parsable rows")]
    EmptyCsv,
}

/// One term of the link polynomial: `coeff * prod_t He_{degrees[t]}(z_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkTerm {
    pub degrees: Vec<usize>,
    pub coeff: f64,
}

impl LinkTerm {
    pub fn new(degrees: Vec<usize>, coeff: f64) -> Self {
        LinkTerm { degrees, coeff }
    }

    /// Single-index term `coeff * He_k(z)`.
    pub fn single(k: usize, coeff: f64) -> Self {
        LinkTerm {
            degrees: vec![k],
            coeff,
        }
    }
}

/// The quartic single-index link `He_2(z)/2 + He_4(z)/4!`.
pub fn link_he2_he4() -> Vec<LinkTerm> {
    vec![LinkTerm::single(2, 0.5), LinkTerm::single(4, 1.0 / 24.0)]
}

/// Unit-variance single-index link `He_k(z)/sqrt(k!)`.
pub fn link_he_normalized(k: usize) -> Vec<LinkTerm> {
    let mut fact = 1.0;
    for i in 1..=k {
        fact *= i as f64;
    }
    vec![LinkTerm::single(k, 1.0 / fact.sqrt())]
}

/// Regression target `f*(x) = sigma*(B^T x)` with two-point label noise.
#[derive(Debug, Clone)]
pub struct MultiIndexTask {
    d: usize,
    r: usize,
    b: DMatrix<f64>,
    link: Vec<LinkTerm>,
    zeta: f64,
}

impl MultiIndexTask {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// The orthonormal index matrix, `d x r`.
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }

    /// The index direction for single-index tasks (first column of B).
    pub fn beta(&self) -> DVector<f64> {
        self.b.column(0).into_owned()
    }

    pub fn link(&self) -> &[LinkTerm] {
        &self.link
    }

    pub fn zeta(&self) -> f64 {
        self.zeta
    }

    /// Maximum total degree of the link polynomial.
    pub fn degree(&self) -> usize {
        self.link
            .iter()
            .map(|t| t.degrees.iter().sum::<usize>())
            .max()
            .unwrap_or(0)
    }

    /// Exact second moment `E[sigma*(z)^2]` under the latent Gaussian, from
    /// Hermite orthogonality.
    pub fn link_second_moment(&self) -> f64 {
        let mut by_degree: HashMap<&[usize], f64> = HashMap::new();
        for term in &self.link {
            *by_degree.entry(&term.degrees).or_insert(0.0) += term.coeff;
        }
        by_degree
            .iter()
            .map(|(degs, c)| {
                let mut fact_prod = 1.0;
                for &k in degs.iter() {
                    for i in 1..=k {
                        fact_prod *= i as f64;
                    }
                }
                c * c * fact_prod
            })
            .sum()
    }
}

/// Labeled dataset with inputs stored column-wise (`x` is `d x N`).
///
/// After [`preprocess`] the removed affine part is kept in `meta` so
/// predictions can be mapped back to the original label scale.
#[derive(Debug, Clone)]
pub struct LabeledSet {
    pub x: DMatrix<f64>,
    pub y: DVector<f64>,
    pub meta: Option<PreprocessMeta>,
}

/// Mean label and mean label-weighted input removed by preprocessing.
#[derive(Debug, Clone)]
pub struct PreprocessMeta {
    pub alpha: f64,
    pub gamma: DVector<f64>,
}

impl LabeledSet {
    pub fn n(&self) -> usize {
        self.y.len()
    }

    pub fn dim(&self) -> usize {
        self.x.nrows()
    }
}

/// Derivative spectra of the link: `C_k = E[grad^k sigma*(z)]` for
/// `k = 0..=p`, the curvature matrix `H = B C_2 B^T`, and the absolute
/// eigenvalue range of `C_2`.
#[derive(Debug, Clone)]
pub struct TaskSpectra {
    pub c: Vec<DenseTensor>,
    pub h: DMatrix<f64>,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub kappa: f64,
}

/// How to compute [`task_spectra`].
#[derive(Debug, Clone, Copy)]
pub enum SpectraMode {
    /// Symbolic differentiation in the Hermite basis, exact expectations.
    Analytic,
    /// Sample averages of central finite differences of the link.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Builds a task with `B` the orthonormal factor of a seeded Gaussian matrix.
pub fn make_task(
    d: usize,
    r: usize,
    link: Vec<LinkTerm>,
    zeta: f64,
    seed: u64,
) -> Result<MultiIndexTask, TaskError> {
    if r > d || r == 0 {
        return Err(TaskError::IntrinsicDimExceedsAmbient { r, d });
    }
    if link.is_empty() {
        return Err(TaskError::EmptyLink);
    }
    for term in &link {
        if term.degrees.len() != r {
            return Err(TaskError::DegreeArityMismatch {
                expected: r,
                got: term.degrees.len(),
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = DMatrix::from_fn(d, r, |_, _| rng.sample::<f64, _>(StandardNormal));
    let b = g.qr().q();
    Ok(MultiIndexTask {
        d,
        r,
        b,
        link,
        zeta,
    })
}

fn eval_link(link: &[LinkTerm], z: &DVector<f64>) -> f64 {
    link.iter()
        .map(|term| {
            let mut prod = term.coeff;
            for (t, &k) in term.degrees.iter().enumerate() {
                prod *= hermite1d(k, z[t]);
            }
            prod
        })
        .sum()
}

/// Evaluates `f*(x) = sigma*(B^T x)` exactly.
pub fn eval_target(task: &MultiIndexTask, x: &DVector<f64>) -> f64 {
    let z = task.b.tr_mul(x);
    eval_link(&task.link, &z)
}

/// Evaluates the target on every column of `x`.
pub fn eval_target_batch(task: &MultiIndexTask, x: &DMatrix<f64>) -> DVector<f64> {
    let z = task.b.tr_mul(x);
    DVector::from_fn(x.ncols(), |n, _| {
        eval_link(&task.link, &z.column(n).into_owned())
    })
}

/// Samples `N` points `x_n ~ N(0, I_d)` with labels
/// `y_n = f*(x_n) + eps_n`, `eps_n` uniform on `{+zeta, -zeta}`.
pub fn sample_dataset(task: &MultiIndexTask, n: usize, seed: u64) -> LabeledSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = DMatrix::from_fn(task.d, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    let mut y = eval_target_batch(task, &x);
    if task.zeta != 0.0 {
        for v in y.iter_mut() {
            let sign: bool = rng.gen();
            *v += if sign { task.zeta } else { -task.zeta };
        }
    }
    LabeledSet { x, y, meta: None }
}

/// Removes the empirical affine part of the labels:
/// `alpha = mean(y)`, `gamma = mean(y_n x_n)`, `y_n <- y_n - alpha - <gamma, x_n>`.
pub fn preprocess(set: &LabeledSet) -> LabeledSet {
    let n = set.n() as f64;
    let alpha = set.y.mean();
    let gamma = (&set.x * &set.y) / n;
    let overlap = set.x.tr_mul(&gamma);
    let y = DVector::from_fn(set.y.len(), |i, _| set.y[i] - alpha - overlap[i]);
    LabeledSet {
        x: set.x.clone(),
        y,
        meta: Some(PreprocessMeta { alpha, gamma }),
    }
}

/// Link polynomial as a multiset of Hermite degree vectors, for symbolic
/// differentiation.
#[derive(Debug, Clone)]
struct LinkPoly {
    terms: Vec<(Vec<usize>, f64)>,
}

impl LinkPoly {
    fn from_link(link: &[LinkTerm]) -> Self {
        LinkPoly {
            terms: link
                .iter()
                .map(|t| (t.degrees.clone(), t.coeff))
                .collect(),
        }
    }

    /// Partial derivative in latent coordinate `t`, via `He_k' = k He_{k-1}`.
    fn diff(&self, t: usize) -> Self {
        let terms = self
            .terms
            .iter()
            .filter(|(degs, _)| degs[t] > 0)
            .map(|(degs, c)| {
                let mut d = degs.clone();
                d[t] -= 1;
                (d, c * degs[t] as f64)
            })
            .collect();
        LinkPoly { terms }
    }

    /// Exact Gaussian expectation: only degree-zero terms survive.
    fn expectation(&self) -> f64 {
        self.terms
            .iter()
            .filter(|(degs, _)| degs.iter().all(|&k| k == 0))
            .map(|(_, c)| c)
            .sum()
    }
}

fn analytic_entry(link: &[LinkTerm], idx: &[usize]) -> f64 {
    let mut poly = LinkPoly::from_link(link);
    for &t in idx {
        poly = poly.diff(t);
    }
    poly.expectation()
}

fn mc_entry_batch(
    link: &[LinkTerm],
    r: usize,
    k: usize,
    samples: usize,
    seed: u64,
) -> (DenseTensor, DenseTensor) {
    // Central finite differences of sigma* averaged over z ~ N(0, I_r).
    // Returns (mean tensor, per-entry standard error tensor).
    let h = 0.02;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = DenseTensor::zeros(k, r.max(1));
    let mut sq = DenseTensor::zeros(k, r.max(1));
    let entries = mean.values().len();

    fn fd(link: &[LinkTerm], z: &mut DVector<f64>, idx: &[usize], h: f64) -> f64 {
        match idx.split_first() {
            None => eval_link(link, z),
            Some((&t, rest)) => {
                z[t] += h;
                let plus = fd(link, z, rest, h);
                z[t] -= 2.0 * h;
                let minus = fd(link, z, rest, h);
                z[t] += h;
                (plus - minus) / (2.0 * h)
            }
        }
    }

    let mut idx = vec![0usize; k];
    for _ in 0..samples {
        let mut z = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
        for flat in 0..entries {
            let mut rem = flat;
            for pos in (0..k).rev() {
                idx[pos] = rem % r;
                rem /= r;
            }
            let v = fd(link, &mut z, &idx, h);
            mean.values_mut()[flat] += v;
            sq.values_mut()[flat] += v * v;
        }
    }
    let nf = samples as f64;
    for flat in 0..entries {
        let m = mean.values()[flat] / nf;
        let var = (sq.values()[flat] / nf - m * m).max(0.0);
        mean.values_mut()[flat] = m;
        sq.values_mut()[flat] = (var / nf).sqrt();
    }
    (mean, sq)
}

/// Computes `C_k` for `k = 0..=p`, `H = B C_2 B^T`, and the absolute
/// eigenvalue range of `C_2`.
pub fn task_spectra(task: &MultiIndexTask, mode: SpectraMode) -> Result<TaskSpectra, TaskError> {
    if let SpectraMode::MonteCarlo { samples, .. } = mode {
        if samples < 100 {
            return Err(TaskError::TooFewMcSamples(samples));
        }
    }
    let p = task.degree();
    let r = task.r;
    let mut c = Vec::with_capacity(p + 1);
    for k in 0..=p {
        let tensor = match mode {
            SpectraMode::Analytic => {
                let mut t = DenseTensor::zeros(k, r.max(1));
                let entries = t.values().len();
                let mut idx = vec![0usize; k];
                for flat in 0..entries {
                    let mut rem = flat;
                    for pos in (0..k).rev() {
                        idx[pos] = rem % r;
                        rem /= r;
                    }
                    t.values_mut()[flat] = analytic_entry(&task.link, &idx);
                }
                t
            }
            SpectraMode::MonteCarlo { samples, seed } => {
                mc_entry_batch(&task.link, r, k, samples, seed ^ (k as u64)).0
            }
        };
        c.push(tensor);
    }
    let h = if p >= 2 {
        let c2 = c[2].to_matrix();
        &task.b * c2 * task.b.transpose()
    } else {
        DMatrix::zeros(task.d, task.d)
    };
    let (lambda_min, lambda_max) = if p >= 2 {
        let c2 = c[2].to_matrix();
        let sym_c2 = (&c2 + c2.transpose()) * 0.5;
        let eig = sym_c2.symmetric_eigen();
        let abs: Vec<f64> = eig.eigenvalues.iter().map(|v| v.abs()).collect();
        (
            abs.iter().cloned().fold(f64::INFINITY, f64::min),
            abs.iter().cloned().fold(0.0f64, f64::max),
        )
    } else {
        (0.0, 0.0)
    };
    let kappa = if lambda_min > 0.0 {
        lambda_max / lambda_min
    } else {
        f64::INFINITY
    };
    Ok(TaskSpectra {
        c,
        h,
        lambda_min,
        lambda_max,
        kappa,
    })
}

/// Per-entry standard errors of the Monte-Carlo `C_k` estimate, for
/// agreement tests against the analytic spectra.
pub fn mc_spectra_with_se(
    task: &MultiIndexTask,
    k: usize,
    samples: usize,
    seed: u64,
) -> Result<(DenseTensor, DenseTensor), TaskError> {
    if samples < 100 {
        return Err(TaskError::TooFewMcSamples(samples));
    }
    Ok(mc_entry_batch(&task.link, task.r, k, samples, seed))
}

/// Monte-Carlo estimate of `E[f*(x)^2]`, reported so callers can check link
/// normalization.
pub fn mc_target_norm(task: &MultiIndexTask, samples: usize, seed: u64) -> f64 {
    let set = sample_dataset(
        &MultiIndexTask {
            zeta: 0.0,
            ..task.clone()
        },
        samples,
        seed,
    );
    set.y.iter().map(|v| v * v).sum::<f64>() / samples as f64
}

/// Writes a dataset as CSV with columns `x_0..x_{d-1}, y`, one row per point.
pub fn save_csv(set: &LabeledSet, path: &Path) -> Result<(), TaskError> {
    let mut writer = csv::WriterBuilder::new().from_path(path)?;
    let d = set.dim();
    let mut header: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    header.push("y".to_string());
    writer.write_record(&header)?;
    for n in 0..set.n() {
        let mut row: Vec<String> = (0..d).map(|i| set.x[(i, n)].to_string()).collect();
        row.push(set.y[n].to_string());
        writer.write_record(&row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Reads a dataset written by [`save_csv`].
pub fn load_csv(path: &Path) -> Result<LabeledSet, TaskError> {
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for record in reader.records() {
        let record = record?;
        let row: Vec<f64> = record
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| TaskError::EmptyCsv)?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(TaskError::EmptyCsv);
    }
    let d = rows[0].len() - 1;
    let n = rows.len();
    let x = DMatrix::from_fn(d, n, |i, j| rows[j][i]);
    let y = DVector::from_fn(n, |j, _| rows[j][d]);
    Ok(LabeledSet { x, y, meta: None })
}
