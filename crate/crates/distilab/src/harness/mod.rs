//! End-to-end experiment driver: the two-phase distillation pipeline, the
//! five-paradigm comparison, grid sweeps, the transfer experiment, rank
//! tables, and persistence.
//!
//! Every entry point is a pure function of its configuration and seed; all
//! randomness flows through one seed-mixing scheme so reruns are
//! bit-identical.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::construct::{check_regularity, RegularityReport};
use crate::distill::{
    gm_t1, gm_t1_relu, gm_t2, init_d1, init_d2, label_d2_init, pm_t2, retrain_t2_gd,
    retrain_t2_onestep, teacher_grads_symmetric, ConstructStrategy, DistillError, DistilledSet,
    LabelMode,
};
use crate::network::{
    forward_batch, init_symmetric, kernel, NetworkError, NetworkParams, Surrogate,
};
use crate::oracle::{popgrad_report, OracleError};
use crate::task::{
    eval_target_batch, make_task, preprocess, sample_dataset, LabeledSet, LinkTerm,
    MultiIndexTask, TaskError,
};
use crate::training::{
    auto_eta2, auto_xi, default_plan, make_phase2_batch, phase1_step, phase2_spectral,
    select_lambda2, Phase2Record, PlanKind, RidgeSystem, TrainingError,
};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("config needs at least one seed")]
    NoSeeds,
    #[error("config field {0} must be positive")]
    NonPositive(&'static str),
    #[error("dataset of {n} rows cannot supply {want} distinct baseline points")]
    BaselineTooLarge { n: usize, want: usize },
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Training(#[from] TrainingError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

/// One link monomial as it appears in a config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinkTermConfig {
    pub degrees: Vec<usize>,
    pub coeff: f64,
}

fn default_d() -> usize {
    10
}
fn default_r() -> usize {
    1
}
fn default_link() -> Vec<LinkTermConfig> {
    vec![
        LinkTermConfig {
            degrees: vec![2],
            coeff: 0.5,
        },
        LinkTermConfig {
            degrees: vec![4],
            coeff: 1.0 / 24.0,
        },
    ]
}
fn default_n() -> usize {
    10_000
}
fn default_jstar() -> usize {
    1_000
}
fn default_l() -> usize {
    100
}
fn default_m1() -> usize {
    1
}
fn default_gamma() -> f64 {
    8.0
}
fn default_test_size() -> usize {
    10_000
}
fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}
fn default_lambda2d() -> f64 {
    1e-4
}
fn default_output() -> String {
    "out".to_string()
}

/// Complete experiment description; omitted JSON fields take the section-5
/// defaults.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_r")]
    pub r: usize,
    #[serde(default = "default_link")]
    pub link: Vec<LinkTermConfig>,
    #[serde(default)]
    pub zeta: f64,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default = "default_jstar")]
    pub j_star: usize,
    #[serde(default = "default_l")]
    pub l: usize,
    #[serde(default = "default_m1")]
    pub m1: usize,
    /// Constant phase-1 labels when set; chi-distributed otherwise.
    #[serde(default)]
    pub label_constant: Option<f64>,
    /// Exact relu slopes in the phase-1 matching instead of the surrogate.
    #[serde(default)]
    pub relu_matching: bool,
    /// Performance matching at phase 2 instead of gradient matching.
    #[serde(default)]
    pub performance_matching: bool,
    /// One scalar set along the mean phase-1 point instead of one per point.
    #[serde(default)]
    pub compact: bool,
    #[serde(default = "default_gamma")]
    pub gamma_s: f64,
    #[serde(default = "default_lambda2d")]
    pub lambda2_d: f64,
    #[serde(default = "default_test_size")]
    pub test_size: usize,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub task_seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults are total")
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.seeds.is_empty() {
            return Err(HarnessError::NoSeeds);
        }
        for (value, name) in [
            (self.d, "d"),
            (self.r, "r"),
            (self.n, "n"),
            (self.j_star, "j_star"),
            (self.l, "l"),
            (self.m1, "m1"),
            (self.test_size, "test_size"),
        ] {
            if value == 0 {
                return Err(HarnessError::NonPositive(name));
            }
        }
        Ok(())
    }

    pub fn link_terms(&self) -> Vec<LinkTerm> {
        self.link
            .iter()
            .map(|t| LinkTerm::new(t.degrees.clone(), t.coeff))
            .collect()
    }

    /// Matching initializations per phase: `J = ceil(2 J* / L)`.
    pub fn j(&self) -> usize {
        (2 * self.j_star).div_ceil(self.l)
    }

    /// The J* actually realized after rounding, `J L / 2`.
    pub fn j_star_effective(&self) -> usize {
        self.j() * self.l / 2
    }

    pub fn surrogate(&self) -> Surrogate {
        Surrogate::softplus(self.gamma_s)
    }

    pub fn label_mode(&self) -> LabelMode {
        match self.label_constant {
            Some(c) => LabelMode::Constant(c),
            None => LabelMode::Chi,
        }
    }

    pub fn strategy(&self) -> ConstructStrategy {
        if self.compact {
            ConstructStrategy::Compact
        } else {
            ConstructStrategy::PerPoint
        }
    }

    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Outcome of one pipeline run: test error per training paradigm plus the
/// alignment, regularity, and cost diagnostics.
#[derive(Debug, Clone, Serialize)]
pub struct RunReport {
    pub seed: u64,
    pub n: usize,
    pub j_star: usize,
    pub mse_full: f64,
    pub mse_distilled: f64,
    pub mse_teacher_t2: f64,
    pub mse_random_i: f64,
    pub mse_random_ii: f64,
    pub cos_beta: f64,
    pub rank_ok: bool,
    pub rank_achieved: usize,
    pub rank_required: usize,
    pub m2: usize,
    /// Stored numbers: phase-1 points with labels, the scalar set, and the
    /// construction direction(s).
    pub distilled_memory: usize,
    pub wall_ms: u128,
}

impl RunReport {
    pub fn paradigm_mse(&self, paradigm: &str) -> f64 {
        match paradigm {
            "full_data" => self.mse_full,
            "distilled" => self.mse_distilled,
            "teacher_t2" => self.mse_teacher_t2,
            "random_i" => self.mse_random_i,
            "random_ii" => self.mse_random_ii,
            other => panic!("unknown paradigm {other}"),
        }
    }
}

pub const PARADIGMS: [&str; 5] = [
    "full_data",
    "distilled",
    "teacher_t2",
    "random_i",
    "random_ii",
];

fn mix_seed(base: u64, salt: u64) -> u64 {
    base.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(salt)
        .rotate_left(17)
        .wrapping_mul(0xD1B5_4A32_D192_ED03)
}

fn plan_kind(cfg: &ExperimentConfig) -> PlanKind {
    if cfg.r == 1 {
        PlanKind::SingleIndex
    } else {
        PlanKind::MultiIndex
    }
}

/// Median of the absolute cosines between each phase-1 point and the task
/// index space.
fn alignment_to_index_space(task: &MultiIndexTask, d1: &DistilledSet) -> f64 {
    let b = task.b();
    let mut coses: Vec<f64> = (0..d1.m())
        .map(|m| {
            let x = d1.x.column(m);
            let norm = x.norm();
            if norm == 0.0 {
                return 0.0;
            }
            (b.tr_mul(&x.into_owned()).norm() / norm).min(1.0)
        })
        .collect();
    coses.sort_by(|a, b| a.partial_cmp(b).unwrap());
    coses[coses.len() / 2]
}

fn sample_baseline(
    train: &LabeledSet,
    count: usize,
    phase: u8,
    seed: u64,
) -> Result<DistilledSet, HarnessError> {
    if count > train.n() {
        return Err(HarnessError::BaselineTooLarge {
            n: train.n(),
            want: count,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen: Vec<usize> = Vec::with_capacity(count);
    while chosen.len() < count {
        let idx = rng.gen_range(0..train.n());
        if !chosen.contains(&idx) {
            chosen.push(idx);
        }
    }
    let x = DMatrix::from_fn(train.dim(), count, |i, m| train.x[(i, chosen[m])]);
    let y = DVector::from_fn(count, |m, _| train.y[chosen[m]]);
    Ok(DistilledSet { x, y, phase })
}

struct PhaseTwoOutcome {
    shared: NetworkParams,
    records: Vec<Phase2Record>,
    teacher_mean: DVector<f64>,
    zero_teacher: DVector<f64>,
    eta_tr: f64,
}

/// Ridge-trains the phase-2 batch on the training set for one first-layer
/// variant: selects the decay on a validation split, resolves the step and
/// horizon, and returns the recorded trajectories.
fn phase2_teachers(
    w1: &DMatrix<f64>,
    b: &DVector<f64>,
    train: &LabeledSet,
    j: usize,
    seed: u64,
) -> Result<PhaseTwoOutcome, HarnessError> {
    let l = w1.ncols();
    let shared = NetworkParams {
        a: DVector::zeros(l),
        w: w1.clone(),
        b: b.clone(),
    };
    let split = (train.n() * 4) / 5;
    let head = LabeledSet {
        x: train.x.columns(0, split).into_owned(),
        y: train.y.rows(0, split).into_owned(),
        meta: None,
    };
    let tail = LabeledSet {
        x: train.x.columns(split, train.n() - split).into_owned(),
        y: train.y.rows(split, train.n() - split).into_owned(),
        meta: None,
    };
    let (lambda, _) = select_lambda2(&shared, &head, &tail, None)?;
    let system = RidgeSystem::new(&shared, train);
    let eta_tr = auto_eta2(system.max_curvature(), lambda);
    let xi = auto_xi(5.0, eta_tr, lambda)?;
    let batch = make_phase2_batch(&shared, j, seed);
    let mut records = Vec::with_capacity(j);
    for a0 in &batch.a0[1..] {
        records.push(phase2_spectral(&system, eta_tr, lambda, xi, a0)?);
    }
    let zero_teacher = phase2_spectral(&system, eta_tr, lambda, xi, &batch.a0[0])?.a;
    let mut teacher_mean = DVector::zeros(l);
    for rec in &records {
        teacher_mean += &rec.a;
    }
    teacher_mean /= records.len() as f64;
    Ok(PhaseTwoOutcome {
        shared,
        records,
        teacher_mean,
        zero_teacher,
        eta_tr,
    })
}

fn test_mse(
    params: &NetworkParams,
    test_x: &DMatrix<f64>,
    truth: &DVector<f64>,
    alpha: f64,
    gamma: &DVector<f64>,
) -> f64 {
    let mut pred = forward_batch(params, test_x);
    pred.add_scalar_mut(alpha);
    pred += test_x.tr_mul(gamma);
    (pred - truth).norm_squared() / truth.len() as f64
}

/// Runs the full two-phase pipeline for one seed and scores the five
/// training paradigms on a fresh test set.
pub fn run_pipeline(cfg: &ExperimentConfig, seed: u64) -> Result<RunReport, HarnessError> {
    cfg.validate()?;
    let t0 = Instant::now();
    let task = make_task(cfg.d, cfg.r, cfg.link_terms(), cfg.zeta, cfg.task_seed)?;
    let raw = sample_dataset(&task, cfg.n, mix_seed(seed, 1));
    let train = preprocess(&raw);
    let meta = train.meta.clone().expect("preprocess sets meta");
    let plan = {
        let mut p = default_plan(plan_kind(cfg), cfg.d, cfg.r, cfg.l);
        p.j = cfg.j();
        p.m1 = cfg.m1;
        p
    };

    let theta0 = init_symmetric(cfg.d, cfg.l, mix_seed(seed, 2))?;
    let inits: Vec<NetworkParams> = (0..plan.j)
        .map(|k| init_symmetric(cfg.d, cfg.l, mix_seed(seed, 100 + k as u64)))
        .collect::<Result<_, _>>()?;
    let grads = teacher_grads_symmetric(&inits, &train)?;

    let d1_init = init_d1(cfg.m1, cfg.d, cfg.label_mode(), mix_seed(seed, 3))?;
    let d1 = if cfg.relu_matching {
        gm_t1_relu(&d1_init, &inits, &grads, plan.t1_d.eta)?
    } else {
        gm_t1(
            &d1_init,
            &inits,
            &grads,
            &cfg.surrogate(),
            plan.t1_d.eta,
            plan.t1_d.lambda,
        )?
    };
    let cos_beta = alignment_to_index_space(&task, &d1);

    let w1_distilled = phase1_step(&theta0, &d1.as_labeled(), &plan.t1_r)?.params.w;
    let w1_full = phase1_step(&theta0, &train, &plan.t1_tr)?.params.w;
    let d1_baseline = sample_baseline(&train, cfg.m1, 1, mix_seed(seed, 4))?;
    let w1_random = phase1_step(&theta0, &d1_baseline.as_labeled(), &plan.t1_r)?
        .params
        .w;

    let mut bias_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 5));
    let b_new = DVector::from_fn(cfg.l, |_, _| bias_rng.sample::<f64, _>(StandardNormal));

    let distilled_arm = phase2_teachers(&w1_distilled, &b_new, &train, plan.j, mix_seed(seed, 6))?;
    let full_arm = phase2_teachers(&w1_full, &b_new, &train, plan.j, mix_seed(seed, 6))?;
    let random_arm = phase2_teachers(&w1_random, &b_new, &train, plan.j, mix_seed(seed, 6))?;

    let d2_init = init_d2(&w1_distilled, &b_new, cfg.strategy(), &d1)?;
    let m2 = d2_init.m();
    let ktilde = kernel(&distilled_arm.shared, &d2_init.x);
    let regularity: RegularityReport = check_regularity(&ktilde, &w1_distilled, &b_new);
    let a0_list: Vec<DVector<f64>> = (1..=plan.j)
        .map(|_| DVector::zeros(cfg.l))
        .collect();
    let _ = a0_list;
    let batch = make_phase2_batch(&distilled_arm.shared, plan.j, mix_seed(seed, 6));
    let y0 = label_d2_init(&distilled_arm.shared, &batch.a0[1..], &d2_init.x)?;
    let d2 = DistilledSet {
        x: d2_init.x.clone(),
        y: y0,
        phase: 2,
    };

    let a_distilled = if cfg.performance_matching {
        let eta2_s = {
            let gram = &ktilde * ktilde.transpose() / m2 as f64;
            let sys = RidgeSystem::from_parts(gram, DVector::zeros(cfg.l));
            auto_eta2(sys.max_curvature(), 0.0)
        };
        let matched = pm_t2(&d2, &distilled_arm.shared, &train, eta2_s, 0.0, cfg.lambda2_d, 0)?;
        retrain_t2_onestep(&distilled_arm.shared, &matched, eta2_s)
    } else {
        let matched = gm_t2(
            &d2,
            &distilled_arm.records,
            &ktilde,
            m2 as f64 * distilled_arm.eta_tr,
        )?;
        retrain_t2_gd(&distilled_arm.shared, &matched, 0.0, 0)?
    };

    let d2_baseline = sample_baseline(&train, m2, 2, mix_seed(seed, 7))?;
    let a_random_ii = retrain_t2_gd(&random_arm.shared, &d2_baseline, 0.0, 0)?;

    let test_x = {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 8));
        DMatrix::from_fn(cfg.d, cfg.test_size, |_, _| {
            rng.sample::<f64, _>(StandardNormal)
        })
    };
    let truth = eval_target_batch(&task, &test_x);

    let net = |w: &DMatrix<f64>, a: &DVector<f64>| NetworkParams {
        a: a.clone(),
        w: w.clone(),
        b: b_new.clone(),
    };
    let score = |params: &NetworkParams| {
        test_mse(params, &test_x, &truth, meta.alpha, &meta.gamma)
    };

    let mse_full = score(&net(&w1_full, &full_arm.zero_teacher));
    let mse_distilled = score(&net(&w1_distilled, &a_distilled));
    let mse_teacher_t2 = score(&net(&w1_distilled, &distilled_arm.teacher_mean));
    let mse_random_i = score(&net(&w1_random, &random_arm.teacher_mean));
    let mse_random_ii = score(&net(&w1_random, &a_random_ii));

    let direction_numbers = if cfg.compact { cfg.d } else { cfg.m1 * cfg.d };
    Ok(RunReport {
        seed,
        n: cfg.n,
        j_star: cfg.j_star_effective(),
        mse_full,
        mse_distilled,
        mse_teacher_t2,
        mse_random_i,
        mse_random_ii,
        cos_beta,
        rank_ok: regularity.ok,
        rank_achieved: regularity.achieved,
        rank_required: regularity.required,
        m2,
        distilled_memory: cfg.m1 * (cfg.d + 1) + m2 + direction_numbers,
        wall_ms: t0.elapsed().as_millis(),
    })
}

/// One long-format CSV row of a sweep.
#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub run_id: String,
    pub seed: u64,
    pub paradigm: String,
    pub n: usize,
    pub j_star: usize,
    pub mse: f64,
    pub cos_beta: f64,
    pub rank_ok: bool,
    pub wall_ms: u128,
}

fn report_rows(report: &RunReport, run_id: &str) -> Vec<SweepRow> {
    PARADIGMS
        .iter()
        .map(|p| SweepRow {
            run_id: run_id.to_string(),
            seed: report.seed,
            paradigm: p.to_string(),
            n: report.n,
            j_star: report.j_star,
            mse: report.paradigm_mse(p),
            cos_beta: report.cos_beta,
            rank_ok: report.rank_ok,
            wall_ms: report.wall_ms,
        })
        .collect()
}

/// Grid of pipeline runs over training-set sizes and effective
/// initialization counts, every seed in the config.
pub fn sweep(
    cfg: &ExperimentConfig,
    ns: &[usize],
    jstars: &[usize],
) -> Result<Vec<SweepRow>, HarnessError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &n in ns {
        for &j_star in jstars {
            let mut cell = cfg.clone();
            cell.n = n;
            cell.j_star = j_star;
            for &seed in &cfg.seeds {
                let report = run_pipeline(&cell, seed)?;
                let run_id = format!("n{n}_j{j_star}_s{seed}");
                rows.extend(report_rows(&report, &run_id));
            }
        }
    }
    Ok(rows)
}

/// Median over an unordered sample; NaN-free inputs assumed.
pub fn median(values: &[f64]) -> f64 {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Per-cell medians of a sweep, keyed by `(n, j_star, paradigm)`.
pub fn sweep_medians(rows: &[SweepRow]) -> Vec<(usize, usize, String, f64)> {
    let mut keys: Vec<(usize, usize, String)> = rows
        .iter()
        .map(|r| (r.n, r.j_star, r.paradigm.clone()))
        .collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(n, j, p)| {
            let sample: Vec<f64> = rows
                .iter()
                .filter(|r| r.n == n && r.j_star == j && r.paradigm == p)
                .map(|r| r.mse)
                .collect();
            (n, j, p, median(&sample))
        })
        .collect()
}

/// One transfer-experiment row: fine-tuning on `n` samples of the new link.
#[derive(Debug, Clone, Serialize)]
pub struct TransferRow {
    pub seed: u64,
    pub n_finetune: usize,
    pub mse_pretrained: f64,
    pub mse_scratch: f64,
    pub cos_beta_old: f64,
    pub cos_beta_new: f64,
}

/// Distills the first layer from the configured target, then fine-tunes only
/// the second layer on samples of the degree-3 link over the same index, and
/// compares against fine-tuning from the untrained first layer.
pub fn transfer(
    cfg: &ExperimentConfig,
    n_finetune: &[usize],
) -> Result<Vec<TransferRow>, HarnessError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    let degrees3: Vec<usize> = (0..cfg.r).map(|i| if i == 0 { 3 } else { 0 }).collect();
    let new_link = vec![LinkTerm::new(degrees3, 1.0 / 6.0f64.sqrt())];
    for &seed in &cfg.seeds {
        let task = make_task(cfg.d, cfg.r, cfg.link_terms(), cfg.zeta, cfg.task_seed)?;
        let new_task = make_task(cfg.d, cfg.r, new_link.clone(), 0.0, cfg.task_seed)?;
        let raw = sample_dataset(&task, cfg.n, mix_seed(seed, 1));
        let train = preprocess(&raw);
        let plan = {
            let mut p = default_plan(plan_kind(cfg), cfg.d, cfg.r, cfg.l);
            p.j = cfg.j();
            p.m1 = cfg.m1;
            p
        };
        let theta0 = init_symmetric(cfg.d, cfg.l, mix_seed(seed, 2))?;
        let inits: Vec<NetworkParams> = (0..plan.j)
            .map(|k| init_symmetric(cfg.d, cfg.l, mix_seed(seed, 100 + k as u64)))
            .collect::<Result<_, _>>()?;
        let grads = teacher_grads_symmetric(&inits, &train)?;
        let d1_init = init_d1(cfg.m1, cfg.d, cfg.label_mode(), mix_seed(seed, 3))?;
        let d1 = if cfg.relu_matching {
            gm_t1_relu(&d1_init, &inits, &grads, plan.t1_d.eta)?
        } else {
            gm_t1(
                &d1_init,
                &inits,
                &grads,
                &cfg.surrogate(),
                plan.t1_d.eta,
                plan.t1_d.lambda,
            )?
        };
        let cos_beta_old = alignment_to_index_space(&task, &d1);
        let cos_beta_new = alignment_to_index_space(&new_task, &d1);
        let w1_pre = phase1_step(&theta0, &d1.as_labeled(), &plan.t1_r)?.params.w;
        let w1_scratch = theta0.w.clone();

        let mut bias_rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 5));
        let b_new = DVector::from_fn(cfg.l, |_, _| bias_rng.sample::<f64, _>(StandardNormal));

        let test_x = {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 8));
            DMatrix::from_fn(cfg.d, cfg.test_size, |_, _| {
                rng.sample::<f64, _>(StandardNormal)
            })
        };
        let truth = eval_target_batch(&new_task, &test_x);

        for &n in n_finetune {
            let fine_raw = sample_dataset(&new_task, n, mix_seed(seed, 9 + n as u64));
            let fine = preprocess(&fine_raw);
            let fine_meta = fine.meta.clone().expect("preprocess sets meta");
            let mut fit = |w: &DMatrix<f64>| -> Result<f64, HarnessError> {
                let shared = NetworkParams {
                    a: DVector::zeros(cfg.l),
                    w: w.clone(),
                    b: b_new.clone(),
                };
                let split = (fine.n() * 4) / 5;
                let head = LabeledSet {
                    x: fine.x.columns(0, split).into_owned(),
                    y: fine.y.rows(0, split).into_owned(),
                    meta: None,
                };
                let tail = LabeledSet {
                    x: fine.x.columns(split, fine.n() - split).into_owned(),
                    y: fine.y.rows(split, fine.n() - split).into_owned(),
                    meta: None,
                };
                let (lambda, _) = select_lambda2(&shared, &head, &tail, None)?;
                let system = RidgeSystem::new(&shared, &fine);
                let eta = auto_eta2(system.max_curvature(), lambda);
                let xi = auto_xi(5.0, eta, lambda)?;
                let rec = phase2_spectral(&system, eta, lambda, xi, &DVector::zeros(cfg.l))?;
                let fitted = NetworkParams {
                    a: rec.a,
                    w: w.clone(),
                    b: b_new.clone(),
                };
                Ok(test_mse(
                    &fitted,
                    &test_x,
                    &truth,
                    fine_meta.alpha,
                    &fine_meta.gamma,
                ))
            };
            rows.push(TransferRow {
                seed,
                n_finetune: n,
                mse_pretrained: fit(&w1_pre)?,
                mse_scratch: fit(&w1_scratch)?,
                cos_beta_old,
                cos_beta_new,
            });
        }
    }
    Ok(rows)
}

/// One rank-table row: pass rates over the config's seeds at one size.
#[derive(Debug, Clone, Serialize)]
pub struct RankRow {
    pub label: String,
    pub size: usize,
    pub rank_rate: f64,
    pub mse_reconstruction_rate: f64,
}

/// Which size axis a rank table varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankAxis {
    Width,
    PhaseOnePoints,
}

/// For each size: the fraction of seeds whose construction passes the
/// regularity check, and the fraction whose distilled-retrained error
/// reproduces the phase-2 teacher error within 0.1% relative.
pub fn rank_table(
    cfg: &ExperimentConfig,
    axis: RankAxis,
    sizes: &[usize],
) -> Result<Vec<RankRow>, HarnessError> {
    cfg.validate()?;
    let mut rows = Vec::new();
    for &size in sizes {
        let mut cell = cfg.clone();
        let label = match axis {
            RankAxis::Width => {
                cell.l = size;
                "L"
            }
            RankAxis::PhaseOnePoints => {
                cell.m1 = size;
                "M1"
            }
        };
        let mut rank_pass = 0usize;
        let mut mse_pass = 0usize;
        for &seed in &cfg.seeds {
            let report = run_pipeline(&cell, seed)?;
            if report.rank_ok {
                rank_pass += 1;
            }
            let scale = report.mse_teacher_t2.abs().max(1e-300);
            if (report.mse_distilled - report.mse_teacher_t2).abs() / scale <= 1e-3 {
                mse_pass += 1;
            }
        }
        rows.push(RankRow {
            label: label.to_string(),
            size,
            rank_rate: rank_pass as f64 / cfg.seeds.len() as f64,
            mse_reconstruction_rate: mse_pass as f64 / cfg.seeds.len() as f64,
        });
    }
    Ok(rows)
}

/// Writes any serializable row set as CSV with headers.
pub fn write_csv<T: Serialize>(rows: &[T], path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut writer = csv::WriterBuilder::new().from_path(path)?;
    for row in rows {
        writer.serialize(row)?;
    }
    writer.flush()?;
    Ok(())
}

/// Writes a JSON document, creating parent directories.
pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), HarnessError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

/// Output file path inside the config's output directory.
pub fn output_path(cfg: &ExperimentConfig, name: &str) -> PathBuf {
    Path::new(&cfg.output_dir).join(name)
}

/// Per-coordinate closed-versus-sampled comparison for the CLI.
#[derive(Debug, Clone, Serialize)]
pub struct OracleRow {
    pub term: String,
    pub closed: f64,
    pub mc: f64,
    pub se: f64,
    pub gap: f64,
}

/// Runs the population-gradient report at a seeded probe point and flattens
/// it to CSV rows.
pub fn oracle_rows(
    task: &MultiIndexTask,
    h: &Surrogate,
    nw: usize,
    nx: usize,
    seed: u64,
) -> Result<Vec<OracleRow>, HarnessError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 11));
    let mut xt = DVector::from_fn(task.d(), |_, _| rng.sample::<f64, _>(StandardNormal));
    xt /= xt.norm();
    let report = popgrad_report(task, &xt, h, 400, nw, nx, mix_seed(seed, 12))?;
    let mut rows: Vec<OracleRow> = (0..task.d())
        .map(|i| OracleRow {
            term: format!("x_{i}"),
            closed: report.closed_form[i],
            mc: report.mc[i],
            se: report.se[i],
            gap: (report.closed_form[i] - report.mc[i]).abs(),
        })
        .collect();
    rows.push(OracleRow {
        term: "cos_to_target".to_string(),
        closed: report.cos_to_target,
        mc: report.cos_to_target,
        se: 0.0,
        gap: 0.0,
    });
    rows.push(OracleRow {
        term: "c_d".to_string(),
        closed: report.c_d,
        mc: report.c_d,
        se: 0.0,
        gap: 0.0,
    });
    Ok(rows)
}
