//! Analytic oracles, offline benchmark construction, method runners,
//! diagnostics, and score aggregation.
//!
//! Every oracle is oriented for maximization. A benchmark keeps only the
//! lowest-valued fraction of a uniform sample as offline data; methods see
//! nothing else, and the oracle is queried only to score their final
//! designs.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{normalized_score, select_bottom_fraction, standardize, DataError, OfflineDataset, Scaler, ScoreRow};
use crate::gp::{posterior, GpError, KernelFamily};
use crate::matchloss::MatchError;
use crate::metatrain::{
    finetune, meta_train, pretrain, train_match, train_mse, BaselineConfig, FinetuneConfig, MetaConfig, TrainError,
    TrainStats,
};
use crate::numerics::{mean, median, Matrix, RngState};
use crate::search::{gradient_search, init_candidates, standardized_bounds, CandidateSet, SearchConfig, SearchError};
use crate::sim4opt::{
    generate_tasks, resolve_base_params, EvolutionMode, Field, PairSource, Sim4OptConfig, Sim4OptError,
    SyntheticTask, Trajectory,
};
use crate::surrogate::{init_net, Architecture, Mode, NormKind, SurrogateError, SurrogateNet};

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("unknown benchmark `{0}` (expected sphere<d>, ackley<d>, rastrigin<d> or shekel4)")]
    UnknownBenchmark(String),
    #[error("unknown method `{0}`")]
    UnknownMethod(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid fraction {0}")]
    InvalidFraction(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("incomplete grid: {0}")]
    IncompleteGrid(String),
    #[error("no tasks or trajectories to evaluate")]
    EmptyTask,
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Tasks(#[from] Sim4OptError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error(transparent)]
    Match(#[from] MatchError),
}

// ---- oracles ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Shekel4,
    Ackley,
    Rastrigin,
    Sphere,
}

const SHEKEL_A: [[f64; 4]; 10] = [
    [4.0, 4.0, 4.0, 4.0],
    [1.0, 1.0, 1.0, 1.0],
    [8.0, 8.0, 8.0, 8.0],
    [6.0, 6.0, 6.0, 6.0],
    [3.0, 7.0, 3.0, 7.0],
    [2.0, 9.0, 2.0, 9.0],
    [5.0, 5.0, 3.0, 3.0],
    [8.0, 1.0, 8.0, 1.0],
    [6.0, 2.0, 6.0, 2.0],
    [7.0, 3.6, 7.0, 3.6],
];
const SHEKEL_C: [f64; 10] = [0.1, 0.2, 0.2, 0.4, 0.4, 0.6, 0.3, 0.7, 0.5, 0.5];

/// A closed-form test function with a call counter. Clones share the
/// counter.
#[derive(Debug, Clone)]
pub struct Oracle {
    pub kind: OracleKind,
    pub dim: usize,
    pub domain: Vec<(f64, f64)>,
    calls: Arc<AtomicU64>,
}

impl Oracle {
    pub fn new(kind: OracleKind, dim: usize) -> Result<Self, BenchError> {
        if dim == 0 || (kind == OracleKind::Shekel4 && dim != 4) {
            return Err(BenchError::DimensionMismatch {
                expected: if kind == OracleKind::Shekel4 { 4 } else { 1 },
                got: dim,
            });
        }
        let b = match kind {
            OracleKind::Shekel4 => (0.0, 10.0),
            OracleKind::Ackley => (-5.0, 5.0),
            OracleKind::Rastrigin => (-5.12, 5.12),
            OracleKind::Sphere => (-5.0, 5.0),
        };
        Ok(Self {
            kind,
            dim,
            domain: vec![b; dim],
            calls: Arc::new(AtomicU64::new(0)),
        })
    }

    /// Parses names such as `sphere4`, `ackley4`, `rastrigin2`, `shekel4`.
    pub fn by_name(name: &str) -> Result<Self, BenchError> {
        let split = name.find(|c: char| c.is_ascii_digit()).unwrap_or(name.len());
        let (base, digits) = name.split_at(split);
        let dim: usize = digits.parse().map_err(|_| BenchError::UnknownBenchmark(name.into()))?;
        let kind = match base {
            "shekel" => OracleKind::Shekel4,
            "ackley" => OracleKind::Ackley,
            "rastrigin" => OracleKind::Rastrigin,
            "sphere" => OracleKind::Sphere,
            _ => return Err(BenchError::UnknownBenchmark(name.into())),
        };
        Self::new(kind, dim).map_err(|_| BenchError::UnknownBenchmark(name.into()))
    }

    pub fn name(&self) -> String {
        match self.kind {
            OracleKind::Shekel4 => "shekel4".into(),
            OracleKind::Ackley => format!("ackley{}", self.dim),
            OracleKind::Rastrigin => format!("rastrigin{}", self.dim),
            OracleKind::Sphere => format!("sphere{}", self.dim),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn in_domain(&self, x: &[f64]) -> bool {
        x.iter().zip(&self.domain).all(|(v, (lo, hi))| v >= lo && v <= hi)
    }

    /// Value and analytic gradient. Counts as one oracle call.
    pub fn eval(&self, x: &[f64]) -> Result<(f64, Vec<f64>), BenchError> {
        if x.len() != self.dim {
            return Err(BenchError::DimensionMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(self.eval_uncounted(x))
    }

    pub fn value(&self, x: &[f64]) -> Result<f64, BenchError> {
        Ok(self.eval(x)?.0)
    }

    fn eval_uncounted(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let d = x.len() as f64;
        match self.kind {
            OracleKind::Sphere => (-x.iter().map(|v| v * v).sum::<f64>(), x.iter().map(|v| -2.0 * v).collect()),
            OracleKind::Rastrigin => {
                let a = 10.0;
                let tau = 2.0 * std::f64::consts::PI;
                let f = a * d + x.iter().map(|v| v * v - a * (tau * v).cos()).sum::<f64>();
                (-f, x.iter().map(|v| -(2.0 * v + a * tau * (tau * v).sin())).collect())
            }
            OracleKind::Ackley => {
                let (a, b, c) = (20.0, 0.2, 2.0 * std::f64::consts::PI);
                let r = (x.iter().map(|v| v * v).sum::<f64>() / d).sqrt();
                let s = x.iter().map(|v| (c * v).cos()).sum::<f64>() / d;
                let e1 = (-b * r).exp();
                let e2 = s.exp();
                let f = -a * e1 - e2 + a + std::f64::consts::E;
                let grad = x
                    .iter()
                    .map(|v| {
                        let radial = if r > 0.0 { a * b * e1 * v / (d * r) } else { 0.0 };
                        -(radial + e2 * c * (c * v).sin() / d)
                    })
                    .collect();
                (-f, grad)
            }
            OracleKind::Shekel4 => {
                let mut val = 0.0;
                let mut g = vec![0.0; 4];
                for (a, c) in SHEKEL_A.iter().zip(SHEKEL_C) {
                    let q = x.iter().zip(a).map(|(u, v)| (u - v) * (u - v)).sum::<f64>() + c;
                    val += 1.0 / q;
                    for j in 0..4 {
                        g[j] -= 2.0 * (x[j] - a[j]) / (q * q);
                    }
                }
                (val, g)
            }
        }
    }

    /// Location and value of the global maximum.
    pub fn known_max(&self) -> Option<(Vec<f64>, f64)> {
        match self.kind {
            OracleKind::Sphere | OracleKind::Ackley | OracleKind::Rastrigin => {
                let x = vec![0.0; self.dim];
                let v = self.eval_uncounted(&x).0;
                Some((x, v))
            }
            OracleKind::Shekel4 => Some(self.polish(&[4.0; 4], 20_000)),
        }
    }

    /// Uncounted local gradient ascent with a backtracking step, used to
    /// pin down maxima.
    pub fn polish(&self, x0: &[f64], iters: usize) -> (Vec<f64>, f64) {
        let mut x = x0.to_vec();
        let (mut v, mut g) = self.eval_uncounted(&x);
        let mut step = 1e-2;
        for _ in 0..iters {
            let trial: Vec<f64> = x.iter().zip(&g).map(|(a, b)| a + step * b).collect();
            let (tv, tg) = self.eval_uncounted(&trial);
            if tv > v {
                x = trial;
                v = tv;
                g = tg;
                step *= 1.2;
            } else {
                step *= 0.5;
                if step < 1e-16 {
                    break;
                }
            }
        }
        (x, v)
    }

    pub fn sample_uniform(&self, rng: &mut RngState) -> Vec<f64> {
        self.domain
            .iter()
            .map(|&(lo, hi)| rng.uniform(lo, hi).expect("ordered domain"))
            .collect()
    }
}

pub fn oracle_eval(o: &Oracle, x: &[f64]) -> Result<(f64, Vec<f64>), BenchError> {
    o.eval(x)
}

// ---- benchmarks ------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct BenchmarkInstance {
    pub oracle: Oracle,
    pub full_data: OfflineDataset,
    pub offline_subset: OfflineDataset,
    pub y_bounds: (f64, f64),
}

impl BenchmarkInstance {
    /// Normalized score of the best offline point.
    pub fn subset_best_score(&self) -> f64 {
        normalized_score(self.offline_subset.max_z(), self.y_bounds.0, self.y_bounds.1).unwrap_or(f64::NAN)
    }
}

/// Uniform sample of `n_full` designs labeled by the oracle, plus its
/// lowest-valued `frac`.
pub fn make_benchmark(o: &Oracle, n_full: usize, frac: f64, rng: &mut RngState) -> Result<BenchmarkInstance, BenchError> {
    if !(frac > 0.0 && frac <= 1.0) || ((n_full as f64) * frac) < 2.0 - 1e-9 {
        return Err(BenchError::InvalidFraction(frac));
    }
    let mut xs = Vec::with_capacity(n_full * o.dim);
    let mut zs = Vec::with_capacity(n_full);
    for _ in 0..n_full {
        let x = o.sample_uniform(rng);
        zs.push(o.value(&x)?);
        xs.extend(x);
    }
    let x = Matrix::from_vec(n_full, o.dim, xs).map_err(DataError::from)?;
    let full = OfflineDataset::new(x, zs)?;
    let subset = select_bottom_fraction(&full, frac)?;
    let y_bounds = (full.min_z(), full.max_z());
    Ok(BenchmarkInstance {
        oracle: o.clone(),
        full_data: full,
        offline_subset: subset,
        y_bounds,
    })
}

// ---- pipeline configuration -------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SurrogateConfig {
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub norm: NormKind,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        Self {
            hidden: vec![512, 128, 32],
            leaky_slope: 0.01,
            norm: NormKind::BatchStat,
        }
    }
}

impl SurrogateConfig {
    pub fn architecture(&self, input_dim: usize) -> Architecture {
        Architecture {
            input_dim,
            hidden: self.hidden.clone(),
            leaky_slope: self.leaky_slope,
            norm: self.norm,
        }
    }
}

/// Parameter ranges of the generator that labels offline inputs under
/// kernels drawn without reference to the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExptConfig {
    pub lengthscale_range: (f64, f64),
    pub variance_range: (f64, f64),
}

impl Default for ExptConfig {
    fn default() -> Self {
        Self {
            lengthscale_range: (0.1, 10.0),
            variance_range: (0.1, 10.0),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub sim4opt: Sim4OptConfig,
    pub meta: MetaConfig,
    pub finetune: FinetuneConfig,
    pub baseline: BaselineConfig,
    pub search: SearchConfig,
    pub surrogate: SurrogateConfig,
    pub expt: ExptConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Optbias,
    OptbiasPretrain,
    OptbiasRandomGen,
    Matchopt,
    Ga,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Optbias,
        Method::OptbiasPretrain,
        Method::OptbiasRandomGen,
        Method::Matchopt,
        Method::Ga,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Optbias => "optbias",
            Method::OptbiasPretrain => "optbias_pretrain",
            Method::OptbiasRandomGen => "optbias_random_gen",
            Method::Matchopt => "matchopt",
            Method::Ga => "ga",
        }
    }

    pub fn parse(s: &str) -> Result<Self, BenchError> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| BenchError::UnknownMethod(s.to_string()))
    }

    fn uses_tasks(&self) -> bool {
        matches!(self, Method::Optbias | Method::OptbiasPretrain | Method::OptbiasRandomGen)
    }
}

/// Fixed stream ids derived from a run seed, shared by the in-process
/// runner and the file-based pipeline.
pub mod streams {
    pub const DATA: u64 = 0;
    pub const GENERATE: u64 = 1;
    pub const META: u64 = 2;
    pub const FINETUNE: u64 = 3;
    pub const SEARCH: u64 = 4;
    pub const INIT: u64 = 5;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub method: String,
    pub benchmark: String,
    pub seed: u64,
    pub percentile100: f64,
    pub best_raw: f64,
    pub candidate_scores: Vec<f64>,
    pub runtime_s: f64,
    /// Oracle evaluations made by the run (scoring only).
    pub oracle_calls: u64,
}

impl ScoreReport {
    pub fn row(&self, wall_clock: bool) -> ScoreRow {
        ScoreRow {
            method: self.method.clone(),
            benchmark: self.benchmark.clone(),
            seed: self.seed,
            percentile100: self.percentile100,
            best_raw: self.best_raw,
            runtime_s: if wall_clock { self.runtime_s } else { 0.0 },
        }
    }
}

/// Everything a pipeline run produces before scoring.
#[derive(Debug, Clone)]
pub struct RunArtifacts {
    pub scaler: Scaler,
    pub net: SurrogateNet,
    pub designs: CandidateSet,
    pub train: Option<TrainStats>,
}

/// Standardized offline data and its scaler for a benchmark.
pub fn standardized_offline(b: &BenchmarkInstance) -> Result<(OfflineDataset, Scaler), BenchError> {
    Ok(standardize(&b.offline_subset)?)
}

/// Task set for a task-based method.
pub fn tasks_for(method: Method, ds: &OfflineDataset, cfg: &PipelineConfig, seed: u64) -> Result<Vec<SyntheticTask>, BenchError> {
    let rng = RngState::new(seed).derive(streams::GENERATE);
    match method {
        Method::OptbiasRandomGen => expt_style_generate(ds, &cfg.sim4opt, &cfg.expt, &rng),
        _ => Ok(generate_tasks(ds, &cfg.sim4opt, &rng)?),
    }
}

/// Initial network for a run.
pub fn initial_net(dim: usize, cfg: &PipelineConfig, seed: u64) -> Result<SurrogateNet, BenchError> {
    let mut rng = RngState::new(seed).derive(streams::INIT);
    Ok(init_net(&cfg.surrogate.architecture(dim), &mut rng)?)
}

/// Meta-trains (or pretrains) a fresh network on `tasks`.
pub fn train_on(
    method: Method,
    tasks: &[SyntheticTask],
    dim: usize,
    cfg: &PipelineConfig,
    seed: u64,
) -> Result<(SurrogateNet, TrainStats), BenchError> {
    let mut net = initial_net(dim, cfg, seed)?;
    let mut rng = RngState::new(seed).derive(streams::META);
    let stats = match method {
        Method::OptbiasPretrain => pretrain(&mut net, tasks, &cfg.meta, &mut rng)?,
        _ => meta_train(&mut net, tasks, &cfg.meta, &mut rng)?,
    };
    Ok((net, stats))
}

pub fn finetune_net(net: &mut SurrogateNet, ds: &OfflineDataset, cfg: &PipelineConfig, seed: u64) -> Result<(), BenchError> {
    let mut rng = RngState::new(seed).derive(streams::FINETUNE);
    finetune(net, ds, &cfg.finetune, &mut rng)?;
    Ok(())
}

/// Candidate selection and ascent in standardized units.
pub fn search_designs(
    net: &SurrogateNet,
    ds: &OfflineDataset,
    scaler: &Scaler,
    domain: &[(f64, f64)],
    cfg: &SearchConfig,
    seed: u64,
) -> Result<CandidateSet, BenchError> {
    cfg.validate()?;
    let mut rng = RngState::new(seed).derive(streams::SEARCH);
    let c = init_candidates(net, ds, cfg.top_k, cfg.n_candidates, &mut rng)?;
    let bounds = cfg.bounded.then(|| standardized_bounds(domain, scaler, cfg.bound_expand));
    Ok(gradient_search(net, &c, cfg.gamma, cfg.steps, bounds.as_deref())?)
}

/// Runs a method up to (not including) scoring. `tasks` overrides task
/// generation for task-based methods.
pub fn run_pipeline(
    method: Method,
    b: &BenchmarkInstance,
    cfg: &PipelineConfig,
    seed: u64,
    tasks: Option<&[SyntheticTask]>,
) -> Result<RunArtifacts, BenchError> {
    let (ds, scaler) = standardized_offline(b)?;
    let d = ds.dim();
    let (mut net, train) = if method.uses_tasks() {
        let owned;
        let tasks = match tasks {
            Some(t) => t,
            None => {
                owned = tasks_for(method, &ds, cfg, seed)?;
                &owned
            }
        };
        if tasks.is_empty() {
            return Err(BenchError::InvalidConfig("task-based methods need at least one task".into()));
        }
        let (mut net, stats) = train_on(method, tasks, d, cfg, seed)?;
        finetune_net(&mut net, &ds, cfg, seed)?;
        (net, Some(stats))
    } else {
        let mut net = initial_net(d, cfg, seed)?;
        let mut rng = RngState::new(seed).derive(streams::META);
        match method {
            Method::Matchopt => train_match(&mut net, &ds, &cfg.baseline, &mut rng)?,
            _ => train_mse(&mut net, &ds, &cfg.baseline, &mut rng)?,
        };
        (net, None)
    };
    net.set_mode(Mode::Eval);
    let designs = search_designs(&net, &ds, &scaler, &b.oracle.domain, &cfg.search, seed)?;
    Ok(RunArtifacts {
        scaler,
        net,
        designs,
        train,
    })
}

/// Evaluates final designs (standardized units) under the oracle.
pub fn score_designs(
    label: &str,
    b: &BenchmarkInstance,
    designs: &CandidateSet,
    scaler: &Scaler,
    seed: u64,
    runtime_s: f64,
) -> Result<ScoreReport, BenchError> {
    let before = b.oracle.calls();
    let raw: Vec<f64> = designs
        .designs
        .iter_rows()
        .map(|x| b.oracle.value(&scaler.inverse_x(x)))
        .collect::<Result<_, _>>()?;
    let (lo, hi) = b.y_bounds;
    let scores: Vec<f64> = raw.iter().map(|&y| normalized_score(y, lo, hi)).collect::<Result<_, _>>()?;
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(ScoreReport {
        method: label.to_string(),
        benchmark: b.oracle.name(),
        seed,
        percentile100: best,
        best_raw: raw.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        candidate_scores: scores,
        runtime_s,
        oracle_calls: b.oracle.calls() - before,
    })
}

pub fn run_method(method: Method, b: &BenchmarkInstance, cfg: &PipelineConfig, seed: u64) -> Result<ScoreReport, BenchError> {
    let t0 = Instant::now();
    let calls0 = b.oracle.calls();
    let art = run_pipeline(method, b, cfg, seed, None)?;
    let offline_calls = b.oracle.calls() - calls0;
    debug_assert_eq!(offline_calls, 0, "oracle queried before scoring");
    let mut r = score_designs(method.name(), b, &art.designs, &art.scaler, seed, t0.elapsed().as_secs_f64())?;
    r.oracle_calls += offline_calls;
    Ok(r)
}

/// Benchmark instance for a seed: the data stream is derived from it.
pub fn benchmark_for(oracle: &Oracle, n_full: usize, frac: f64, seed: u64) -> Result<BenchmarkInstance, BenchError> {
    let mut rng = RngState::new(seed).derive(streams::DATA);
    make_benchmark(oracle, n_full, frac, &mut rng)
}

// ---- generator baseline ------------------------------------------------------

/// Tasks whose pseudo-labels are the offline inputs themselves, evaluated
/// under posteriors with kernel parameters drawn log-uniformly from wide
/// fixed ranges. No trajectories are simulated; pairs come from the sorted
/// flat set.
pub fn expt_style_generate(
    ds: &OfflineDataset,
    sim: &Sim4OptConfig,
    cfg: &ExptConfig,
    rng: &RngState,
) -> Result<Vec<SyntheticTask>, BenchError> {
    if sim.n_functions == 0 {
        return Err(BenchError::InvalidConfig("n_functions must be >= 1".into()));
    }
    if ds.len() < 2 {
        return Err(BenchError::InvalidConfig("need at least 2 offline points".into()));
    }
    let (l0, l1) = cfg.lengthscale_range;
    let (v0, v1) = cfg.variance_range;
    if !(l0 > 0.0 && l0 <= l1 && v0 > 0.0 && v0 <= v1) {
        return Err(BenchError::InvalidConfig("parameter ranges must be positive and ordered".into()));
    }
    let base = resolve_base_params(ds, &Sim4OptConfig {
        fit_base: false,
        ..sim.clone()
    })?;
    let field = match sim.evolution_mode {
        EvolutionMode::PosteriorMean => Field::Mean,
        EvolutionMode::Ucb => Field::Ucb(sim.ucb_beta),
    };
    (0..sim.n_functions)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(i as u64);
            let mut p = base;
            p.lengthscale = log_uniform(&mut r, l0, l1);
            p.signal_variance = log_uniform(&mut r, v0, v1);
            let g = posterior(ds, &p)?;
            let trajectories = ds
                .x
                .iter_rows()
                .map(|x| Trajectory {
                    states: Matrix::from_rows(&[x]).expect("finite"),
                    labels: vec![field.value(&g, x)],
                })
                .collect();
            Ok(SyntheticTask::new(i, p, field, trajectories, PairSource::Flat)?)
        })
        .collect()
}

fn log_uniform(rng: &mut RngState, lo: f64, hi: f64) -> f64 {
    rng.uniform(lo.ln(), hi.ln()).expect("ordered range").exp()
}

// ---- diagnostics -------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradErrorConfig {
    pub benchmark: String,
    pub fractions: Vec<f64>,
    pub n_train: usize,
    pub n_test: usize,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub hidden: Vec<usize>,
}

impl Default for GradErrorConfig {
    fn default() -> Self {
        Self {
            benchmark: "shekel4".into(),
            fractions: vec![0.01, 0.1, 0.5, 1.0],
            n_train: 8000,
            n_test: 2000,
            steps: 1000,
            lr: 0.001,
            batch_size: 128,
            hidden: vec![512, 128, 32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradErrorRow {
    pub fraction: f64,
    pub mean_grad_error: f64,
    pub std: f64,
    /// Per-seed errors, in seed order.
    pub per_seed: Vec<f64>,
}

pub const GRAD_ERROR_HEADER: &str = "fraction,mean_grad_error,std";

/// Mean L2 distance between a value-regression surrogate's input gradient
/// and the oracle gradient on held-out points, for each training fraction.
pub fn grad_error_curve(
    o: &Oracle,
    fractions: &[f64],
    cfg: &GradErrorConfig,
    seeds: &[u64],
) -> Result<Vec<GradErrorRow>, BenchError> {
    if fractions.is_empty() {
        return Err(BenchError::InvalidConfig("no fractions given".into()));
    }
    if seeds.is_empty() {
        return Err(BenchError::InvalidConfig("no seeds given".into()));
    }
    if let Some(&f) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(BenchError::InvalidFraction(f));
    }
    let cells: Vec<(usize, usize)> = (0..seeds.len())
        .flat_map(|s| (0..fractions.len()).map(move |f| (s, f)))
        .collect();
    let errs: Vec<f64> = cells
        .par_iter()
        .map(|&(si, fi)| grad_error_once(o, fractions[fi], cfg, seeds[si]))
        .collect::<Result<_, _>>()?;
    Ok(fractions
        .iter()
        .enumerate()
        .map(|(fi, &fraction)| {
            let per_seed: Vec<f64> = (0..seeds.len()).map(|si| errs[si * fractions.len() + fi]).collect();
            let m = mean(&per_seed);
            let sd = (per_seed.iter().map(|e| (e - m) * (e - m)).sum::<f64>() / per_seed.len() as f64).sqrt();
            GradErrorRow {
                fraction,
                mean_grad_error: m,
                std: sd,
                per_seed,
            }
        })
        .collect())
}

fn grad_error_once(o: &Oracle, fraction: f64, cfg: &GradErrorConfig, seed: u64) -> Result<f64, BenchError> {
    let root = RngState::new(seed);
    let mut data_rng = root.derive(streams::DATA);
    let sample = |n: usize, rng: &mut RngState| -> Result<(Matrix, Vec<f64>, Vec<Vec<f64>>), BenchError> {
        let mut xs = Vec::with_capacity(n * o.dim);
        let mut zs = Vec::with_capacity(n);
        let mut gs = Vec::with_capacity(n);
        for _ in 0..n {
            let x = o.sample_uniform(rng);
            let (v, g) = o.eval(&x)?;
            zs.push(v);
            gs.push(g);
            xs.extend(x);
        }
        Ok((Matrix::from_vec(n, o.dim, xs).map_err(DataError::from)?, zs, gs))
    };
    let (xtr, ztr, _) = sample(cfg.n_train, &mut data_rng)?;
    let (xte, _, gte) = sample(cfg.n_test, &mut data_rng)?;
    let k = ((fraction * cfg.n_train as f64 - 1e-9).ceil() as usize).clamp(2, cfg.n_train);
    let train = OfflineDataset::new(xtr, ztr)?.subset(&(0..k).collect::<Vec<_>>());
    let (std_train, scaler) = standardize(&train)?;
    let arch = Architecture::new(o.dim, cfg.hidden.clone());
    let mut net = init_net(&arch, &mut root.derive(streams::INIT))?;
    let bcfg = BaselineConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        batch_size: cfg.batch_size,
        ..Default::default()
    };
    train_mse(&mut net, &std_train, &bcfg, &mut root.derive(streams::META))?;
    let xs_std: Vec<f64> = xte.iter_rows().flat_map(|x| scaler.transform_x(x)).collect();
    let xs_std = Matrix::from_vec(xte.rows(), o.dim, xs_std).map_err(DataError::from)?;
    let grads = net.input_grad_batch(&xs_std, None)?;
    let errs: Vec<f64> = grads
        .iter_rows()
        .zip(&gte)
        .map(|(g, truth)| {
            let raw = scaler.gradient_to_raw(g);
            raw.iter().zip(truth).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .collect();
    Ok(mean(&errs))
}

/// Window-3 running median; endpoints are kept as they are.
pub fn median_smooth(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            if i == 0 || i + 1 == v.len() {
                v[i]
            } else {
                median(&v[i - 1..=i + 1])
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Share of evaluated designs whose true value exceeds `threshold`.
    pub exceed_fraction: f64,
    pub threshold: f64,
}

pub const HISTOGRAM_HEADER: &str = "bin_lo,bin_hi,count";
pub const HISTOGRAM_BINS: usize = 30;

impl Histogram {
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{HISTOGRAM_HEADER}")?;
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(w, "{},{},{}", self.edges[i], self.edges[i + 1], c)?;
        }
        Ok(())
    }
}

/// Evaluates the highest pseudo-labeled state of every trajectory under the
/// oracle and bins the true values over `[y_min, y_max + 0.1·(y_max − y_min)]`.
/// Values outside the range land in the end bins.
pub fn pseudo_value_distribution(
    tasks: &[SyntheticTask],
    o: &Oracle,
    scaler: &Scaler,
    y_bounds: (f64, f64),
    threshold: f64,
) -> Result<Histogram, BenchError> {
    let tops: Vec<Vec<f64>> = tasks
        .iter()
        .flat_map(|t| t.trajectories.iter())
        .filter(|tr| !tr.is_empty())
        .map(|tr| scaler.inverse_x(tr.states.row(tr.len() - 1)))
        .collect();
    if tops.is_empty() {
        return Err(BenchError::EmptyTask);
    }
    let values: Vec<f64> = tops.iter().map(|x| o.value(x)).collect::<Result<_, _>>()?;
    let (lo, hi) = y_bounds;
    let hi = hi + 0.1 * (hi - lo);
    let width = (hi - lo) / HISTOGRAM_BINS as f64;
    let edges: Vec<f64> = (0..=HISTOGRAM_BINS).map(|i| lo + i as f64 * width).collect();
    let mut counts = vec![0; HISTOGRAM_BINS];
    for &v in &values {
        let b = if width > 0.0 { ((v - lo) / width).floor() } else { 0.0 };
        counts[(b.max(0.0) as usize).min(HISTOGRAM_BINS - 1)] += 1;
    }
    let exceed = values.iter().filter(|&&v| v > threshold).count() as f64 / values.len() as f64;
    Ok(Histogram {
        edges,
        counts,
        exceed_fraction: exceed,
        threshold,
    })
}

// ---- grids and ablations -------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub benchmarks: Vec<String>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    pub n_full: usize,
    pub frac: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            benchmarks: vec!["sphere4".into(), "ackley4".into(), "shekel4".into()],
            methods: Method::ALL.to_vec(),
            seeds: vec![0, 1, 2, 3],
            n_full: 8000,
            frac: 0.01,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<(), BenchError> {
        if self.benchmarks.is_empty() || self.methods.is_empty() || self.seeds.is_empty() {
            return Err(BenchError::InvalidConfig("grid needs at least one benchmark, method and seed".into()));
        }
        for b in &self.benchmarks {
            Oracle::by_name(b)?;
        }
        Ok(())
    }

    pub fn oracles(&self) -> Result<Vec<Oracle>, BenchError> {
        self.benchmarks.iter().map(|b| Oracle::by_name(b)).collect()
    }
}

/// A labeled pipeline variant scored inside a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub label: String,
    pub method: Method,
    pub cfg: PipelineConfig,
    /// Keeps only the first `k` generated tasks (nested task sets).
    pub task_limit: Option<usize>,
}

impl Variant {
    pub fn plain(method: Method, cfg: &PipelineConfig) -> Self {
        Self {
            label: method.name().to_string(),
            method,
            cfg: cfg.clone(),
            task_limit: None,
        }
    }
}

/// Runs every variant on every (benchmark, seed) cell. Cells run in
/// parallel on the current rayon pool; variants within a cell run in order
/// and share generated tasks whenever their generator settings agree.
/// Runs come back ordered by benchmark, variant, seed.
pub fn run_variants(spec: &GridSpec, variants: &[Variant]) -> Result<Vec<GridRun>, BenchError> {
    spec.validate()?;
    if variants.is_empty() {
        return Err(BenchError::InvalidConfig("no variants to run".into()));
    }
    let oracles = spec.oracles()?;
    let cells: Vec<(usize, usize)> = (0..oracles.len())
        .flat_map(|b| (0..spec.seeds.len()).map(move |s| (b, s)))
        .collect();
    let mut per_cell: Vec<Vec<Option<GridRun>>> = cells
        .par_iter()
        .map(|&(bi, si)| Ok(run_cell(&oracles[bi], spec, spec.seeds[si], variants)?.into_iter().map(Some).collect()))
        .collect::<Result<_, BenchError>>()?;
    let mut out = Vec::with_capacity(cells.len() * variants.len());
    for bi in 0..oracles.len() {
        for vi in 0..variants.len() {
            for si in 0..spec.seeds.len() {
                out.push(per_cell[bi * spec.seeds.len() + si][vi].take().expect("each run is taken once"));
            }
        }
    }
    Ok(out)
}

/// One scored run of a grid with the artifacts behind it.
#[derive(Debug, Clone)]
pub struct GridRun {
    pub report: ScoreReport,
    pub artifacts: RunArtifacts,
}

fn run_cell(oracle: &Oracle, spec: &GridSpec, seed: u64, variants: &[Variant]) -> Result<Vec<GridRun>, BenchError> {
    let o = Oracle::new(oracle.kind, oracle.dim)?;
    let b = benchmark_for(&o, spec.n_full, spec.frac, seed)?;
    let (ds, _) = standardized_offline(&b)?;
    let mut cache: Vec<((bool, Sim4OptConfig, ExptConfig), Vec<SyntheticTask>)> = Vec::new();
    let mut out = Vec::with_capacity(variants.len());
    for v in variants {
        let t0 = Instant::now();
        let art = if v.method.uses_tasks() {
            let key = (v.method == Method::OptbiasRandomGen, v.cfg.sim4opt.clone(), v.cfg.expt.clone());
            let idx = match cache.iter().position(|(k, _)| *k == key) {
                Some(i) => i,
                None => {
                    let t = tasks_for(v.method, &ds, &v.cfg, seed)?;
                    cache.push((key, t));
                    cache.len() - 1
                }
            };
            let tasks = &cache[idx].1;
            let k = v.task_limit.unwrap_or(tasks.len()).min(tasks.len());
            run_pipeline(v.method, &b, &v.cfg, seed, Some(&tasks[..k]))?
        } else {
            run_pipeline(v.method, &b, &v.cfg, seed, None)?
        };
        let elapsed = t0.elapsed().as_secs_f64();
        let r = score_designs(&v.label, &b, &art.designs, &art.scaler, seed, elapsed)?;
        log::info!("{} {} seed {}: {:.4} ({elapsed:.1}s)", r.benchmark, r.method, seed, r.percentile100);
        out.push(GridRun {
            report: r,
            artifacts: art,
        });
    }
    Ok(out)
}

pub fn run_grid(spec: &GridSpec, cfg: &PipelineConfig) -> Result<Vec<GridRun>, BenchError> {
    let variants: Vec<Variant> = spec.methods.iter().map(|&m| Variant::plain(m, cfg)).collect();
    run_variants(spec, &variants)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AblationAxis {
    /// Meta-learning against pretraining on pooled tasks.
    Meta,
    /// Trajectory generator against data-agnostic relabeling.
    Generator,
    /// Kernel family, drive field, trajectory length and lengthscale.
    Gp,
    /// Number of synthetic tasks used for meta-training.
    K,
}

pub const K_GRID: [usize; 5] = [8, 16, 32, 64, 128];

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self, BenchError> {
        match s.to_ascii_lowercase().as_str() {
            "meta" => Ok(Self::Meta),
            "generator" => Ok(Self::Generator),
            "gp" => Ok(Self::Gp),
            "k" => Ok(Self::K),
            _ => Err(BenchError::InvalidConfig(format!("unknown ablation axis `{s}` (meta, generator, gp, k)"))),
        }
    }

    pub fn variants(&self, cfg: &PipelineConfig) -> Vec<Variant> {
        let plain = |m| Variant::plain(m, cfg);
        let tweak = |label: &str, f: &dyn Fn(&mut Sim4OptConfig)| {
            let mut c = cfg.clone();
            f(&mut c.sim4opt);
            Variant {
                label: label.to_string(),
                method: Method::Optbias,
                cfg: c,
                task_limit: None,
            }
        };
        match self {
            Self::Meta => vec![plain(Method::Optbias), plain(Method::OptbiasPretrain)],
            Self::Generator => vec![plain(Method::Optbias), plain(Method::OptbiasRandomGen)],
            Self::Gp => vec![
                tweak("optbias[matern]", &|s| s.base_params.family = KernelFamily::Matern52),
                tweak("optbias[ucb]", &|s| s.evolution_mode = EvolutionMode::Ucb),
                tweak("optbias[m=35]", &|s| s.evolve_steps = 35),
                tweak("optbias[lengthscale=1.5]", &|s| s.base_params.lengthscale = 1.5),
                tweak("optbias[lengthscale=2.0]", &|s| s.base_params.lengthscale = 2.0),
                plain(Method::Optbias),
            ],
            Self::K => {
                let mut c = cfg.clone();
                c.sim4opt.n_functions = c.sim4opt.n_functions.max(*K_GRID.last().unwrap());
                K_GRID
                    .iter()
                    .map(|&k| Variant {
                        label: format!("optbias[k={k}]"),
                        method: Method::Optbias,
                        cfg: c.clone(),
                        task_limit: Some(k),
                    })
                    .collect()
            }
        }
    }
}

// ---- aggregation ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub benchmark: String,
    pub n_seeds: usize,
    pub mean: f64,
    pub std: f64,
    pub rank: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub rows: Vec<SummaryRow>,
    /// (method, mean rank across benchmarks) in first-seen method order.
    pub mean_ranks: Vec<(String, f64)>,
}

pub const SUMMARY_HEADER: &str = "method,benchmark,n_seeds,mean,std,rank";

impl Summary {
    /// Per-cell rows followed by one `ALL` row per method carrying its mean
    /// rank.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W) -> std::io::Result<()> {
        writeln!(w, "{SUMMARY_HEADER}")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{},{},{}", r.method, r.benchmark, r.n_seeds, r.mean, r.std, r.rank)?;
        }
        for (m, r) in &self.mean_ranks {
            writeln!(w, "{m},ALL,,,,{r}")?;
        }
        Ok(())
    }
}

/// Mean ± population std per method×benchmark, average ranks per benchmark
/// (1 = best mean, ties share), and mean rank per method.
pub fn summarize(reports: &[ScoreRow]) -> Result<Summary, BenchError> {
    let mut methods: Vec<String> = Vec::new();
    let mut benches: Vec<String> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method) {
            methods.push(r.method.clone());
        }
        if !benches.contains(&r.benchmark) {
            benches.push(r.benchmark.clone());
        }
    }
    if methods.is_empty() {
        return Err(BenchError::IncompleteGrid("no reports".into()));
    }
    let mut rows = Vec::new();
    let mut ranks_by_method = vec![Vec::new(); methods.len()];
    for b in &benches {
        let mut seed_set: Option<Vec<u64>> = None;
        let mut cells = Vec::new();
        for m in &methods {
            let mut seeds: Vec<u64> = Vec::new();
            let mut vals = Vec::new();
            for r in reports.iter().filter(|r| &r.method == m && &r.benchmark == b) {
                seeds.push(r.seed);
                vals.push(r.percentile100);
            }
            if vals.is_empty() {
                return Err(BenchError::IncompleteGrid(format!("{m} has no runs on {b}")));
            }
            seeds.sort_unstable();
            match &seed_set {
                None => seed_set = Some(seeds),
                Some(s) if *s != seeds => {
                    return Err(BenchError::IncompleteGrid(format!("{m} on {b} covers seeds {seeds:?}, expected {s:?}")))
                }
                _ => {}
            }
            let mu = mean(&vals);
            let sd = (vals.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / vals.len() as f64).sqrt();
            cells.push((m.clone(), vals.len(), mu, sd));
        }
        let means: Vec<f64> = cells.iter().map(|c| c.2).collect();
        let ranks = average_ranks(&means);
        for (i, (m, n, mu, sd)) in cells.into_iter().enumerate() {
            ranks_by_method[i].push(ranks[i]);
            rows.push(SummaryRow {
                method: m,
                benchmark: b.clone(),
                n_seeds: n,
                mean: mu,
                std: sd,
                rank: ranks[i],
            });
        }
    }
    let mean_ranks = methods.into_iter().zip(ranks_by_method.iter().map(|r| mean(r))).collect();
    Ok(Summary { rows, mean_ranks })
}

/// Descending ranks starting at 1, ties sharing the average of their
/// positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Kernel family label used in ablation method names.
pub fn family_name(f: KernelFamily) -> &'static str {
    match f {
        KernelFamily::Rbf => "rbf",
        KernelFamily::Matern52 => "matern52",
    }
}

/// Median over seeds of a per-seed quantity.
pub fn seed_median(values: &[f64]) -> f64 {
    median(values)
}
