//! Synthetic task generation from perturbed GP posteriors.
//!
//! Each task draws kernel parameters around a base setting, conditions a GP
//! on the offline data, and walks every offline input down and up the
//! posterior field for `M` fixed-size gradient steps. A start's descent
//! (reversed), the start itself, and its ascent form one trajectory of
//! `2M+1` states, which is then sorted by pseudo-label so that consecutive
//! states always go uphill.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{OfflineDataset, Scaler};
use crate::gp::{fit_hyperparams, log_grid, posterior, GpError, GpModel, KernelParams};
use crate::matchloss::{MatchError, PairBatch};
use crate::numerics::{mean, Matrix, RngState};

/// Largest coordinate magnitude (standardized units) a state may reach.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Extra parameter draws allowed when a task diverges.
pub const MAX_RETRIES: usize = 3;
pub const BUNDLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum Sim4OptError {
    #[error("invalid perturbation width {0}: must lie in [0, 1) (relative) or below the base values (absolute)")]
    InvalidDelta(f64),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("state left the finite range at step {step}")]
    NonFiniteState { step: usize },
    #[error("task {task} failed after {attempts} attempts: {reason}")]
    TaskGenerationFailed { task: usize, attempts: usize, reason: String },
    #[error("task has no pairs")]
    EmptyTask,
    #[error(transparent)]
    Gp(#[from] GpError),
    #[error(transparent)]
    Pairs(#[from] MatchError),
    #[error("bundle error: {0}")]
    Bundle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvolutionMode {
    PosteriorMean,
    Ucb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeltaMode {
    Relative,
    Absolute,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sim4OptConfig {
    pub n_functions: usize,
    pub evolve_steps: usize,
    pub step_size: f64,
    pub delta_mode: DeltaMode,
    /// Half-width as a fraction of the base values.
    pub delta_frac: f64,
    /// Half-width in absolute units, used when `delta_mode = absolute`.
    pub delta_abs: f64,
    pub evolution_mode: EvolutionMode,
    pub ucb_beta: f64,
    pub base_params: KernelParams,
    /// Pick the base lengthscale and signal variance by marginal likelihood
    /// over `fit_factors × base_params` before perturbing.
    pub fit_base: bool,
    pub fit_factors: Vec<f64>,
    /// Replace the base prior mean with the mean offline output.
    pub mean_from_data: bool,
    /// Number of offline inputs used as trajectory starts; 0 means all.
    pub start_subsample: usize,
}

impl Default for Sim4OptConfig {
    fn default() -> Self {
        Self {
            n_functions: 128,
            evolve_steps: 100,
            step_size: 0.05,
            delta_mode: DeltaMode::Relative,
            delta_frac: 0.5,
            delta_abs: 0.5,
            evolution_mode: EvolutionMode::PosteriorMean,
            ucb_beta: 2.0,
            base_params: KernelParams::default(),
            fit_base: false,
            fit_factors: vec![0.5, 1.0, 2.0],
            mean_from_data: true,
            start_subsample: 0,
        }
    }
}

impl Sim4OptConfig {
    pub fn validate(&self) -> Result<(), Sim4OptError> {
        let bad = |m: &str| Err(Sim4OptError::InvalidConfig(m.to_string()));
        if self.n_functions == 0 {
            return bad("n_functions must be >= 1");
        }
        if self.evolve_steps == 0 {
            return bad("evolve_steps must be >= 1");
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad("step_size must be positive");
        }
        if !(self.ucb_beta >= 0.0) {
            return bad("ucb_beta must be nonnegative");
        }
        if self.fit_base && (self.fit_factors.is_empty() || self.fit_factors.iter().any(|f| !(*f > 0.0))) {
            return bad("fit_factors must be a nonempty list of positive numbers");
        }
        self.base_params.validate()?;
        check_delta(&self.base_params, self.delta_mode, self.delta())?;
        Ok(())
    }

    fn delta(&self) -> f64 {
        match self.delta_mode {
            DeltaMode::Relative => self.delta_frac,
            DeltaMode::Absolute => self.delta_abs,
        }
    }

    fn field(&self) -> Field {
        match self.evolution_mode {
            EvolutionMode::PosteriorMean => Field::Mean,
            EvolutionMode::Ucb => Field::Ucb(self.ucb_beta),
        }
    }
}

fn check_delta(base: &KernelParams, mode: DeltaMode, delta: f64) -> Result<(), Sim4OptError> {
    let ok = match mode {
        DeltaMode::Relative => (0.0..1.0).contains(&delta),
        DeltaMode::Absolute => {
            delta >= 0.0 && delta < base.lengthscale && delta < base.signal_variance
        }
    };
    if ok {
        Ok(())
    } else {
        Err(Sim4OptError::InvalidDelta(delta))
    }
}

/// The scalar field a task's trajectories climb and are labeled with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "beta", rename_all = "snake_case")]
pub enum Field {
    Mean,
    Ucb(f64),
}

impl Field {
    pub fn value(&self, g: &GpModel, x: &[f64]) -> f64 {
        match *self {
            Field::Mean => g.mean_unchecked(x),
            Field::Ucb(beta) => g.ucb_and_grad(x, beta).0,
        }
    }

    fn value_and_grad(&self, g: &GpModel, x: &[f64]) -> (f64, Vec<f64>) {
        match *self {
            Field::Mean => g.mean_and_grad(x),
            Field::Ucb(beta) => g.ucb_and_grad(x, beta),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub states: Matrix,
    pub labels: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Where a task's training pairs come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairSource {
    /// Consecutive states within each sorted trajectory.
    Trajectories,
    /// Consecutive points of the flat sorted dataset.
    Flat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub task_id: usize,
    pub params: KernelParams,
    pub field: Field,
    pub trajectories: Vec<Trajectory>,
    pub flat: OfflineDataset,
    pub pair_source: PairSource,
}

impl SyntheticTask {
    /// Assembles a task, sorting each trajectory and building the flat set.
    pub fn new(
        task_id: usize,
        params: KernelParams,
        field: Field,
        trajectories: Vec<Trajectory>,
        pair_source: PairSource,
    ) -> Result<Self, Sim4OptError> {
        let trajectories: Vec<Trajectory> = trajectories.into_iter().map(sort_trajectory).collect();
        let flat = flatten(&trajectories)?;
        Ok(Self {
            task_id,
            params,
            field,
            trajectories,
            flat,
            pair_source,
        })
    }

    /// Number of distinct consecutive pairs available.
    pub fn pair_count(&self) -> usize {
        match self.pair_source {
            PairSource::Trajectories => self.trajectories.iter().map(|t| t.len().saturating_sub(1)).sum(),
            PairSource::Flat => self.flat.len().saturating_sub(1),
        }
    }

    fn pair_at(&self, mut k: usize) -> (&[f64], &[f64], f64) {
        match self.pair_source {
            PairSource::Trajectories => {
                for t in &self.trajectories {
                    let n = t.len().saturating_sub(1);
                    if k < n {
                        return (t.states.row(k), t.states.row(k + 1), t.labels[k + 1] - t.labels[k]);
                    }
                    k -= n;
                }
                unreachable!("pair index within pair_count")
            }
            PairSource::Flat => (self.flat.x.row(k), self.flat.x.row(k + 1), self.flat.z[k + 1] - self.flat.z[k]),
        }
    }

    fn pairs_from_indices(&self, idx: &[usize]) -> Result<PairBatch, Sim4OptError> {
        Ok(PairBatch::from_rows(self.flat.dim(), idx.iter().map(|&k| self.pair_at(k)))?)
    }

    /// Range of pseudo-labels over the whole task.
    pub fn label_range(&self) -> f64 {
        self.flat.max_z() - self.flat.min_z()
    }
}

fn sort_trajectory(t: Trajectory) -> Trajectory {
    let mut order: Vec<usize> = (0..t.len()).collect();
    order.sort_by(|&a, &b| t.labels[a].total_cmp(&t.labels[b]));
    let d = t.states.cols();
    let mut states = Vec::with_capacity(t.len() * d);
    for &i in &order {
        states.extend_from_slice(t.states.row(i));
    }
    Trajectory {
        states: Matrix::from_vec(t.len(), d, states).expect("same entries"),
        labels: order.iter().map(|&i| t.labels[i]).collect(),
    }
}

fn flatten(trajectories: &[Trajectory]) -> Result<OfflineDataset, Sim4OptError> {
    let d = trajectories.first().ok_or(Sim4OptError::EmptyTask)?.states.cols();
    let mut rows: Vec<(&[f64], f64)> = trajectories
        .iter()
        .flat_map(|t| (0..t.len()).map(move |r| (t.states.row(r), t.labels[r])))
        .collect();
    rows.sort_by(|a, b| a.1.total_cmp(&b.1));
    let n = rows.len();
    let x = rows.iter().flat_map(|r| r.0.iter().copied()).collect();
    let x = Matrix::from_vec(n, d, x).map_err(|e| Sim4OptError::Bundle(e.to_string()))?;
    OfflineDataset::new(x, rows.iter().map(|r| r.1).collect()).map_err(|e| Sim4OptError::Bundle(e.to_string()))
}

/// Draws lengthscale and signal variance independently and uniformly from
/// `[base·(1−δ), base·(1+δ)]`; noise and mean are copied.
pub fn sample_task_params(base: &KernelParams, delta_frac: f64, rng: &mut RngState) -> Result<KernelParams, Sim4OptError> {
    sample_params_with(base, DeltaMode::Relative, delta_frac, rng)
}

pub fn sample_params_with(
    base: &KernelParams,
    mode: DeltaMode,
    delta: f64,
    rng: &mut RngState,
) -> Result<KernelParams, Sim4OptError> {
    check_delta(base, mode, delta)?;
    let band = |v: f64| match mode {
        DeltaMode::Relative => (v * (1.0 - delta), v * (1.0 + delta)),
        DeltaMode::Absolute => (v - delta, v + delta),
    };
    let (l0, l1) = band(base.lengthscale);
    let (s0, s1) = band(base.signal_variance);
    let mut p = *base;
    p.lengthscale = rng.uniform(l0, l1).expect("ordered band");
    p.signal_variance = rng.uniform(s0, s1).expect("ordered band");
    Ok(p)
}

/// Fixed-step gradient walk `X_m = X_{m−1} + sign·step·∇f(X_{m−1})` over
/// the posterior mean or UCB. Returns the `steps` batches after the start.
pub fn evolve(
    g: &GpModel,
    x0: &Matrix,
    sign: f64,
    steps: usize,
    step_size: f64,
    mode: EvolutionMode,
    beta: f64,
) -> Result<Vec<Matrix>, Sim4OptError> {
    let field = match mode {
        EvolutionMode::PosteriorMean => Field::Mean,
        EvolutionMode::Ucb => Field::Ucb(beta),
    };
    evolve_field(g, x0, sign, steps, step_size, field)
}

fn evolve_field(
    g: &GpModel,
    x0: &Matrix,
    sign: f64,
    steps: usize,
    step_size: f64,
    field: Field,
) -> Result<Vec<Matrix>, Sim4OptError> {
    if steps == 0 {
        return Err(Sim4OptError::InvalidConfig("steps must be >= 1".into()));
    }
    if x0.rows() == 0 {
        return Err(Sim4OptError::InvalidConfig("no start points".into()));
    }
    if x0.cols() != g.dim() {
        return Err(GpError::DimensionMismatch {
            expected: g.dim(),
            got: x0.cols(),
        }
        .into());
    }
    let mut out = Vec::with_capacity(steps);
    let mut cur = x0.clone();
    for step in 1..=steps {
        let mut next = cur.clone();
        for r in 0..cur.rows() {
            let (_, grad) = field.value_and_grad(g, cur.row(r));
            for (v, gk) in next.row_mut(r).iter_mut().zip(&grad) {
                *v += sign * step_size * gk;
            }
        }
        if next.data().iter().any(|v| !v.is_finite() || v.abs() > DIVERGENCE_LIMIT) {
            return Err(Sim4OptError::NonFiniteState { step });
        }
        out.push(next.clone());
        cur = next;
    }
    Ok(out)
}

/// Base kernel parameters for a dataset: the configured base, optionally
/// refit by marginal likelihood, with the prior mean set from the data.
pub fn resolve_base_params(ds: &OfflineDataset, cfg: &Sim4OptConfig) -> Result<KernelParams, Sim4OptError> {
    let mut base = cfg.base_params;
    if cfg.mean_from_data {
        base.mean = mean(&ds.z);
    }
    if cfg.fit_base {
        base = fit_hyperparams(ds, &log_grid(&base, &cfg.fit_factors))?;
    }
    Ok(base)
}

fn start_points(ds: &OfflineDataset, cfg: &Sim4OptConfig, rng: &mut RngState) -> Matrix {
    if cfg.start_subsample == 0 || cfg.start_subsample >= ds.len() {
        return ds.x.clone();
    }
    let mut idx = rng.sample_distinct(ds.len(), cfg.start_subsample);
    idx.sort_unstable();
    ds.subset(&idx).x
}

/// Builds one task from fixed kernel parameters.
pub fn build_task(
    task_id: usize,
    ds: &OfflineDataset,
    params: KernelParams,
    starts: &Matrix,
    cfg: &Sim4OptConfig,
) -> Result<SyntheticTask, Sim4OptError> {
    let g = posterior(ds, &params)?;
    let field = cfg.field();
    let down = evolve_field(&g, starts, -1.0, cfg.evolve_steps, cfg.step_size, field)?;
    let up = evolve_field(&g, starts, 1.0, cfg.evolve_steps, cfg.step_size, field)?;
    let d = ds.dim();
    let m = cfg.evolve_steps;
    let trajectories = (0..starts.rows())
        .map(|r| {
            let mut states = Vec::with_capacity((2 * m + 1) * d);
            for b in down.iter().rev() {
                states.extend_from_slice(b.row(r));
            }
            states.extend_from_slice(starts.row(r));
            for b in &up {
                states.extend_from_slice(b.row(r));
            }
            let states = Matrix::from_vec(2 * m + 1, d, states).expect("finite states");
            let labels = states.iter_rows().map(|x| field.value(&g, x)).collect();
            Trajectory { states, labels }
        })
        .collect();
    SyntheticTask::new(task_id, params, field, trajectories, PairSource::Trajectories)
}

/// Generates `cfg.n_functions` tasks on a standardized dataset. Task `i`
/// draws from its own stream `rng.derive(i)`, so the result does not depend
/// on how tasks are scheduled across threads.
pub fn generate_tasks(ds: &OfflineDataset, cfg: &Sim4OptConfig, rng: &RngState) -> Result<Vec<SyntheticTask>, Sim4OptError> {
    cfg.validate()?;
    if ds.len() < 2 {
        return Err(Sim4OptError::InvalidConfig(format!("need at least 2 offline points, got {}", ds.len())));
    }
    let base = resolve_base_params(ds, cfg)?;
    check_delta(&base, cfg.delta_mode, cfg.delta())?;
    (0..cfg.n_functions)
        .into_par_iter()
        .map(|i| {
            let mut trng = rng.derive(i as u64);
            let starts = start_points(ds, cfg, &mut trng);
            let mut last_err = String::new();
            for _ in 0..=MAX_RETRIES {
                let params = sample_params_with(&base, cfg.delta_mode, cfg.delta(), &mut trng)?;
                match build_task(i, ds, params, &starts, cfg) {
                    Ok(t) => return Ok(t),
                    Err(e @ (Sim4OptError::NonFiniteState { .. } | Sim4OptError::Gp(_))) => {
                        log::warn!("task {i}: {e}; redrawing kernel parameters");
                        last_err = e.to_string();
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Sim4OptError::TaskGenerationFailed {
                task: i,
                attempts: MAX_RETRIES + 1,
                reason: last_err,
            })
        })
        .collect()
}

/// `count` consecutive pairs drawn uniformly (with replacement) over the
/// task's pair positions.
pub fn build_pairs(t: &SyntheticTask, rng: &mut RngState, count: usize) -> Result<PairBatch, Sim4OptError> {
    let n = t.pair_count();
    if n == 0 {
        return Err(Sim4OptError::EmptyTask);
    }
    let idx: Vec<usize> = (0..count).map(|_| rng.index(n)).collect();
    t.pairs_from_indices(&idx)
}

/// Two disjoint pair batches (context, target). Falls back to independent
/// draws with replacement when the task has fewer than `a + b` pairs.
pub fn build_pairs_split(
    t: &SyntheticTask,
    rng: &mut RngState,
    a: usize,
    b: usize,
) -> Result<(PairBatch, PairBatch), Sim4OptError> {
    let n = t.pair_count();
    if n == 0 {
        return Err(Sim4OptError::EmptyTask);
    }
    if n < a + b {
        return Ok((build_pairs(t, rng, a)?, build_pairs(t, rng, b)?));
    }
    let idx = rng.sample_distinct(n, a + b);
    Ok((t.pairs_from_indices(&idx[..a])?, t.pairs_from_indices(&idx[a..])?))
}

/// All pairs of a task, in storage order.
pub fn all_pairs(t: &SyntheticTask) -> Result<PairBatch, Sim4OptError> {
    let n = t.pair_count();
    if n == 0 {
        return Err(Sim4OptError::EmptyTask);
    }
    t.pairs_from_indices(&(0..n).collect::<Vec<_>>())
}

// ---- bundle ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredTask {
    task_id: usize,
    params: KernelParams,
    field: Field,
    pair_source: PairSource,
    trajectories: Vec<Trajectory>,
}

/// Serialized set of tasks plus the standardized offline data they were
/// conditioned on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskBundle {
    pub schema_version: u32,
    pub generator: String,
    pub config: Sim4OptConfig,
    pub offline: OfflineDataset,
    pub scaler: Scaler,
    #[serde(serialize_with = "ser_tasks", deserialize_with = "de_tasks")]
    pub tasks: Vec<SyntheticTask>,
}

fn ser_tasks<S: serde::Serializer>(tasks: &[SyntheticTask], s: S) -> Result<S::Ok, S::Error> {
    let stored: Vec<StoredTask> = tasks
        .iter()
        .map(|t| StoredTask {
            task_id: t.task_id,
            params: t.params,
            field: t.field,
            pair_source: t.pair_source,
            trajectories: t.trajectories.clone(),
        })
        .collect();
    stored.serialize(s)
}

fn de_tasks<'de, D: serde::Deserializer<'de>>(d: D) -> Result<Vec<SyntheticTask>, D::Error> {
    let stored = Vec::<StoredTask>::deserialize(d)?;
    stored
        .into_iter()
        .map(|s| {
            SyntheticTask::new(s.task_id, s.params, s.field, s.trajectories, s.pair_source)
                .map_err(serde::de::Error::custom)
        })
        .collect()
}

impl TaskBundle {
    pub fn new(generator: &str, config: Sim4OptConfig, offline: OfflineDataset, scaler: Scaler, tasks: Vec<SyntheticTask>) -> Self {
        Self {
            schema_version: BUNDLE_SCHEMA_VERSION,
            generator: generator.to_string(),
            config,
            offline,
            scaler,
            tasks,
        }
    }

    pub fn to_writer<W: std::io::Write>(&self, w: W) -> Result<(), Sim4OptError> {
        serde_json::to_writer(w, self).map_err(|e| Sim4OptError::Bundle(e.to_string()))
    }

    pub fn from_reader<R: std::io::Read>(r: R) -> Result<Self, Sim4OptError> {
        let b: TaskBundle = serde_json::from_reader(r).map_err(|e| Sim4OptError::Bundle(e.to_string()))?;
        if b.schema_version != BUNDLE_SCHEMA_VERSION {
            return Err(Sim4OptError::Bundle(format!(
                "unsupported schema version {} (expected {BUNDLE_SCHEMA_VERSION})",
                b.schema_version
            )));
        }
        Ok(b)
    }
}
