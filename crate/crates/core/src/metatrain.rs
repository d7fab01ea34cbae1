//! Training phases: first-order meta-learning over synthetic tasks, the
//! pooled pretraining variant, fine-tuning on real offline pairs, and the
//! two single-task baselines (gradient matching and value regression).
//!
//! Norm layers: before each outer step the running statistics are refreshed
//! with a train-mode pass over the step's target points, and the losses
//! themselves use those frozen statistics. Fine-tuning never refreshes them,
//! so the search field it hands over is the one it was trained on.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::OfflineDataset;
use crate::matchloss::{match_loss_at, mse_loss, offline_pairs, IntegralMode, MatchError, PairBatch};
use crate::numerics::{Matrix, RngState};
use crate::sim4opt::{build_pairs_split, Sim4OptError, SyntheticTask};
use crate::surrogate::{apply_update, Mode, OptimizerState, ParamGrad, SurrogateError, SurrogateNet};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("no tasks to train on")]
    NoTasks,
    #[error("need at least two offline points, got {0}")]
    TooFewPoints(usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss at step {0}")]
    NonFiniteLoss(usize),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error(transparent)]
    Tasks(#[from] Sim4OptError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl OptimizerKind {
    pub fn state(&self, n: usize) -> OptimizerState {
        match self {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam => OptimizerState::adam(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaConfig {
    pub epochs: usize,
    pub tasks_per_batch: usize,
    /// Outer steps per epoch; 0 means one pass over the tasks,
    /// `ceil(n_tasks / tasks_per_batch)`.
    pub batches_per_epoch: usize,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub context_pairs: usize,
    pub target_pairs: usize,
    pub integral_mode: IntegralMode,
}

impl Default for MetaConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            tasks_per_batch: 8,
            batches_per_epoch: 0,
            inner_lr: 0.1,
            outer_lr: 0.001,
            context_pairs: 16,
            target_pairs: 64,
            integral_mode: IntegralMode::default(),
        }
    }
}

impl MetaConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.tasks_per_batch == 0 || self.context_pairs == 0 || self.target_pairs == 0 {
            return bad("meta batch counts must be >= 1");
        }
        if !(self.inner_lr >= 0.0) || !(self.outer_lr > 0.0) {
            return bad("meta learning rates must be positive (inner may be 0)");
        }
        self.integral_mode.validate()?;
        Ok(())
    }

    pub fn steps_per_epoch(&self, n_tasks: usize) -> usize {
        if self.batches_per_epoch > 0 {
            self.batches_per_epoch
        } else {
            n_tasks.div_ceil(self.tasks_per_batch).max(1)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
    pub integral_mode: IntegralMode,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            optimizer: OptimizerKind::Adam,
            lr: 0.001,
            batch_size: 128,
            integral_mode: IntegralMode::default(),
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("fine-tune needs batch_size >= 1 and lr > 0".into()));
        }
        self.integral_mode.validate()?;
        Ok(())
    }
}

/// Settings for the baselines trained only on the offline data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub integral_mode: IntegralMode,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            lr: 0.001,
            batch_size: 128,
            integral_mode: IntegralMode::default(),
        }
    }
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 || !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("baseline needs batch_size >= 1 and lr > 0".into()));
        }
        self.integral_mode.validate()?;
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_pre_loss: f64,
    pub mean_post_loss: f64,
    pub outer_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainStats {
    pub epochs: Vec<EpochStats>,
}

pub const TRAIN_LOG_HEADER: &str = "epoch,mean_pre_loss,mean_post_loss,outer_loss,seconds";

impl TrainStats {
    /// Writes the log as CSV. Timings are written as 0 unless
    /// `wall_clock` is set, which keeps logs byte-reproducible.
    pub fn write_csv<W: std::io::Write>(&self, w: &mut W, wall_clock: bool) -> std::io::Result<()> {
        writeln!(w, "{TRAIN_LOG_HEADER}")?;
        for e in &self.epochs {
            let s = if wall_clock { e.seconds } else { 0.0 };
            writeln!(w, "{},{},{},{},{}", e.epoch, e.mean_pre_loss, e.mean_post_loss, e.outer_loss, s)?;
        }
        Ok(())
    }
}

/// The pair batches one outer step works on.
#[derive(Debug, Clone)]
pub struct TaskDraw {
    pub task: usize,
    pub context: PairBatch,
    pub target: PairBatch,
}

/// Samples `tasks_per_batch` tasks (distinct when possible) and a disjoint
/// context/target split for each. Meta and pretrain steps share this so that
/// identical seeds give identical batches.
pub fn sample_draws(tasks: &[SyntheticTask], cfg: &MetaConfig, rng: &mut RngState) -> Result<Vec<TaskDraw>, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let picks: Vec<usize> = if tasks.len() >= cfg.tasks_per_batch {
        rng.sample_distinct(tasks.len(), cfg.tasks_per_batch)
    } else {
        (0..cfg.tasks_per_batch).map(|_| rng.index(tasks.len())).collect()
    };
    picks
        .into_iter()
        .map(|i| {
            let (context, target) = build_pairs_split(&tasks[i], rng, cfg.context_pairs, cfg.target_pairs)?;
            Ok(TaskDraw { task: i, context, target })
        })
        .collect()
}

fn refresh_from_pairs(net: &mut SurrogateNet, pairs: &[&PairBatch]) -> Result<(), TrainError> {
    let d = pairs[0].dim();
    let mut v = Vec::new();
    for p in pairs {
        v.extend_from_slice(p.starts.data());
        v.extend_from_slice(p.ends.data());
    }
    let n = v.len() / d;
    let x = Matrix::from_vec(n, d, v).map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    net.refresh_norm_stats(&x)?;
    Ok(())
}

/// Result of one task's inner step.
#[derive(Debug, Clone)]
pub struct Adapted {
    pub fast_params: Vec<f64>,
    pub pre_loss: f64,
    pub post_loss: f64,
    /// Gradient of the target loss at the fast weights.
    pub outer_grad: ParamGrad,
}

/// One SGD step on the context batch, then the target loss (and its
/// gradient) at the resulting fast weights. Never mutates `net`.
pub fn adapt_on(net: &SurrogateNet, draw: &TaskDraw, cfg: &MetaConfig) -> Result<Adapted, TrainError> {
    let (pre_loss, g) = match_loss_at(net, &draw.context, cfg.integral_mode, None)?;
    let fast: Vec<f64> = net.params().iter().zip(&g.0).map(|(p, gi)| p - cfg.inner_lr * gi).collect();
    let (post_loss, outer_grad) = match_loss_at(net, &draw.target, cfg.integral_mode, Some(&fast))?;
    Ok(Adapted {
        fast_params: fast,
        pre_loss,
        post_loss,
        outer_grad,
    })
}

/// Draws a context/target split from `task` and adapts to it.
pub fn inner_adapt(
    net: &SurrogateNet,
    task: &SyntheticTask,
    cfg: &MetaConfig,
    rng: &mut RngState,
) -> Result<(Vec<f64>, f64, f64), TrainError> {
    let (context, target) = build_pairs_split(task, rng, cfg.context_pairs, cfg.target_pairs)?;
    let a = adapt_on(net, &TaskDraw { task: task.task_id, context, target }, cfg)?;
    Ok((a.fast_params, a.pre_loss, a.post_loss))
}

/// Meta-learning and pretraining loops with persistent Adam state.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: MetaConfig,
    opt: OptimizerState,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: MetaConfig, n_params: usize) -> Result<Self, TrainError> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            opt: OptimizerState::adam(n_params),
            step: 0,
        })
    }

    /// One first-order meta step on an explicit set of draws. Returns
    /// (mean pre loss, mean post loss, outer loss).
    pub fn meta_step(&mut self, net: &mut SurrogateNet, draws: &[TaskDraw]) -> Result<(f64, f64, f64), TrainError> {
        if draws.is_empty() {
            return Err(TrainError::NoTasks);
        }
        refresh_from_pairs(net, &draws.iter().map(|d| &d.target).collect::<Vec<_>>())?;
        let cfg = &self.cfg;
        let snapshot: &SurrogateNet = net;
        let adapted: Vec<Adapted> = draws
            .par_iter()
            .map(|d| adapt_on(snapshot, d, cfg))
            .collect::<Result<_, _>>()?;
        let k = adapted.len() as f64;
        let mut g = ParamGrad::zeros(net.param_count());
        for a in &adapted {
            g.add_scaled(&a.outer_grad, 1.0 / k);
        }
        let pre = adapted.iter().map(|a| a.pre_loss).sum::<f64>() / k;
        let post = adapted.iter().map(|a| a.post_loss).sum::<f64>() / k;
        self.finish_step(net, &g, post)?;
        Ok((pre, post, post))
    }

    /// One pooled gradient-matching step on the draws' target pairs; the
    /// context batches are ignored.
    pub fn pretrain_step(&mut self, net: &mut SurrogateNet, draws: &[TaskDraw]) -> Result<f64, TrainError> {
        if draws.is_empty() {
            return Err(TrainError::NoTasks);
        }
        let targets: Vec<&PairBatch> = draws.iter().map(|d| &d.target).collect();
        refresh_from_pairs(net, &targets)?;
        let pooled = PairBatch::concat(&draws.iter().map(|d| d.target.clone()).collect::<Vec<_>>())?;
        let (loss, g) = pooled_loss(net, &pooled, &targets, self.cfg.integral_mode)?;
        self.finish_step(net, &g, loss)?;
        Ok(loss)
    }

    fn finish_step(&mut self, net: &mut SurrogateNet, g: &ParamGrad, loss: f64) -> Result<(), TrainError> {
        self.step += 1;
        if !loss.is_finite() || g.0.iter().any(|v| !v.is_finite()) {
            return Err(TrainError::NonFiniteLoss(self.step));
        }
        apply_update(net, g, self.cfg.outer_lr, &mut self.opt)?;
        Ok(())
    }

    pub fn meta_epoch(
        &mut self,
        net: &mut SurrogateNet,
        tasks: &[SyntheticTask],
        rng: &mut RngState,
        epoch: usize,
    ) -> Result<EpochStats, TrainError> {
        self.epoch(net, tasks, rng, epoch, true)
    }

    pub fn pretrain_epoch(
        &mut self,
        net: &mut SurrogateNet,
        tasks: &[SyntheticTask],
        rng: &mut RngState,
        epoch: usize,
    ) -> Result<EpochStats, TrainError> {
        self.epoch(net, tasks, rng, epoch, false)
    }

    fn epoch(
        &mut self,
        net: &mut SurrogateNet,
        tasks: &[SyntheticTask],
        rng: &mut RngState,
        epoch: usize,
        meta: bool,
    ) -> Result<EpochStats, TrainError> {
        if tasks.is_empty() {
            return Err(TrainError::NoTasks);
        }
        let t0 = Instant::now();
        let steps = self.cfg.steps_per_epoch(tasks.len());
        let (mut pre, mut post, mut outer) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let (a, b, c) = if meta {
                let draws = sample_draws(tasks, &self.cfg, rng)?;
                self.meta_step(net, &draws)?
            } else {
                let draws = pretrain_draws(tasks, &self.cfg, rng)?;
                let l = self.pretrain_step(net, &draws)?;
                (l, l, l)
            };
            pre += a;
            post += b;
            outer += c;
        }
        let s = steps as f64;
        Ok(EpochStats {
            epoch,
            mean_pre_loss: pre / s,
            mean_post_loss: post / s,
            outer_loss: outer / s,
            seconds: t0.elapsed().as_secs_f64(),
        })
    }
}

/// Pretraining batches: the same draws as a meta step, except that when all
/// tasks together hold no more pairs than one pooled batch, every pair is
/// used.
fn pretrain_draws(tasks: &[SyntheticTask], cfg: &MetaConfig, rng: &mut RngState) -> Result<Vec<TaskDraw>, TrainError> {
    let total: usize = tasks.iter().map(|t| t.pair_count()).sum();
    if total <= cfg.tasks_per_batch * cfg.target_pairs {
        return tasks
            .iter()
            .enumerate()
            .filter(|(_, t)| t.pair_count() > 0)
            .map(|(i, t)| {
                let all = crate::sim4opt::all_pairs(t)?;
                Ok(TaskDraw {
                    task: i,
                    context: all.clone(),
                    target: all,
                })
            })
            .collect();
    }
    sample_draws(tasks, cfg, rng)
}

/// Loss of the pooled batch, computed per part in parallel and combined with
/// weights proportional to part size.
fn pooled_loss(
    net: &SurrogateNet,
    pooled: &PairBatch,
    parts: &[&PairBatch],
    mode: IntegralMode,
) -> Result<(f64, ParamGrad), TrainError> {
    let n = pooled.len() as f64;
    let res: Vec<(f64, ParamGrad)> = parts
        .par_iter()
        .map(|p| match_loss_at(net, p, mode, None))
        .collect::<Result<_, _>>()?;
    let mut g = ParamGrad::zeros(net.param_count());
    let mut loss = 0.0;
    for ((l, gi), p) in res.iter().zip(parts) {
        let w = p.len() as f64 / n;
        loss += w * l;
        g.add_scaled(gi, w);
    }
    Ok((loss, g))
}

/// Runs `cfg.epochs` meta (or pretrain) epochs. `on_epoch` sees the network
/// after every epoch.
pub fn train_on_tasks(
    net: &mut SurrogateNet,
    tasks: &[SyntheticTask],
    cfg: &MetaConfig,
    meta: bool,
    rng: &mut RngState,
    mut on_epoch: impl FnMut(&EpochStats, &SurrogateNet),
) -> Result<TrainStats, TrainError> {
    if tasks.is_empty() {
        return Err(TrainError::NoTasks);
    }
    let mut trainer = Trainer::new(cfg.clone(), net.param_count())?;
    let mut stats = TrainStats::default();
    for e in 1..=cfg.epochs {
        let s = trainer.epoch(net, tasks, rng, e, meta)?;
        log::debug!("epoch {e}: pre {:.4e} post {:.4e}", s.mean_pre_loss, s.mean_post_loss);
        on_epoch(&s, net);
        stats.epochs.push(s);
    }
    net.set_mode(Mode::Eval);
    Ok(stats)
}

pub fn meta_train(
    net: &mut SurrogateNet,
    tasks: &[SyntheticTask],
    cfg: &MetaConfig,
    rng: &mut RngState,
) -> Result<TrainStats, TrainError> {
    train_on_tasks(net, tasks, cfg, true, rng, |_, _| {})
}

pub fn pretrain(
    net: &mut SurrogateNet,
    tasks: &[SyntheticTask],
    cfg: &MetaConfig,
    rng: &mut RngState,
) -> Result<TrainStats, TrainError> {
    train_on_tasks(net, tasks, cfg, false, rng, |_, _| {})
}

/// Gradient matching on offline pairs with norm statistics frozen. Each
/// epoch is `ceil(n / batch_size)` mini-batches. Returns the loss of every
/// step.
pub fn finetune(
    net: &mut SurrogateNet,
    ds: &OfflineDataset,
    cfg: &FinetuneConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>, TrainError> {
    if ds.len() < 2 {
        return Err(TrainError::TooFewPoints(ds.len()));
    }
    cfg.validate()?;
    let mut opt = cfg.optimizer.state(net.param_count());
    let steps = ds.len().div_ceil(cfg.batch_size).max(1);
    let mut losses = Vec::with_capacity(cfg.epochs * steps);
    for _ in 0..cfg.epochs {
        for _ in 0..steps {
            let pairs = offline_pairs(ds, cfg.batch_size, rng)?;
            let (l, g) = match_loss_at(net, &pairs, cfg.integral_mode, None)?;
            if !l.is_finite() {
                return Err(TrainError::NonFiniteLoss(losses.len() + 1));
            }
            apply_update(net, &g, cfg.lr, &mut opt)?;
            losses.push(l);
        }
    }
    net.set_mode(Mode::Eval);
    Ok(losses)
}

/// Gradient matching on offline pairs from the current initialization, with
/// norm statistics refreshed from each batch.
pub fn train_match(
    net: &mut SurrogateNet,
    ds: &OfflineDataset,
    cfg: &BaselineConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>, TrainError> {
    if ds.len() < 2 {
        return Err(TrainError::TooFewPoints(ds.len()));
    }
    let mut opt = OptimizerState::adam(net.param_count());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let pairs = offline_pairs(ds, cfg.batch_size, rng)?;
        refresh_from_pairs(net, &[&pairs])?;
        let (l, g) = match_loss_at(net, &pairs, cfg.integral_mode, None)?;
        if !l.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        apply_update(net, &g, cfg.lr, &mut opt)?;
        losses.push(l);
    }
    net.set_mode(Mode::Eval);
    Ok(losses)
}

/// Value regression (mean squared error) with Adam. Batches of
/// `batch_size` rows are drawn without replacement; the whole set is used
/// when it is smaller.
pub fn train_mse(
    net: &mut SurrogateNet,
    ds: &OfflineDataset,
    cfg: &BaselineConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>, TrainError> {
    if ds.len() < 2 {
        return Err(TrainError::TooFewPoints(ds.len()));
    }
    net.set_mode(Mode::Train);
    let mut opt = OptimizerState::adam(net.param_count());
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 1..=cfg.steps {
        let batch: Vec<usize> = if ds.len() <= cfg.batch_size {
            (0..ds.len()).collect()
        } else {
            rng.sample_distinct(ds.len(), cfg.batch_size)
        };
        let (l, g) = mse_loss(net, ds, &batch)?;
        if !l.is_finite() {
            return Err(TrainError::NonFiniteLoss(step));
        }
        apply_update(net, &g, cfg.lr, &mut opt)?;
        losses.push(l);
    }
    net.set_mode(Mode::Eval);
    Ok(losses)
}
