//! Candidate selection and fixed-step gradient ascent on a trained surrogate.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{OfflineDataset, Scaler};
use crate::numerics::{Matrix, RngState};
use crate::surrogate::{Mode, SurrogateError, SurrogateNet};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("invalid search settings: {0}")]
    InvalidConfig(String),
    #[error("bounds cover {got} dimensions, designs have {expected}")]
    BoundsMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub steps: usize,
    pub gamma: f64,
    pub top_k: usize,
    pub n_candidates: usize,
    /// Clamp designs to the benchmark domain (mapped to standardized units
    /// and widened by `bound_expand` of its width on each side).
    pub bounded: bool,
    pub bound_expand: f64,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            gamma: 0.001,
            top_k: 256,
            n_candidates: 128,
            bounded: true,
            bound_expand: 0.1,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(SearchError::InvalidConfig("gamma must be positive".into()));
        }
        if self.n_candidates == 0 {
            return Err(SearchError::InvalidConfig("n_candidates must be >= 1".into()));
        }
        if !(self.bound_expand >= 0.0) {
            return Err(SearchError::InvalidConfig("bound_expand must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSet {
    /// Designs in standardized units, one per row.
    pub designs: Matrix,
    /// Row of the offline pool each candidate started from.
    pub provenance: Vec<usize>,
    /// Ascent steps applied before the candidate finished or froze.
    pub steps_taken: Vec<usize>,
    /// Set when a step produced a non-finite design and the candidate froze.
    pub flagged: Vec<bool>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn from_designs(designs: Matrix, provenance: Vec<usize>) -> Self {
        let n = designs.rows();
        Self {
            designs,
            provenance,
            steps_taken: vec![0; n],
            flagged: vec![false; n],
        }
    }
}

/// Ranks the pool by surrogate prediction (ties by index), keeps the best
/// `top_k`, and samples `n_out` of them without replacement. A pool no
/// larger than `n_out` is returned whole, in pool order.
pub fn init_candidates(
    net: &SurrogateNet,
    pool: &OfflineDataset,
    top_k: usize,
    n_out: usize,
    rng: &mut RngState,
) -> Result<CandidateSet, SearchError> {
    if pool.is_empty() {
        return Err(SearchError::EmptyPool);
    }
    if n_out == 0 {
        return Err(SearchError::InvalidConfig("n_out must be >= 1".into()));
    }
    let n = pool.len();
    if n <= n_out {
        return Ok(CandidateSet::from_designs(pool.x.clone(), (0..n).collect()));
    }
    let pred = net.predict(&pool.x, None)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| pred[b].total_cmp(&pred[a]));
    let k = top_k.max(n_out).min(n);
    let top = &order[..k];
    let picks: Vec<usize> = rng.sample_distinct(k, n_out).into_iter().map(|i| top[i]).collect();
    Ok(CandidateSet::from_designs(pool.subset(&picks).x, picks))
}

/// `x_t = x_{t−1} + γ∇_x g_φ(x_{t−1})` for every candidate independently,
/// optionally clamped to `bounds` after each step.
pub fn gradient_search(
    net: &SurrogateNet,
    c: &CandidateSet,
    gamma: f64,
    steps: usize,
    bounds: Option<&[(f64, f64)]>,
) -> Result<CandidateSet, SearchError> {
    if net.mode() != Mode::Eval {
        return Err(SurrogateError::TrainModeInputGrad.into());
    }
    if !(gamma > 0.0) {
        return Err(SearchError::InvalidConfig("gamma must be positive".into()));
    }
    let d = c.designs.cols();
    if let Some(b) = bounds {
        if b.len() != d {
            return Err(SearchError::BoundsMismatch { expected: d, got: b.len() });
        }
    }
    let mut out = c.clone();
    let mut active: Vec<usize> = (0..c.len()).filter(|&i| !c.flagged[i]).collect();
    for _ in 0..steps {
        if active.is_empty() {
            break;
        }
        let xs = Matrix::from_rows(&active.iter().map(|&i| out.designs.row(i)).collect::<Vec<_>>())
            .expect("designs are finite");
        let grads = net.input_grad_batch(&xs, None)?;
        let mut still = Vec::with_capacity(active.len());
        for (k, &i) in active.iter().enumerate() {
            let next: Vec<f64> = xs
                .row(k)
                .iter()
                .zip(grads.row(k))
                .enumerate()
                .map(|(j, (x, g))| {
                    let v = x + gamma * g;
                    match bounds {
                        Some(b) if v.is_finite() => v.clamp(b[j].0, b[j].1),
                        _ => v,
                    }
                })
                .collect();
            if next.iter().all(|v| v.is_finite()) {
                out.designs.row_mut(i).copy_from_slice(&next);
                out.steps_taken[i] += 1;
                still.push(i);
            } else {
                log::warn!("candidate {i} diverged after {} steps; frozen", out.steps_taken[i]);
                out.flagged[i] = true;
            }
        }
        active = still;
    }
    Ok(out)
}

/// Domain box in standardized units, widened by `expand` of its width on
/// each side.
pub fn standardized_bounds(domain: &[(f64, f64)], scaler: &Scaler, expand: f64) -> Vec<(f64, f64)> {
    let lo = scaler.transform_x(&domain.iter().map(|b| b.0).collect::<Vec<_>>());
    let hi = scaler.transform_x(&domain.iter().map(|b| b.1).collect::<Vec<_>>());
    lo.iter()
        .zip(&hi)
        .map(|(&a, &b)| {
            let w = b - a;
            (a - expand * w, b + expand * w)
        })
        .collect()
}

pub const DESIGNS_EXTRA_COLUMNS: [&str; 3] = ["provenance", "steps_taken", "flagged"];

/// Writes designs in raw units with the surrogate's predicted output (also
/// raw units) in the `y` column.
pub fn write_designs<W: Write>(
    c: &CandidateSet,
    net: &SurrogateNet,
    scaler: &Scaler,
    w: &mut W,
) -> Result<(), Box<dyn std::error::Error + Send + Sync>> {
    let pred = net.predict(&c.designs, None)?;
    let d = c.designs.cols();
    let mut wr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = (0..d).map(|j| format!("x{j}")).collect();
    header.push("y".into());
    header.extend(DESIGNS_EXTRA_COLUMNS.iter().map(|s| s.to_string()));
    wr.write_record(&header)?;
    for i in 0..c.len() {
        let mut rec: Vec<String> = scaler.inverse_x(c.designs.row(i)).iter().map(|v| v.to_string()).collect();
        rec.push(scaler.inverse_z(pred[i]).to_string());
        rec.push(c.provenance[i].to_string());
        rec.push(c.steps_taken[i].to_string());
        rec.push(c.flagged[i].to_string());
        wr.write_record(&rec)?;
    }
    wr.flush()?;
    Ok(())
}
