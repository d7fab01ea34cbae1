//! Gradient-matching and regression objectives.
//!
//! For a pair `(x, x')` with observed output difference `Δz`, the matching
//! residual is `Δz − Δxᵀ ∫₀¹ ∇g_φ(x + tΔx) dt`. The integral is computed
//! either exactly (it telescopes to `g_φ(x') − g_φ(x)`) or with an `S`-node
//! midpoint rule over input gradients. Both use running norm statistics, so
//! the loss is a deterministic function of φ.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::OfflineDataset;
use crate::numerics::{Matrix, RngState};
use crate::surrogate::{ParamGrad, SurrogateError, SurrogateNet};

#[derive(Debug, Error)]
pub enum MatchError {
    #[error("need at least two offline points to form pairs, got {0}")]
    TooFewPoints(usize),
    #[error("empty batch")]
    EmptyBatch,
    #[error("quadrature needs at least one node")]
    InvalidNodes,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

/// Pairs of designs and their output differences `dz = z(end) − z(start)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub starts: Matrix,
    pub ends: Matrix,
    pub dz: Vec<f64>,
}

impl PairBatch {
    pub fn new(starts: Matrix, ends: Matrix, dz: Vec<f64>) -> Result<Self, MatchError> {
        if starts.rows() != ends.rows() || starts.cols() != ends.cols() || dz.len() != starts.rows() {
            return Err(MatchError::ShapeMismatch(format!(
                "starts {}x{}, ends {}x{}, dz {}",
                starts.rows(),
                starts.cols(),
                ends.rows(),
                ends.cols(),
                dz.len()
            )));
        }
        if dz.iter().any(|v| !v.is_finite()) {
            return Err(MatchError::ShapeMismatch("non-finite dz".into()));
        }
        Ok(Self { starts, ends, dz })
    }

    /// Builds a batch from row slices; `rows` yields `(start, end, dz)`.
    pub fn from_rows<'a>(
        dim: usize,
        rows: impl IntoIterator<Item = (&'a [f64], &'a [f64], f64)>,
    ) -> Result<Self, MatchError> {
        let mut s = Vec::new();
        let mut e = Vec::new();
        let mut dz = Vec::new();
        for (a, b, d) in rows {
            s.extend_from_slice(a);
            e.extend_from_slice(b);
            dz.push(d);
        }
        let n = dz.len();
        let mk = |v| Matrix::from_vec(n, dim, v).map_err(|e| MatchError::ShapeMismatch(e.to_string()));
        Self::new(mk(s)?, mk(e)?, dz)
    }

    pub fn len(&self) -> usize {
        self.dz.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dz.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.starts.cols()
    }

    /// Concatenates batches of equal dimension.
    pub fn concat(parts: &[PairBatch]) -> Result<Self, MatchError> {
        let dim = parts.first().ok_or(MatchError::EmptyBatch)?.dim();
        let rows = parts.iter().flat_map(|p| {
            (0..p.len()).map(move |i| (p.starts.row(i), p.ends.row(i), p.dz[i]))
        });
        Self::from_rows(dim, rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegralKind {
    Exact,
    Quadrature,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IntegralMode {
    pub kind: IntegralKind,
    pub nodes: usize,
}

impl Default for IntegralMode {
    fn default() -> Self {
        Self {
            kind: IntegralKind::Quadrature,
            nodes: 4,
        }
    }
}

impl IntegralMode {
    pub fn exact() -> Self {
        Self {
            kind: IntegralKind::Exact,
            nodes: 1,
        }
    }

    pub fn quadrature(nodes: usize) -> Self {
        Self {
            kind: IntegralKind::Quadrature,
            nodes,
        }
    }

    pub fn validate(&self) -> Result<(), MatchError> {
        if self.kind == IntegralKind::Quadrature && self.nodes == 0 {
            return Err(MatchError::InvalidNodes);
        }
        Ok(())
    }
}

/// `b` uniformly random ordered pairs of distinct rows.
pub fn offline_pairs(ds: &OfflineDataset, b: usize, rng: &mut RngState) -> Result<PairBatch, MatchError> {
    let n = ds.len();
    if n < 2 {
        return Err(MatchError::TooFewPoints(n));
    }
    let idx: Vec<(usize, usize)> = (0..b)
        .map(|_| {
            let i = rng.index(n);
            let mut j = rng.index(n - 1);
            if j >= i {
                j += 1;
            }
            (i, j)
        })
        .collect();
    PairBatch::from_rows(
        ds.dim(),
        idx.iter().map(|&(i, j)| (ds.x.row(i), ds.x.row(j), ds.z[j] - ds.z[i])),
    )
}

fn quadrature_points(pairs: &PairBatch, nodes: usize) -> (Matrix, Matrix) {
    let (b, d) = (pairs.len(), pairs.dim());
    let mut pts = Vec::with_capacity(b * nodes * d);
    let mut dirs = Vec::with_capacity(b * nodes * d);
    for p in 0..b {
        let (s, e) = (pairs.starts.row(p), pairs.ends.row(p));
        for k in 0..nodes {
            let t = (k as f64 + 0.5) / nodes as f64;
            for j in 0..d {
                let dx = e[j] - s[j];
                pts.push(s[j] + t * dx);
                dirs.push(dx);
            }
        }
    }
    (
        Matrix::from_vec(b * nodes, d, pts).expect("finite inputs"),
        Matrix::from_vec(b * nodes, d, dirs).expect("finite inputs"),
    )
}

fn stacked_ends_starts(pairs: &PairBatch) -> Matrix {
    let mut v = pairs.ends.data().to_vec();
    v.extend_from_slice(pairs.starts.data());
    Matrix::from_vec(2 * pairs.len(), pairs.dim(), v).expect("finite inputs")
}

/// `Δxᵀ ∫₀¹ ∇g_φ(x + tΔx) dt` for every pair in the batch.
pub fn path_integrals(
    net: &SurrogateNet,
    pairs: &PairBatch,
    mode: IntegralMode,
    params_override: Option<&[f64]>,
) -> Result<Vec<f64>, MatchError> {
    mode.validate()?;
    if pairs.is_empty() {
        return Err(MatchError::EmptyBatch);
    }
    let b = pairs.len();
    match mode.kind {
        IntegralKind::Exact => {
            let pred = net.predict(&stacked_ends_starts(pairs), params_override)?;
            Ok((0..b).map(|p| pred[p] - pred[b + p]).collect())
        }
        IntegralKind::Quadrature => {
            let (pts, dirs) = quadrature_points(pairs, mode.nodes);
            let (d, _) = net.directional(&pts, &dirs, params_override)?;
            Ok(d.chunks_exact(mode.nodes)
                .map(|c| c.iter().sum::<f64>() / mode.nodes as f64)
                .collect())
        }
    }
}

/// Single-segment version of [`path_integrals`].
pub fn path_integral(net: &SurrogateNet, x: &[f64], x2: &[f64], mode: IntegralMode) -> Result<f64, MatchError> {
    let pairs = PairBatch::from_rows(x.len(), [(x, x2, 0.0)])?;
    Ok(path_integrals(net, &pairs, mode, None)?[0])
}

/// Mean squared matching residual over the batch and its gradient.
pub fn match_loss(net: &SurrogateNet, pairs: &PairBatch, mode: IntegralMode) -> Result<(f64, ParamGrad), MatchError> {
    match_loss_at(net, pairs, mode, None)
}

/// [`match_loss`] evaluated at externally supplied parameters.
pub fn match_loss_at(
    net: &SurrogateNet,
    pairs: &PairBatch,
    mode: IntegralMode,
    params_override: Option<&[f64]>,
) -> Result<(f64, ParamGrad), MatchError> {
    mode.validate()?;
    if pairs.is_empty() {
        return Err(MatchError::EmptyBatch);
    }
    let b = pairs.len();
    let inv_b = 1.0 / b as f64;
    match mode.kind {
        IntegralKind::Exact => {
            let (pred, cache) = net.forward_frozen(&stacked_ends_starts(pairs), params_override)?;
            let resid: Vec<f64> = (0..b).map(|p| pairs.dz[p] - (pred[p] - pred[b + p])).collect();
            let loss = resid.iter().map(|r| r * r).sum::<f64>() * inv_b;
            let mut up = vec![0.0; 2 * b];
            for (p, r) in resid.iter().enumerate() {
                up[p] = -2.0 * r * inv_b;
                up[b + p] = 2.0 * r * inv_b;
            }
            Ok((loss, net.backward_params(&cache, &up)?))
        }
        IntegralKind::Quadrature => {
            let s = mode.nodes;
            let (pts, dirs) = quadrature_points(pairs, s);
            let (d, cache) = net.directional(&pts, &dirs, params_override)?;
            let resid: Vec<f64> = d
                .chunks_exact(s)
                .zip(&pairs.dz)
                .map(|(c, dz)| dz - c.iter().sum::<f64>() / s as f64)
                .collect();
            let loss = resid.iter().map(|r| r * r).sum::<f64>() * inv_b;
            let up: Vec<f64> = resid
                .iter()
                .flat_map(|r| std::iter::repeat_n(-2.0 * r * inv_b / s as f64, s))
                .collect();
            Ok((loss, cache.backward(&up)?))
        }
    }
}

/// Mean squared prediction error on the selected rows. Uses the network's
/// current mode, so in train mode the norm layers see batch statistics and
/// running statistics are updated.
pub fn mse_loss(net: &mut SurrogateNet, ds: &OfflineDataset, batch: &[usize]) -> Result<(f64, ParamGrad), MatchError> {
    if batch.is_empty() {
        return Err(MatchError::EmptyBatch);
    }
    let sub = ds.subset(batch);
    let (pred, cache) = net.forward(&sub.x, None)?;
    let inv = 1.0 / batch.len() as f64;
    let resid: Vec<f64> = pred.iter().zip(&sub.z).map(|(p, z)| p - z).collect();
    let loss = resid.iter().map(|r| r * r).sum::<f64>() * inv;
    let up: Vec<f64> = resid.iter().map(|r| 2.0 * r * inv).collect();
    Ok((loss, net.backward_params(&cache, &up)?))
}
