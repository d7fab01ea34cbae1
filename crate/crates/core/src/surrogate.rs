//! Feed-forward surrogate `g_φ`: `[Linear → Norm → LeakyReLU]* → Linear`.
//!
//! All parameters live in one flat vector so that meta-learning can evaluate
//! the network at externally supplied fast weights. Norm layers use batch
//! statistics in train mode and frozen running statistics in eval mode;
//! input gradients are only defined in eval mode, where each norm layer is
//! a fixed affine map.
//!
//! Besides the usual forward/backward pair, [`SurrogateNet::directional`]
//! propagates a tangent `v` alongside the input to get `vᵀ∇_x g_φ(x)`, and
//! [`DirectionalCache::backward`] differentiates that quantity with respect
//! to φ. The gradient-matching loss in quadrature form is built on it.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{gemm, Matrix, RngState};

const NORM_EPS: f64 = 1e-5;
const RUNNING_MOMENTUM: f64 = 0.9;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"OBSN";
const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum SurrogateError {
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("activation cache is stale (network changed since the forward pass)")]
    StaleCache,
    #[error("input gradients require eval mode")]
    TrainModeInputGrad,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    BatchStat,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub leaky_slope: f64,
    pub norm: NormKind,
}

impl Architecture {
    pub fn new(input_dim: usize, hidden: Vec<usize>) -> Self {
        Self {
            input_dim,
            hidden,
            leaky_slope: 0.01,
            norm: NormKind::BatchStat,
        }
    }

    pub fn validate(&self) -> Result<(), SurrogateError> {
        if self.input_dim == 0 {
            return Err(SurrogateError::InvalidArchitecture("input_dim must be >= 1".into()));
        }
        if self.hidden.is_empty() {
            return Err(SurrogateError::InvalidArchitecture(
                "at least one hidden layer is required".into(),
            ));
        }
        if self.hidden.contains(&0) {
            return Err(SurrogateError::InvalidArchitecture(
                "hidden widths must be >= 1".into(),
            ));
        }
        // slope 1 is allowed: it makes the network linear, which tests rely on
        if !(self.leaky_slope > 0.0 && self.leaky_slope <= 1.0) {
            return Err(SurrogateError::InvalidArchitecture(format!(
                "leaky slope {} outside (0, 1]",
                self.leaky_slope
            )));
        }
        Ok(())
    }

    /// Total number of entries in the flat parameter vector.
    pub fn param_count(&self) -> usize {
        Layout::new(self).total
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct LayerSlots {
    in_dim: usize,
    out_dim: usize,
    w: usize,
    b: usize,
    gamma: Option<usize>,
    beta: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    layers: Vec<LayerSlots>,
    head_w: usize,
    head_b: usize,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture) -> Self {
        let mut off = 0;
        let mut in_dim = arch.input_dim;
        let mut layers = Vec::with_capacity(arch.hidden.len());
        for &out_dim in &arch.hidden {
            let w = off;
            off += in_dim * out_dim;
            let b = off;
            off += out_dim;
            let (gamma, beta) = match arch.norm {
                NormKind::BatchStat => {
                    let g = off;
                    off += out_dim;
                    let bt = off;
                    off += out_dim;
                    (Some(g), Some(bt))
                }
                NormKind::None => (None, None),
            };
            layers.push(LayerSlots {
                in_dim,
                out_dim,
                w,
                b,
                gamma,
                beta,
            });
            in_dim = out_dim;
        }
        let head_w = off;
        off += in_dim;
        let head_b = off;
        off += 1;
        Self {
            layers,
            head_w,
            head_b,
            total: off,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Gradient with respect to the flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad(pub Vec<f64>);

impl ParamGrad {
    pub fn zeros(n: usize) -> Self {
        ParamGrad(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn add_scaled(&mut self, other: &ParamGrad, s: f64) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().for_each(|v| *v *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

#[derive(Debug, Clone)]
pub struct SurrogateNet {
    arch: Architecture,
    layout: Layout,
    params: Vec<f64>,
    stats: Vec<NormStats>,
    mode: Mode,
    version: u64,
}

#[derive(Debug, Clone)]
struct LayerCache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    normed: Vec<f64>,
    act: Vec<f64>,
}

/// Activations recorded by [`SurrogateNet::forward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    batch: usize,
    input: Vec<f64>,
    layers: Vec<LayerCache>,
    batch_stats: bool,
    version: u64,
    params_override: Option<Vec<f64>>,
}

pub fn init_net(arch: &Architecture, rng: &mut RngState) -> Result<SurrogateNet, SurrogateError> {
    arch.validate()?;
    let layout = Layout::new(arch);
    let mut params = vec![0.0; layout.total];
    for l in &layout.layers {
        let bound = 1.0 / (l.in_dim as f64).sqrt();
        for p in &mut params[l.w..l.w + l.in_dim * l.out_dim] {
            *p = rng.uniform(-bound, bound).expect("bound is positive");
        }
        if let Some(g) = l.gamma {
            params[g..g + l.out_dim].iter_mut().for_each(|p| *p = 1.0);
        }
    }
    let last = *arch.hidden.last().expect("validated nonempty");
    let bound = 1.0 / (last as f64).sqrt();
    for p in &mut params[layout.head_w..layout.head_w + last] {
        *p = rng.uniform(-bound, bound).expect("bound is positive");
    }
    Ok(SurrogateNet::from_parts(arch.clone(), params, None)?)
}

#[inline]
fn leaky(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        slope * v
    }
}

#[inline]
fn leaky_deriv(v: f64, slope: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        slope
    }
}

impl SurrogateNet {
    /// Assembles a network from explicit parameters. Norm statistics default
    /// to zero mean and unit variance.
    pub fn from_parts(
        arch: Architecture,
        params: Vec<f64>,
        stats: Option<Vec<NormStats>>,
    ) -> Result<Self, SurrogateError> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(SurrogateError::ShapeMismatch(format!(
                "architecture needs {} parameters, got {}",
                layout.total,
                params.len()
            )));
        }
        let stats = match stats {
            Some(s) => {
                let ok = arch.norm == NormKind::BatchStat
                    && s.len() == arch.hidden.len()
                    && s.iter().zip(&arch.hidden).all(|(st, &w)| {
                        st.mean.len() == w && st.var.len() == w && st.var.iter().all(|v| *v > 0.0)
                    })
                    || arch.norm == NormKind::None && s.is_empty();
                if !ok {
                    return Err(SurrogateError::ShapeMismatch("norm statistics".into()));
                }
                s
            }
            None => match arch.norm {
                NormKind::BatchStat => arch
                    .hidden
                    .iter()
                    .map(|&w| NormStats {
                        mean: vec![0.0; w],
                        var: vec![1.0; w],
                    })
                    .collect(),
                NormKind::None => Vec::new(),
            },
        };
        Ok(Self {
            arch,
            layout,
            params,
            stats,
            mode: Mode::Train,
            version: 0,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn stats(&self) -> &[NormStats] {
        &self.stats
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn param_count(&self) -> usize {
        self.layout.total
    }

    /// Replaces all parameters.
    pub fn set_params(&mut self, params: Vec<f64>) -> Result<(), SurrogateError> {
        if params.len() != self.layout.total {
            return Err(SurrogateError::ShapeMismatch(format!(
                "expected {} parameters, got {}",
                self.layout.total,
                params.len()
            )));
        }
        self.params = params;
        self.version += 1;
        Ok(())
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.version += 1;
        &mut self.params
    }

    fn check_input(&self, x: &Matrix) -> Result<(), SurrogateError> {
        if x.rows() == 0 {
            return Err(SurrogateError::EmptyBatch);
        }
        if x.cols() != self.arch.input_dim {
            return Err(SurrogateError::DimensionMismatch {
                expected: self.arch.input_dim,
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn check_override(&self, p: Option<&[f64]>) -> Result<(), SurrogateError> {
        if let Some(p) = p {
            if p.len() != self.layout.total {
                return Err(SurrogateError::DimensionMismatch {
                    expected: self.layout.total,
                    got: p.len(),
                });
            }
        }
        Ok(())
    }

    /// Batch forward pass. In train mode the norm layers use batch statistics
    /// and the running statistics are updated; in eval mode nothing is
    /// mutated.
    pub fn forward(
        &mut self,
        x: &Matrix,
        params_override: Option<&[f64]>,
    ) -> Result<(Vec<f64>, ForwardCache), SurrogateError> {
        self.check_input(x)?;
        self.check_override(params_override)?;
        let batch_stats = self.mode == Mode::Train && self.arch.norm == NormKind::BatchStat;
        let params = params_override.unwrap_or(&self.params);
        let (pred, cache, batch_moments) = self.forward_impl(params, x, batch_stats);
        let mut cache = cache;
        cache.params_override = params_override.map(<[f64]>::to_vec);
        if batch_stats {
            for (st, (m, v)) in self.stats.iter_mut().zip(batch_moments) {
                for (rm, bm) in st.mean.iter_mut().zip(&m) {
                    *rm = RUNNING_MOMENTUM * *rm + (1.0 - RUNNING_MOMENTUM) * bm;
                }
                for (rv, bv) in st.var.iter_mut().zip(&v) {
                    *rv = RUNNING_MOMENTUM * *rv + (1.0 - RUNNING_MOMENTUM) * bv;
                }
            }
            self.version += 1;
        }
        cache.version = self.version;
        Ok((pred, cache))
    }

    /// Eval-semantics predictions (running statistics), regardless of mode.
    pub fn predict(&self, x: &Matrix, params_override: Option<&[f64]>) -> Result<Vec<f64>, SurrogateError> {
        self.check_input(x)?;
        self.check_override(params_override)?;
        let params = params_override.unwrap_or(&self.params);
        Ok(self.forward_impl(params, x, false).0)
    }

    /// Eval-semantics forward pass that keeps its cache for
    /// [`SurrogateNet::backward_params`]. Never mutates the network.
    pub fn forward_frozen(
        &self,
        x: &Matrix,
        params_override: Option<&[f64]>,
    ) -> Result<(Vec<f64>, ForwardCache), SurrogateError> {
        self.check_input(x)?;
        self.check_override(params_override)?;
        let params = params_override.unwrap_or(&self.params);
        let (pred, mut cache, _) = self.forward_impl(params, x, false);
        cache.params_override = params_override.map(<[f64]>::to_vec);
        Ok((pred, cache))
    }

    /// Updates running norm statistics from a batch without touching φ.
    pub fn refresh_norm_stats(&mut self, x: &Matrix) -> Result<(), SurrogateError> {
        if self.arch.norm == NormKind::None {
            return Ok(());
        }
        let mode = self.mode;
        self.mode = Mode::Train;
        let r = self.forward(x, None).map(|_| ());
        self.mode = mode;
        r
    }

    #[allow(clippy::type_complexity)]
    fn forward_impl(
        &self,
        params: &[f64],
        x: &Matrix,
        batch_stats: bool,
    ) -> (Vec<f64>, ForwardCache, Vec<(Vec<f64>, Vec<f64>)>) {
        let bsz = x.rows();
        let slope = self.arch.leaky_slope;
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        let mut moments = Vec::new();
        let mut h: &[f64] = x.data();
        for (li, l) in self.layout.layers.iter().enumerate() {
            let (din, dout) = (l.in_dim, l.out_dim);
            let mut pre = vec![0.0; bsz * dout];
            let bias = &params[l.b..l.b + dout];
            for row in pre.chunks_exact_mut(dout) {
                row.copy_from_slice(bias);
            }
            gemm(bsz, din, dout, 1.0, h, false, &params[l.w..l.w + din * dout], true, 1.0, &mut pre);
            let (xhat, inv_std, normed) = match (l.gamma, l.beta) {
                (Some(g), Some(bt)) => {
                    let gamma = &params[g..g + dout];
                    let beta = &params[bt..bt + dout];
                    let (mu, var) = if batch_stats {
                        let (m, v) = column_moments(&pre, bsz, dout);
                        moments.push((m.clone(), v.clone()));
                        (m, v)
                    } else {
                        (self.stats[li].mean.clone(), self.stats[li].var.clone())
                    };
                    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                    let mut xhat = vec![0.0; bsz * dout];
                    let mut normed = vec![0.0; bsz * dout];
                    for ((pr, xr), nr) in pre
                        .chunks_exact(dout)
                        .zip(xhat.chunks_exact_mut(dout))
                        .zip(normed.chunks_exact_mut(dout))
                    {
                        for j in 0..dout {
                            let xh = (pr[j] - mu[j]) * inv_std[j];
                            xr[j] = xh;
                            nr[j] = gamma[j] * xh + beta[j];
                        }
                    }
                    (xhat, inv_std, normed)
                }
                _ => (Vec::new(), Vec::new(), pre),
            };
            let act: Vec<f64> = normed.iter().map(|&v| leaky(v, slope)).collect();
            layers.push(LayerCache {
                xhat,
                inv_std,
                normed,
                act,
            });
            h = &layers.last().expect("just pushed").act;
        }
        let last = self.layout.layers.last().expect("nonempty").out_dim;
        let hw = &params[self.layout.head_w..self.layout.head_w + last];
        let hb = params[self.layout.head_b];
        let pred: Vec<f64> = h
            .chunks_exact(last)
            .map(|row| hb + row.iter().zip(hw).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        let cache = ForwardCache {
            batch: bsz,
            input: x.data().to_vec(),
            layers,
            batch_stats,
            version: self.version,
            params_override: None,
        };
        (pred, cache, moments)
    }

    /// Reverse-mode gradient of `Σ_b dl_dpred[b]·g_φ(x_b)` with respect to φ.
    pub fn backward_params(&self, cache: &ForwardCache, dl_dpred: &[f64]) -> Result<ParamGrad, SurrogateError> {
        Ok(self.backward_impl(cache, dl_dpred, false)?.0)
    }

    /// Parameter gradient plus the gradient with respect to each input row.
    pub fn backward_full(
        &self,
        cache: &ForwardCache,
        dl_dpred: &[f64],
    ) -> Result<(ParamGrad, Matrix), SurrogateError> {
        let (g, dx) = self.backward_impl(cache, dl_dpred, true)?;
        Ok((g, dx.expect("requested")))
    }

    fn backward_impl(
        &self,
        cache: &ForwardCache,
        dl_dpred: &[f64],
        want_input: bool,
    ) -> Result<(ParamGrad, Option<Matrix>), SurrogateError> {
        if cache.params_override.is_none() && cache.version != self.version {
            return Err(SurrogateError::StaleCache);
        }
        if dl_dpred.len() != cache.batch {
            return Err(SurrogateError::ShapeMismatch(format!(
                "{} upstream values for a batch of {}",
                dl_dpred.len(),
                cache.batch
            )));
        }
        let params: &[f64] = cache.params_override.as_deref().unwrap_or(&self.params);
        let bsz = cache.batch;
        let slope = self.arch.leaky_slope;
        let mut grad = vec![0.0; self.layout.total];
        let nl = self.layout.layers.len();
        let last = self.layout.layers[nl - 1].out_dim;
        let hw = &params[self.layout.head_w..self.layout.head_w + last];

        let top = &cache.layers[nl - 1].act;
        {
            let gw = &mut grad[self.layout.head_w..self.layout.head_w + last];
            for (row, &u) in top.chunks_exact(last).zip(dl_dpred) {
                for (g, a) in gw.iter_mut().zip(row) {
                    *g += u * a;
                }
            }
        }
        grad[self.layout.head_b] = dl_dpred.iter().sum();
        let mut dh = vec![0.0; bsz * last];
        for (row, &u) in dh.chunks_exact_mut(last).zip(dl_dpred) {
            for (d, w) in row.iter_mut().zip(hw) {
                *d = u * w;
            }
        }

        let mut dinput = None;
        for li in (0..nl).rev() {
            let l = self.layout.layers[li];
            let lc = &cache.layers[li];
            let (din, dout) = (l.in_dim, l.out_dim);
            let mut dn: Vec<f64> = dh
                .iter()
                .zip(&lc.normed)
                .map(|(d, &n)| d * leaky_deriv(n, slope))
                .collect();
            let da = match (l.gamma, l.beta) {
                (Some(g), Some(bt)) => {
                    let gamma = &params[g..g + dout];
                    {
                        let (gg, rest) = grad.split_at_mut(bt);
                        let gg = &mut gg[g..g + dout];
                        let gb = &mut rest[..dout];
                        for (dr, xr) in dn.chunks_exact(dout).zip(lc.xhat.chunks_exact(dout)) {
                            for j in 0..dout {
                                gg[j] += dr[j] * xr[j];
                                gb[j] += dr[j];
                            }
                        }
                    }
                    if cache.batch_stats {
                        // dxhat = dn ⊙ γ, then the usual batch-norm backward
                        for row in dn.chunks_exact_mut(dout) {
                            for j in 0..dout {
                                row[j] *= gamma[j];
                            }
                        }
                        let mut s1 = vec![0.0; dout];
                        let mut s2 = vec![0.0; dout];
                        for (dr, xr) in dn.chunks_exact(dout).zip(lc.xhat.chunks_exact(dout)) {
                            for j in 0..dout {
                                s1[j] += dr[j];
                                s2[j] += dr[j] * xr[j];
                            }
                        }
                        let inv_b = 1.0 / bsz as f64;
                        let mut da = vec![0.0; bsz * dout];
                        for ((out, dr), xr) in da
                            .chunks_exact_mut(dout)
                            .zip(dn.chunks_exact(dout))
                            .zip(lc.xhat.chunks_exact(dout))
                        {
                            for j in 0..dout {
                                out[j] = lc.inv_std[j] * (dr[j] - inv_b * s1[j] - inv_b * xr[j] * s2[j]);
                            }
                        }
                        da
                    } else {
                        for row in dn.chunks_exact_mut(dout) {
                            for j in 0..dout {
                                row[j] *= gamma[j] * lc.inv_std[j];
                            }
                        }
                        dn
                    }
                }
                _ => dn,
            };
            let hprev: &[f64] = if li == 0 { &cache.input } else { &cache.layers[li - 1].act };
            gemm(dout, bsz, din, 1.0, &da, true, hprev, false, 1.0, &mut grad[l.w..l.w + dout * din]);
            {
                let gb = &mut grad[l.b..l.b + dout];
                for row in da.chunks_exact(dout) {
                    for (g, v) in gb.iter_mut().zip(row) {
                        *g += v;
                    }
                }
            }
            if li > 0 || want_input {
                let mut dprev = vec![0.0; bsz * din];
                gemm(bsz, dout, din, 1.0, &da, false, &params[l.w..l.w + dout * din], false, 0.0, &mut dprev);
                if li == 0 {
                    dinput = Some(Matrix::from_vec(bsz, din, dprev).map_err(|e| {
                        SurrogateError::ShapeMismatch(e.to_string())
                    })?);
                    break;
                }
                dh = dprev;
            }
        }
        Ok((ParamGrad(grad), dinput))
    }

    /// `∇_x g_φ(x)` using running norm statistics. Requires eval mode.
    pub fn input_grad(&self, x: &[f64], params_override: Option<&[f64]>) -> Result<Vec<f64>, SurrogateError> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())
            .map_err(|e| SurrogateError::ShapeMismatch(e.to_string()))?;
        Ok(self.input_grad_batch(&m, params_override)?.into_data())
    }

    /// Row-wise input gradients for a batch of designs. Requires eval mode.
    pub fn input_grad_batch(&self, x: &Matrix, params_override: Option<&[f64]>) -> Result<Matrix, SurrogateError> {
        if self.mode != Mode::Eval {
            return Err(SurrogateError::TrainModeInputGrad);
        }
        self.check_input(x)?;
        self.check_override(params_override)?;
        let params = params_override.unwrap_or(&self.params);
        let (_, mut cache, _) = self.forward_impl(params, x, false);
        cache.params_override = params_override.map(<[f64]>::to_vec);
        let ones = vec![1.0; x.rows()];
        Ok(self.backward_impl(&cache, &ones, true)?.1.expect("requested"))
    }

    /// Directional derivatives `D_b = dirs_bᵀ ∇_x g_φ(points_b)` under eval
    /// semantics, with a cache for differentiating them with respect to φ.
    pub fn directional(
        &self,
        points: &Matrix,
        dirs: &Matrix,
        params_override: Option<&[f64]>,
    ) -> Result<(Vec<f64>, DirectionalCache), SurrogateError> {
        self.check_input(points)?;
        self.check_override(params_override)?;
        if dirs.rows() != points.rows() || dirs.cols() != points.cols() {
            return Err(SurrogateError::ShapeMismatch("points and directions differ in shape".into()));
        }
        let params = params_override.unwrap_or(&self.params);
        let bsz = points.rows();
        let slope = self.arch.leaky_slope;
        let mut layers = Vec::with_capacity(self.layout.layers.len());
        let mut h = points.data().to_vec();
        let mut t = dirs.data().to_vec();
        for (li, l) in self.layout.layers.iter().enumerate() {
            let (din, dout) = (l.in_dim, l.out_dim);
            let w = &params[l.w..l.w + din * dout];
            let mut pre = vec![0.0; bsz * dout];
            for row in pre.chunks_exact_mut(dout) {
                row.copy_from_slice(&params[l.b..l.b + dout]);
            }
            gemm(bsz, din, dout, 1.0, &h, false, w, true, 1.0, &mut pre);
            let mut tpre = vec![0.0; bsz * dout];
            gemm(bsz, din, dout, 1.0, &t, false, w, true, 0.0, &mut tpre);
            let (scale, inv_std) = match (l.gamma, l.beta) {
                (Some(g), Some(bt)) => {
                    let st = &self.stats[li];
                    let inv_std: Vec<f64> = st.var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
                    let scale: Vec<f64> = (0..dout).map(|j| params[g + j] * inv_std[j]).collect();
                    for row in pre.chunks_exact_mut(dout) {
                        for j in 0..dout {
                            row[j] = (row[j] - st.mean[j]) * scale[j] + params[bt + j];
                        }
                    }
                    (scale, inv_std)
                }
                _ => (vec![1.0; dout], Vec::new()),
            };
            let mut mask = vec![0.0; bsz * dout];
            let mut tout = vec![0.0; bsz * dout];
            for (((m, to), &n), (j, &ta)) in mask
                .iter_mut()
                .zip(tout.iter_mut())
                .zip(&pre)
                .zip(tpre.iter().enumerate().map(|(i, v)| (i % dout, v)))
            {
                *m = leaky_deriv(n, slope);
                *to = *m * scale[j] * ta;
            }
            let act: Vec<f64> = pre.iter().map(|&v| leaky(v, slope)).collect();
            layers.push(DirLayer {
                t_in: std::mem::replace(&mut t, tout),
                t_pre: tpre,
                mask,
                scale,
                inv_std,
            });
            h = act;
        }
        let last = self.layout.layers.last().expect("nonempty").out_dim;
        let hw = &params[self.layout.head_w..self.layout.head_w + last];
        let values: Vec<f64> = t
            .chunks_exact(last)
            .map(|row| row.iter().zip(hw).map(|(a, b)| a * b).sum())
            .collect();
        Ok((
            values,
            DirectionalCache {
                batch: bsz,
                layers,
                t_top: t,
                params: params.to_vec(),
                layout: self.layout.clone(),
            },
        ))
    }
}

#[derive(Debug, Clone)]
struct DirLayer {
    t_in: Vec<f64>,
    t_pre: Vec<f64>,
    mask: Vec<f64>,
    scale: Vec<f64>,
    inv_std: Vec<f64>,
}

/// Tangent activations from [`SurrogateNet::directional`].
#[derive(Debug, Clone)]
pub struct DirectionalCache {
    batch: usize,
    layers: Vec<DirLayer>,
    t_top: Vec<f64>,
    params: Vec<f64>,
    layout: Layout,
}

impl DirectionalCache {
    /// Gradient of `Σ_b upstream[b]·D_b` with respect to φ.
    ///
    /// LeakyReLU masks are piecewise constant, so only the linear weights
    /// and the norm scales receive gradient; biases and shifts get zero.
    pub fn backward(&self, upstream: &[f64]) -> Result<ParamGrad, SurrogateError> {
        if upstream.len() != self.batch {
            return Err(SurrogateError::ShapeMismatch(format!(
                "{} upstream values for a batch of {}",
                upstream.len(),
                self.batch
            )));
        }
        let bsz = self.batch;
        let lay = &self.layout;
        let mut grad = vec![0.0; lay.total];
        let nl = lay.layers.len();
        let last = lay.layers[nl - 1].out_dim;
        let hw = &self.params[lay.head_w..lay.head_w + last];
        {
            let gw = &mut grad[lay.head_w..lay.head_w + last];
            for (row, &u) in self.t_top.chunks_exact(last).zip(upstream) {
                for (g, a) in gw.iter_mut().zip(row) {
                    *g += u * a;
                }
            }
        }
        let mut dt = vec![0.0; bsz * last];
        for (row, &u) in dt.chunks_exact_mut(last).zip(upstream) {
            for (d, w) in row.iter_mut().zip(hw) {
                *d = u * w;
            }
        }
        for li in (0..nl).rev() {
            let l = lay.layers[li];
            let c = &self.layers[li];
            let (din, dout) = (l.in_dim, l.out_dim);
            // dṄ = dḢ ⊙ mask
            let mut dtn: Vec<f64> = dt.iter().zip(&c.mask).map(|(a, m)| a * m).collect();
            if let Some(g) = l.gamma {
                let gg = &mut grad[g..g + dout];
                for (dr, tr) in dtn.chunks_exact(dout).zip(c.t_pre.chunks_exact(dout)) {
                    for j in 0..dout {
                        gg[j] += dr[j] * tr[j] * c.inv_std[j];
                    }
                }
            }
            for row in dtn.chunks_exact_mut(dout) {
                for j in 0..dout {
                    row[j] *= c.scale[j];
                }
            }
            gemm(dout, bsz, din, 1.0, &dtn, true, &c.t_in, false, 1.0, &mut grad[l.w..l.w + dout * din]);
            if li > 0 {
                let mut prev = vec![0.0; bsz * din];
                gemm(bsz, dout, din, 1.0, &dtn, false, &self.params[l.w..l.w + dout * din], false, 0.0, &mut prev);
                dt = prev;
            }
        }
        Ok(ParamGrad(grad))
    }
}

fn column_moments(data: &[f64], rows: usize, cols: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    let inv = 1.0 / rows as f64;
    mean.iter_mut().for_each(|m| *m *= inv);
    let mut var = vec![0.0; cols];
    for row in data.chunks_exact(cols) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    var.iter_mut().for_each(|s| *s *= inv);
    (mean, var)
}

pub fn forward(
    net: &mut SurrogateNet,
    x: &Matrix,
    params_override: Option<&[f64]>,
) -> Result<(Vec<f64>, ForwardCache), SurrogateError> {
    net.forward(x, params_override)
}

pub fn backward_params(net: &SurrogateNet, cache: &ForwardCache, dl_dpred: &[f64]) -> Result<ParamGrad, SurrogateError> {
    net.backward_params(cache, dl_dpred)
}

pub fn input_grad(net: &SurrogateNet, x: &[f64], params_override: Option<&[f64]>) -> Result<Vec<f64>, SurrogateError> {
    net.input_grad(x, params_override)
}

/// Adam moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam(AdamState),
}

impl OptimizerState {
    pub fn adam(n: usize) -> Self {
        OptimizerState::Adam(AdamState::new(n))
    }
}

/// One optimizer step on `params` in place.
pub fn step_params(params: &mut [f64], g: &ParamGrad, lr: f64, state: &mut OptimizerState) -> Result<(), SurrogateError> {
    if g.len() != params.len() {
        return Err(SurrogateError::ShapeMismatch(format!(
            "gradient has {} entries, parameters {}",
            g.len(),
            params.len()
        )));
    }
    match state {
        OptimizerState::Sgd => {
            for (p, gi) in params.iter_mut().zip(&g.0) {
                *p -= lr * gi;
            }
        }
        OptimizerState::Adam(s) => {
            if s.m.len() != params.len() {
                return Err(SurrogateError::ShapeMismatch("optimizer state length".into()));
            }
            s.t += 1;
            let bc1 = 1.0 - s.beta1.powi(s.t as i32);
            let bc2 = 1.0 - s.beta2.powi(s.t as i32);
            for i in 0..params.len() {
                let gi = g.0[i];
                s.m[i] = s.beta1 * s.m[i] + (1.0 - s.beta1) * gi;
                s.v[i] = s.beta2 * s.v[i] + (1.0 - s.beta2) * gi * gi;
                let mhat = s.m[i] / bc1;
                let vhat = s.v[i] / bc2;
                params[i] -= lr * mhat / (vhat.sqrt() + s.eps);
            }
        }
    }
    Ok(())
}

pub fn apply_update(
    net: &mut SurrogateNet,
    g: &ParamGrad,
    lr: f64,
    state: &mut OptimizerState,
) -> Result<(), SurrogateError> {
    step_params(net.params_mut(), g, lr, state)
}

// ---- checkpoints ----------------------------------------------------------

impl SurrogateNet {
    /// Binary little-endian checkpoint: magic, version byte, architecture,
    /// flat parameters, then running norm statistics.
    pub fn write_checkpoint<W: Write>(&self, w: &mut W) -> Result<(), SurrogateError> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&[CHECKPOINT_VERSION])?;
        w.write_all(&(self.arch.input_dim as u32).to_le_bytes())?;
        w.write_all(&(self.arch.hidden.len() as u32).to_le_bytes())?;
        for &h in &self.arch.hidden {
            w.write_all(&(h as u32).to_le_bytes())?;
        }
        w.write_all(&self.arch.leaky_slope.to_le_bytes())?;
        w.write_all(&[match self.arch.norm {
            NormKind::BatchStat => 1,
            NormKind::None => 0,
        }])?;
        w.write_all(&[match self.mode {
            Mode::Train => 0,
            Mode::Eval => 1,
        }])?;
        w.write_all(&(self.params.len() as u64).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&p.to_le_bytes())?;
        }
        for st in &self.stats {
            for v in st.mean.iter().chain(&st.var) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Self, SurrogateError> {
        let bad = |m: &str| SurrogateError::Checkpoint(m.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad magic header"));
        }
        let mut b1 = [0u8; 1];
        r.read_exact(&mut b1)?;
        if b1[0] != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {}", b1[0])));
        }
        let input_dim = read_u32(r)? as usize;
        let nh = read_u32(r)? as usize;
        if nh > 1024 {
            return Err(bad("implausible layer count"));
        }
        let hidden = (0..nh).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<Vec<_>, _>>()?;
        let leaky_slope = read_f64(r)?;
        r.read_exact(&mut b1)?;
        let norm = match b1[0] {
            1 => NormKind::BatchStat,
            0 => NormKind::None,
            x => return Err(bad(&format!("unknown norm tag {x}"))),
        };
        r.read_exact(&mut b1)?;
        let mode = match b1[0] {
            0 => Mode::Train,
            1 => Mode::Eval,
            x => return Err(bad(&format!("unknown mode tag {x}"))),
        };
        let arch = Architecture {
            input_dim,
            hidden,
            leaky_slope,
            norm,
        };
        arch.validate()?;
        let n = read_u64(r)? as usize;
        if n != arch.param_count() {
            return Err(bad("parameter count does not match architecture"));
        }
        let params = (0..n).map(|_| read_f64(r)).collect::<Result<Vec<_>, _>>()?;
        let stats = match norm {
            NormKind::BatchStat => arch
                .hidden
                .iter()
                .map(|&w| {
                    let mean = (0..w).map(|_| read_f64(r)).collect::<Result<Vec<_>, _>>()?;
                    let var = (0..w).map(|_| read_f64(r)).collect::<Result<Vec<_>, _>>()?;
                    Ok(NormStats { mean, var })
                })
                .collect::<Result<Vec<_>, SurrogateError>>()?,
            NormKind::None => Vec::new(),
        };
        let mut net = SurrogateNet::from_parts(arch, params, Some(stats))?;
        net.mode = mode;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SurrogateError> {
        let mut buf = Vec::new();
        self.write_checkpoint(&mut buf)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SurrogateError> {
        let bytes = std::fs::read(path)?;
        Self::read_checkpoint(&mut bytes.as_slice())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, SurrogateError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, SurrogateError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64, SurrogateError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch() -> Architecture {
        Architecture::new(3, vec![5, 4])
    }

    fn batch(rng: &mut RngState, b: usize, d: usize) -> Matrix {
        let v = (0..b * d).map(|_| rng.normal()).collect();
        Matrix::from_vec(b, d, v).unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_net(&small_arch(), &mut RngState::new(3)).unwrap();
        let b = init_net(&small_arch(), &mut RngState::new(3)).unwrap();
        assert_eq!(a.params(), b.params());
    }

    #[test]
    fn param_count_default_architecture() {
        let arch = Architecture::new(4, vec![512, 128, 32]);
        let expected = 4 * 512 + 512 + 512 * 128 + 128 + 128 * 32 + 32 + 32 + 1 + 2 * (512 + 128 + 32);
        assert_eq!(arch.param_count(), expected);
        let plain = Architecture {
            norm: NormKind::None,
            ..arch
        };
        assert_eq!(plain.param_count(), expected - 2 * (512 + 128 + 32));
    }

    #[test]
    fn empty_hidden_is_invalid() {
        let arch = Architecture::new(4, vec![]);
        assert!(matches!(
            init_net(&arch, &mut RngState::new(0)),
            Err(SurrogateError::InvalidArchitecture(_))
        ));
    }

    #[test]
    fn zero_weights_predict_zero() {
        let arch = small_arch();
        let mut net = SurrogateNet::from_parts(arch.clone(), vec![0.0; arch.param_count()], None).unwrap();
        let x = batch(&mut RngState::new(1), 6, 3);
        let (p, _) = net.forward(&x, None).unwrap();
        assert!(p.iter().all(|v| *v == 0.0));
        net.set_mode(Mode::Eval);
        assert!(net.input_grad(&[0.3, -1.0, 2.0], None).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn repeated_rows_give_identical_predictions() {
        let mut net = init_net(&small_arch(), &mut RngState::new(5)).unwrap();
        net.set_mode(Mode::Eval);
        let row = [0.1, -0.4, 0.9];
        let x = Matrix::from_rows(&[row, row, row]).unwrap();
        let (p, _) = net.forward(&x, None).unwrap();
        assert_eq!(p[0], p[1]);
        assert_eq!(p[1], p[2]);
    }

    #[test]
    fn train_forward_updates_running_stats() {
        let mut net = init_net(&small_arch(), &mut RngState::new(5)).unwrap();
        let x = batch(&mut RngState::new(2), 8, 3);
        let before = net.stats().to_vec();
        net.forward(&x, None).unwrap();
        assert_ne!(before, net.stats());
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = init_net(&small_arch(), &mut RngState::new(5)).unwrap();
        net.set_mode(Mode::Eval);
        let x = batch(&mut RngState::new(2), 4, 3);
        let (_, cache) = net.forward(&x, None).unwrap();
        net.params_mut()[0] += 1.0;
        assert!(matches!(
            net.backward_params(&cache, &[1.0; 4]),
            Err(SurrogateError::StaleCache)
        ));
    }

    #[test]
    fn zero_upstream_gives_zero_gradient_and_linearity() {
        let mut net = init_net(&small_arch(), &mut RngState::new(8)).unwrap();
        net.set_mode(Mode::Eval);
        let x = batch(&mut RngState::new(2), 4, 3);
        let (_, cache) = net.forward(&x, None).unwrap();
        assert!(net.backward_params(&cache, &[0.0; 4]).unwrap().0.iter().all(|v| *v == 0.0));
        let up = [0.5, -1.0, 2.0, 0.25];
        let g1 = net.backward_params(&cache, &up).unwrap();
        let up2: Vec<f64> = up.iter().map(|v| 2.0 * v).collect();
        let g2 = net.backward_params(&cache, &up2).unwrap();
        for (a, b) in g1.0.iter().zip(&g2.0) {
            assert!((2.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn input_grad_requires_eval_mode() {
        let net = init_net(&small_arch(), &mut RngState::new(5)).unwrap();
        assert!(matches!(
            net.input_grad(&[0.0; 3], None),
            Err(SurrogateError::TrainModeInputGrad)
        ));
    }

    #[test]
    fn linear_network_gradient_is_weight_product() {
        let arch = Architecture {
            input_dim: 2,
            hidden: vec![3],
            leaky_slope: 1.0,
            norm: NormKind::None,
        };
        let mut net = init_net(&arch, &mut RngState::new(11)).unwrap();
        net.set_mode(Mode::Eval);
        let p = net.params().to_vec();
        // W is 3x2 at offset 0, head weights at 3*2+3
        let expected: Vec<f64> = (0..2)
            .map(|i| (0..3).map(|j| p[9 + j] * p[j * 2 + i]).sum())
            .collect();
        for x in [[0.0, 0.0], [5.0, -3.0]] {
            let g = net.input_grad(&x, None).unwrap();
            for (a, b) in g.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn override_leaves_net_untouched_in_eval() {
        let mut net = init_net(&small_arch(), &mut RngState::new(5)).unwrap();
        net.set_mode(Mode::Eval);
        let before = (net.params().to_vec(), net.stats().to_vec());
        let fast: Vec<f64> = net.params().iter().map(|v| v * 0.5).collect();
        let x = batch(&mut RngState::new(2), 4, 3);
        let (a, _) = net.forward(&x, Some(&fast)).unwrap();
        let (b, _) = net.forward(&x, None).unwrap();
        assert_ne!(a, b);
        assert_eq!(before, (net.params().to_vec(), net.stats().to_vec()));
        assert!(net.forward(&x, Some(&fast[1..])).is_err());
    }

    #[test]
    fn sgd_and_adam_basics() {
        let mut p = vec![1.0, 2.0];
        let mut sgd = OptimizerState::Sgd;
        step_params(&mut p, &ParamGrad(vec![1.0, 1.0]), 0.1, &mut sgd).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-15 && (p[1] - 1.9).abs() < 1e-15);
        let mut q = vec![1.0, 2.0];
        let mut adam = OptimizerState::adam(2);
        step_params(&mut q, &ParamGrad(vec![0.0, 0.0]), 0.1, &mut adam).unwrap();
        assert_eq!(q, vec![1.0, 2.0]);
        assert!(step_params(&mut q, &ParamGrad(vec![0.0]), 0.1, &mut sgd).is_err());
    }

    #[test]
    fn adam_first_step_matches_recurrence() {
        let g = 0.3;
        let lr = 0.01;
        let mut p = vec![0.5];
        let mut adam = OptimizerState::adam(1);
        step_params(&mut p, &ParamGrad(vec![g]), lr, &mut adam).unwrap();
        // m = 0.1 g, v = 0.001 g², mhat = g, vhat = g²
        let m: f64 = 0.1 * g;
        let v: f64 = 0.001 * g * g;
        let mhat = m / (1.0 - 0.9);
        let vhat = v / (1.0 - 0.999);
        let expected = 0.5 - lr * mhat / (vhat.sqrt() + 1e-8);
        assert!((p[0] - expected).abs() < 1e-10);
        assert!(((0.5 - p[0]) - lr).abs() < 1e-7);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut net = init_net(&small_arch(), &mut RngState::new(5)).unwrap();
        net.forward(&batch(&mut RngState::new(2), 8, 3), None).unwrap();
        net.set_mode(Mode::Eval);
        let mut buf = Vec::new();
        net.write_checkpoint(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"OBSN");
        let back = SurrogateNet::read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.params(), net.params());
        assert_eq!(back.stats(), net.stats());
        assert_eq!(back.arch(), net.arch());
        assert_eq!(back.mode(), Mode::Eval);
        buf[0] = b'X';
        assert!(SurrogateNet::read_checkpoint(&mut buf.as_slice()).is_err());
    }

    fn loss_of(net: &mut SurrogateNet, x: &Matrix, w: &[f64], p: &[f64]) -> f64 {
        let (pred, _) = net.forward(x, Some(p)).unwrap();
        pred.iter().zip(w).map(|(a, b)| a * b).sum()
    }

    fn check_fd(analytic: &[f64], f: impl Fn(&[f64]) -> f64, p0: &[f64], tol: f64) {
        let h = 1e-6;
        for (i, &a) in analytic.iter().enumerate() {
            let mut pp = p0.to_vec();
            pp[i] += h;
            let fp = f(&pp);
            pp[i] -= 2.0 * h;
            let fm = f(&pp);
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                (fd - a).abs() <= tol * (1.0 + fd.abs().max(a.abs())),
                "index {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn param_gradient_matches_fd_eval_mode() {
        let mut net = init_net(&small_arch(), &mut RngState::new(21)).unwrap();
        net.refresh_norm_stats(&batch(&mut RngState::new(7), 16, 3)).unwrap();
        net.set_mode(Mode::Eval);
        let x = batch(&mut RngState::new(3), 5, 3);
        let w = [0.3, -1.2, 0.7, 1.0, -0.4];
        let (_, cache) = net.forward(&x, None).unwrap();
        let g = net.backward_params(&cache, &w).unwrap();
        let p0 = net.params().to_vec();
        let cell = std::cell::RefCell::new(net.clone());
        check_fd(&g.0, |p| loss_of(&mut cell.borrow_mut(), &x, &w, p), &p0, 1e-5);
    }

    #[test]
    fn param_gradient_matches_fd_train_mode() {
        let net = init_net(&small_arch(), &mut RngState::new(22)).unwrap();
        let x = batch(&mut RngState::new(4), 6, 3);
        let w = [0.3, -1.2, 0.7, 1.0, -0.4, 2.0];
        let mut n1 = net.clone();
        let (_, cache) = n1.forward(&x, None).unwrap();
        let g = n1.backward_params(&cache, &w).unwrap();
        let p0 = net.params().to_vec();
        // the clone is reset each call so running statistics never feed back
        check_fd(&g.0, |p| loss_of(&mut net.clone(), &x, &w, p), &p0, 1e-5);
    }

    #[test]
    fn input_gradient_matches_fd() {
        let mut net = init_net(&small_arch(), &mut RngState::new(23)).unwrap();
        net.refresh_norm_stats(&batch(&mut RngState::new(7), 16, 3)).unwrap();
        net.set_mode(Mode::Eval);
        let x0 = [0.2, -0.5, 1.1];
        let g = net.input_grad(&x0, None).unwrap();
        let f = |x: &[f64]| net.predict(&Matrix::from_vec(1, 3, x.to_vec()).unwrap(), None).unwrap()[0];
        check_fd(&g, f, &x0, 1e-6);
    }

    #[test]
    fn directional_value_matches_input_grad() {
        let mut net = init_net(&small_arch(), &mut RngState::new(24)).unwrap();
        net.refresh_norm_stats(&batch(&mut RngState::new(7), 16, 3)).unwrap();
        net.set_mode(Mode::Eval);
        let pts = batch(&mut RngState::new(5), 4, 3);
        let dirs = batch(&mut RngState::new(6), 4, 3);
        let (d, _) = net.directional(&pts, &dirs, None).unwrap();
        let grads = net.input_grad_batch(&pts, None).unwrap();
        for b in 0..4 {
            let expect: f64 = grads.row(b).iter().zip(dirs.row(b)).map(|(a, c)| a * c).sum();
            assert!((d[b] - expect).abs() < 1e-12 * (1.0 + expect.abs()));
        }
    }

    #[test]
    fn directional_param_gradient_matches_fd() {
        let mut net = init_net(&small_arch(), &mut RngState::new(25)).unwrap();
        net.refresh_norm_stats(&batch(&mut RngState::new(7), 16, 3)).unwrap();
        net.set_mode(Mode::Eval);
        let pts = batch(&mut RngState::new(5), 4, 3);
        let dirs = batch(&mut RngState::new(6), 4, 3);
        let up = [1.0, -0.5, 0.25, 2.0];
        let (_, cache) = net.directional(&pts, &dirs, None).unwrap();
        let g = cache.backward(&up).unwrap();
        let f = |p: &[f64]| {
            let (d, _) = net.directional(&pts, &dirs, Some(p)).unwrap();
            d.iter().zip(&up).map(|(a, b)| a * b).sum::<f64>()
        };
        check_fd(&g.0, f, net.params(), 1e-5);
    }
}
