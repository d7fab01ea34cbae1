//! Gaussian-process regression with stationary kernels.
//!
//! A [`GpModel`] stores the Cholesky factor of `K + σ²I` and the weight
//! vector `alpha = (K + σ²I)⁻¹(z − m)`, so that mean, variance and their
//! input gradients are closed-form sums over the training set.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::OfflineDataset;
use crate::numerics::{
    back_substitute_transposed, cholesky_factor_with_jitter, forward_substitute, sq_dist, Matrix,
    NumericsError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("hyperparameter grid is empty")]
    EmptyGrid,
    #[error("invalid kernel parameters: {0}")]
    InvalidParams(String),
    #[error("need at least {needed} training points, have {have}")]
    TooFewPoints { needed: usize, have: usize },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KernelFamily {
    Rbf,
    Matern52,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KernelParams {
    pub family: KernelFamily,
    pub lengthscale: f64,
    pub signal_variance: f64,
    pub noise_variance: f64,
    /// Constant prior mean.
    pub mean: f64,
}

impl Default for KernelParams {
    fn default() -> Self {
        Self {
            family: KernelFamily::Rbf,
            lengthscale: 1.0,
            signal_variance: 1.0,
            noise_variance: 0.01,
            mean: 0.0,
        }
    }
}

impl KernelParams {
    pub fn validate(&self) -> Result<(), GpError> {
        if !(self.lengthscale > 0.0 && self.lengthscale.is_finite()) {
            return Err(GpError::InvalidParams(format!(
                "lengthscale {} must be positive",
                self.lengthscale
            )));
        }
        if !(self.signal_variance > 0.0 && self.signal_variance.is_finite()) {
            return Err(GpError::InvalidParams(format!(
                "signal variance {} must be positive",
                self.signal_variance
            )));
        }
        if !(self.noise_variance >= 0.0 && self.noise_variance.is_finite()) {
            return Err(GpError::InvalidParams(format!(
                "noise variance {} must be nonnegative",
                self.noise_variance
            )));
        }
        if !self.mean.is_finite() {
            return Err(GpError::InvalidParams("prior mean must be finite".into()));
        }
        Ok(())
    }

    /// Kernel value as a function of squared distance.
    #[inline]
    pub(crate) fn k_sq(&self, r2: f64) -> f64 {
        let l = self.lengthscale;
        match self.family {
            KernelFamily::Rbf => self.signal_variance * (-0.5 * r2 / (l * l)).exp(),
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * r2.sqrt() / l;
                self.signal_variance * (1.0 + a + a * a / 3.0) * (-a).exp()
            }
        }
    }

    /// `h(r)` such that `∇_x k(x, x') = -h(r) (x - x')`.
    #[inline]
    pub(crate) fn grad_factor_sq(&self, r2: f64) -> f64 {
        let l = self.lengthscale;
        match self.family {
            KernelFamily::Rbf => self.k_sq(r2) / (l * l),
            KernelFamily::Matern52 => {
                let a = 5f64.sqrt() * r2.sqrt() / l;
                self.signal_variance * 5.0 / (3.0 * l * l) * (1.0 + a) * (-a).exp()
            }
        }
    }
}

pub fn kernel_eval(p: &KernelParams, x: &[f64], x2: &[f64]) -> Result<f64, GpError> {
    if x.len() != x2.len() {
        return Err(GpError::DimensionMismatch {
            expected: x.len(),
            got: x2.len(),
        });
    }
    Ok(p.k_sq(sq_dist(x, x2)))
}

/// Fitted GP posterior.
#[derive(Debug, Clone, PartialEq)]
pub struct GpModel {
    pub params: KernelParams,
    pub x_train: Matrix,
    pub alpha: Vec<f64>,
    pub chol: Matrix,
    /// Jitter added on top of the noise variance to make the factor succeed.
    pub jitter: f64,
}

/// Builds `K + σ²I` for the training inputs.
pub fn covariance_matrix(x: &Matrix, p: &KernelParams) -> Matrix {
    let n = x.rows();
    let mut k = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = p.k_sq(sq_dist(x.row(i), x.row(j)));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
        k[(i, i)] += p.noise_variance;
    }
    k
}

/// Conditions the GP prior on `ds`. An empty dataset yields the prior.
pub fn posterior(ds: &OfflineDataset, p: &KernelParams) -> Result<GpModel, GpError> {
    p.validate()?;
    let kmat = covariance_matrix(&ds.x, p);
    let (chol, jitter) = cholesky_factor_with_jitter(&kmat, 0.0)?;
    let mut alpha: Vec<f64> = ds.z.iter().map(|z| z - p.mean).collect();
    forward_substitute(&chol, &mut alpha);
    back_substitute_transposed(&chol, &mut alpha);
    Ok(GpModel {
        params: *p,
        x_train: ds.x.clone(),
        alpha,
        chol,
        jitter,
    })
}

impl GpModel {
    pub fn dim(&self) -> usize {
        self.x_train.cols()
    }

    pub fn n_train(&self) -> usize {
        self.x_train.rows()
    }

    fn check_dim(&self, x: &[f64]) -> Result<(), GpError> {
        if x.len() != self.dim() {
            return Err(GpError::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }

    fn k_star(&self, x: &[f64]) -> Vec<f64> {
        self.x_train
            .iter_rows()
            .map(|xi| self.params.k_sq(sq_dist(x, xi)))
            .collect()
    }

    pub fn mean(&self, x: &[f64]) -> Result<f64, GpError> {
        self.check_dim(x)?;
        Ok(self.mean_unchecked(x))
    }

    pub(crate) fn mean_unchecked(&self, x: &[f64]) -> f64 {
        let s: f64 = self
            .x_train
            .iter_rows()
            .zip(&self.alpha)
            .map(|(xi, a)| a * self.params.k_sq(sq_dist(x, xi)))
            .sum();
        self.params.mean + s
    }

    /// Posterior variance, clamped at zero.
    pub fn variance(&self, x: &[f64]) -> Result<f64, GpError> {
        self.check_dim(x)?;
        let raw = self.raw_variance(x);
        if raw < -1e-8 {
            log::warn!("posterior variance {raw:e} clamped to zero");
        }
        Ok(raw.max(0.0))
    }

    /// Variance before clamping; can be slightly negative from round-off.
    pub fn raw_variance(&self, x: &[f64]) -> f64 {
        let mut v = self.k_star(x);
        forward_substitute(&self.chol, &mut v);
        self.params.signal_variance - v.iter().map(|t| t * t).sum::<f64>()
    }

    /// `∇_x μ(x) = Σ_j alpha_j ∇_x k(x, x_j)`.
    pub fn mean_grad(&self, x: &[f64]) -> Result<Vec<f64>, GpError> {
        self.check_dim(x)?;
        Ok(self.mean_and_grad(x).1)
    }

    pub(crate) fn mean_and_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; x.len()];
        let mut m = self.params.mean;
        for (xi, a) in self.x_train.iter_rows().zip(&self.alpha) {
            let r2 = sq_dist(x, xi);
            m += a * self.params.k_sq(r2);
            let h = a * self.params.grad_factor_sq(r2);
            for ((gk, xk), xik) in g.iter_mut().zip(x).zip(xi) {
                *gk -= h * (xk - xik);
            }
        }
        (m, g)
    }

    /// `μ(x) + beta·σ(x)`.
    pub fn ucb(&self, x: &[f64], beta: f64) -> Result<f64, GpError> {
        check_beta(beta)?;
        self.check_dim(x)?;
        Ok(self.ucb_and_grad(x, beta).0)
    }

    pub fn ucb_grad(&self, x: &[f64], beta: f64) -> Result<Vec<f64>, GpError> {
        check_beta(beta)?;
        self.check_dim(x)?;
        Ok(self.ucb_and_grad(x, beta).1)
    }

    /// UCB value and gradient. The `sqrt` chain rule is skipped where the
    /// variance is below 1e-12.
    pub(crate) fn ucb_and_grad(&self, x: &[f64], beta: f64) -> (f64, Vec<f64>) {
        let (m, mut g) = self.mean_and_grad(x);
        if beta == 0.0 {
            return (m, g);
        }
        let kstar = self.k_star(x);
        let mut w = kstar.clone();
        forward_substitute(&self.chol, &mut w);
        let var_raw = self.params.signal_variance - w.iter().map(|t| t * t).sum::<f64>();
        let var = var_raw.max(0.0);
        let sd = var.sqrt();
        if var > 1e-12 {
            back_substitute_transposed(&self.chol, &mut w);
            // ∇var = -2 Σ_j w_j ∇k(x, x_j) = 2 Σ_j w_j h_j (x - x_j)
            let scale = beta / (2.0 * sd);
            for (xi, wj) in self.x_train.iter_rows().zip(&w) {
                let h = self.params.grad_factor_sq(sq_dist(x, xi));
                let c = scale * 2.0 * wj * h;
                for ((gk, xk), xik) in g.iter_mut().zip(x).zip(xi) {
                    *gk += c * (xk - xik);
                }
            }
        }
        (m + beta * sd, g)
    }

    /// Gaussian log marginal likelihood of the training targets.
    pub fn log_marginal_likelihood(&self, z: &[f64]) -> f64 {
        let n = z.len() as f64;
        let fit: f64 = z
            .iter()
            .zip(&self.alpha)
            .map(|(zi, a)| (zi - self.params.mean) * a)
            .sum();
        let logdet: f64 = (0..self.n_train())
            .map(|i| self.chol[(i, i)].ln())
            .sum::<f64>()
            * 2.0;
        -0.5 * fit - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln()
    }
}

fn check_beta(beta: f64) -> Result<(), GpError> {
    if !(beta >= 0.0) {
        return Err(GpError::InvalidParams(format!("beta {beta} must be >= 0")));
    }
    Ok(())
}

pub fn posterior_mean(g: &GpModel, x: &[f64]) -> Result<f64, GpError> {
    g.mean(x)
}

pub fn posterior_var(g: &GpModel, x: &[f64]) -> Result<f64, GpError> {
    g.variance(x)
}

pub fn posterior_mean_grad(g: &GpModel, x: &[f64]) -> Result<Vec<f64>, GpError> {
    g.mean_grad(x)
}

pub fn ucb(g: &GpModel, x: &[f64], beta: f64) -> Result<f64, GpError> {
    g.ucb(x, beta)
}

/// Picks the grid entry with the highest marginal likelihood; the first
/// entry wins ties. Entries whose covariance cannot be factored are skipped.
pub fn fit_hyperparams(ds: &OfflineDataset, grid: &[KernelParams]) -> Result<KernelParams, GpError> {
    if grid.is_empty() {
        return Err(GpError::EmptyGrid);
    }
    if ds.len() < 2 {
        return Err(GpError::TooFewPoints {
            needed: 2,
            have: ds.len(),
        });
    }
    let mut best: Option<(f64, KernelParams)> = None;
    let mut last_err = None;
    for p in grid {
        match posterior(ds, p) {
            Ok(model) => {
                let lml = model.log_marginal_likelihood(&ds.z);
                if best.as_ref().is_none_or(|(b, _)| lml > *b) {
                    best = Some((lml, *p));
                }
            }
            Err(e) => last_err = Some(e),
        }
    }
    match best {
        Some((_, p)) => Ok(p),
        None => Err(last_err.unwrap_or(GpError::EmptyGrid)),
    }
}

/// Log-spaced grid around `center`: every combination of the given
/// multiplicative factors on lengthscale and signal variance.
pub fn log_grid(center: &KernelParams, factors: &[f64]) -> Vec<KernelParams> {
    let mut out = Vec::with_capacity(factors.len() * factors.len());
    for &fl in factors {
        for &fs in factors {
            out.push(KernelParams {
                lengthscale: center.lengthscale * fl,
                signal_variance: center.signal_variance * fs,
                ..*center
            });
        }
    }
    out
}
