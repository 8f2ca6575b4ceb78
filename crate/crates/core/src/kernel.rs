//! Spatial covariance kernels, covariance factorization, multivariate
//! Normal log-density and sampling, and Gaussian-process conditioning.

use faer::Mat;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Cholesky};

/// Planar coordinate pair.
pub type Coord = [f64; 2];

/// Functional form of the covariance kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelForm {
    /// `sigma2 * exp(-d / lambda)` in the Euclidean distance `d`.
    #[default]
    Exponential,
    /// `sigma2 * exp(-d^2 / (2 lambda^2))`.
    SquaredExponential,
}

/// Kernel hyperparameters on the log scale plus a diagonal nugget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelConfig {
    pub log_sigma2: f64,
    pub log_lambda: f64,
    /// Added to the covariance diagonal; same units as `sigma2`.
    pub jitter: f64,
    #[serde(default)]
    pub form: KernelForm,
}

/// Default nugget as a fraction of the amplitude.
pub const DEFAULT_RELATIVE_JITTER: f64 = 1e-6;

impl KernelConfig {
    /// Config with the default nugget `1e-6 * sigma2`.
    pub fn new(log_sigma2: f64, log_lambda: f64) -> Self {
        Self {
            log_sigma2,
            log_lambda,
            jitter: DEFAULT_RELATIVE_JITTER * log_sigma2.exp(),
            form: KernelForm::Exponential,
        }
    }

    pub fn with_jitter(mut self, jitter: f64) -> Self {
        self.jitter = jitter;
        self
    }

    pub fn with_form(mut self, form: KernelForm) -> Self {
        self.form = form;
        self
    }

    pub fn sigma2(&self) -> f64 {
        self.log_sigma2.exp()
    }

    pub fn lambda(&self) -> f64 {
        self.log_lambda.exp()
    }

    pub fn validate(&self) -> Result<()> {
        if !self.log_sigma2.is_finite() || !self.log_lambda.is_finite() {
            return Err(Error::Domain("kernel log-parameters must be finite".into()));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::Domain(format!("jitter must be >= 0, got {}", self.jitter)));
        }
        Ok(())
    }

    /// Correlation at distance `d` (kernel divided by `sigma2`).
    #[inline]
    pub fn correlation(&self, d: f64) -> f64 {
        match self.form {
            KernelForm::Exponential => (-d * (-self.log_lambda).exp()).exp(),
            KernelForm::SquaredExponential => {
                let r = d * (-self.log_lambda).exp();
                (-0.5 * r * r).exp()
            }
        }
    }
}

#[inline]
pub fn distance(x1: &Coord, x2: &Coord) -> f64 {
    (x1[0] - x2[0]).hypot(x1[1] - x2[1])
}

pub fn kernel_eval(x1: &Coord, x2: &Coord, cfg: &KernelConfig) -> f64 {
    cfg.sigma2() * cfg.correlation(distance(x1, x2))
}

/// Kernel matrix between two site lists, without the nugget.
pub fn cross_cov(rows: &[Coord], cols: &[Coord], cfg: &KernelConfig) -> Mat<f64> {
    let s2 = cfg.sigma2();
    Mat::from_fn(rows.len(), cols.len(), |i, j| s2 * cfg.correlation(distance(&rows[i], &cols[j])))
}

/// `K + jitter I` for one site list.
pub fn cov_matrix(coords: &[Coord], cfg: &KernelConfig) -> Mat<f64> {
    let n = coords.len();
    let s2 = cfg.sigma2();
    let mut k = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        k[(j, j)] = s2 + cfg.jitter;
        for i in (j + 1)..n {
            let v = s2 * cfg.correlation(distance(&coords[i], &coords[j]));
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

/// Factorized covariance matrix.
#[derive(Debug, Clone)]
pub struct CovMatrix {
    chol: Cholesky,
}

impl CovMatrix {
    pub fn from_matrix(k: &Mat<f64>) -> Result<Self> {
        Ok(Self { chol: Cholesky::new(k.as_ref())? })
    }

    pub fn dim(&self) -> usize {
        self.chol.dim()
    }

    pub fn lower_factor(&self) -> faer::MatRef<'_, f64> {
        self.chol.l()
    }

    pub fn log_det(&self) -> f64 {
        self.chol.log_det()
    }

    pub fn cholesky(&self) -> &Cholesky {
        &self.chol
    }

    /// `K^{-1} z`.
    pub fn solve(&self, z: &[f64]) -> Vec<f64> {
        self.chol.solve(z)
    }

    pub fn precision(&self) -> Mat<f64> {
        self.chol.inverse()
    }
}

/// Assembles and factors `K + jitter I`.
pub fn build_cov(coords: &[Coord], cfg: &KernelConfig) -> Result<CovMatrix> {
    if coords.is_empty() {
        return Err(Error::Validation("covariance needs at least one site".into()));
    }
    cfg.validate()?;
    CovMatrix::from_matrix(&cov_matrix(coords, cfg))
}

/// Zero-mean multivariate Normal log density.
pub fn mvn_logpdf(z: &[f64], cov: &CovMatrix) -> Result<f64> {
    if z.len() != cov.dim() {
        return Err(Error::Dimension { expected: cov.dim(), actual: z.len() });
    }
    let w = cov.chol.solve_lower(z);
    Ok(mvn_logpdf_whitened(&w, cov.log_det()))
}

pub(crate) fn mvn_logpdf_whitened(w: &[f64], log_det: f64) -> f64 {
    let n = w.len() as f64;
    -0.5 * n * (2.0 * std::f64::consts::PI).ln() - 0.5 * log_det - 0.5 * linalg::dot(w, w)
}

/// `n` draws of `mean + L e` with standard Normal `e`, deterministic in `seed`.
pub fn mvn_sample(mean: &[f64], cov: &CovMatrix, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if mean.len() != cov.dim() {
        return Err(Error::Dimension { expected: cov.dim(), actual: mean.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = mean.len();
    Ok((0..n)
        .map(|_| {
            let e: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let mut x = cov.chol.mul_lower(&e);
            x.iter_mut().zip(mean).for_each(|(x, m)| *x += m);
            x
        })
        .collect())
}

/// Kriging predictor for a fixed set of observed sites and kernel.
///
/// Factors `K(X, X) + jitter I` once; each call to [`Kriging::condition`]
/// then costs one triangular solve per batch of new sites.
#[derive(Debug, Clone)]
pub struct Kriging<'a> {
    coords_obs: &'a [Coord],
    cfg: KernelConfig,
    cov: CovMatrix,
}

impl<'a> Kriging<'a> {
    pub fn new(coords_obs: &'a [Coord], cfg: &KernelConfig) -> Result<Self> {
        Ok(Self { coords_obs, cfg: *cfg, cov: build_cov(coords_obs, cfg)? })
    }

    /// Prior variance at a new site. The nugget only enters `K(X, X)`.
    pub fn prior_var(&self) -> f64 {
        self.cfg.sigma2()
    }

    /// Conditional means and variances at `coords_new` given field values
    /// at the observed sites. Variances are per site, clamped at zero.
    pub fn condition(&self, values_obs: &[f64], coords_new: &[Coord]) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.coords_obs.len();
        if values_obs.len() != n {
            return Err(Error::Dimension { expected: n, actual: values_obs.len() });
        }
        let alpha = self.cov.chol.solve_lower(values_obs);
        let cross = cross_cov(self.coords_obs, coords_new, &self.cfg);
        let v = self.cov.chol.solve_lower_mat(cross);
        let prior = self.prior_var();
        let mut mean = Vec::with_capacity(coords_new.len());
        let mut var = Vec::with_capacity(coords_new.len());
        for k in 0..coords_new.len() {
            let col = v.col_as_slice(k);
            mean.push(linalg::dot(col, &alpha));
            var.push((prior - linalg::dot(col, col)).max(0.0));
        }
        Ok((mean, var))
    }
}

/// Kriging means and variances at new sites for a zero-mean GP.
pub fn gp_condition(
    coords_obs: &[Coord],
    values_obs: &[f64],
    coords_new: &[Coord],
    cfg: &KernelConfig,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if values_obs.len() != coords_obs.len() {
        return Err(Error::Dimension { expected: coords_obs.len(), actual: values_obs.len() });
    }
    Kriging::new(coords_obs, cfg)?.condition(values_obs, coords_new)
}
