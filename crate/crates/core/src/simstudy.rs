//! Simulation-study surfaces, lattice, data simulation and accuracy metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::{GevParams, Shape};
use crate::kernel::Coord;
use crate::laplace::{outer_optimize, FitOptions, FitResult};
use crate::model::{SiteDataset, Transform};
use crate::par;

/// 2-D Gaussian bump parameters: centre and covariance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub mu: [f64; 2],
    /// Row-major symmetric 2x2 covariance.
    pub sigma: [[f64; 2]; 2],
}

impl Bump {
    fn det(&self) -> f64 {
        self.sigma[0][0] * self.sigma[1][1] - self.sigma[0][1] * self.sigma[1][0]
    }

    /// `(x - mu)' Sigma^{-1} (x - mu)`.
    fn quad(&self, x: &Coord) -> f64 {
        let d = [x[0] - self.mu[0], x[1] - self.mu[1]];
        let s = &self.sigma;
        let det = self.det();
        (s[1][1] * d[0] * d[0] - (s[0][1] + s[1][0]) * d[0] * d[1] + s[0][0] * d[1] * d[1]) / det
    }
}

/// Constants of the true location and log-scale surfaces.
///
/// `a(x) = c0 ln(2 pi) + c1 ln det S0 + c2 q0(x) + c3` and
/// `b(x) = w ln{ w1 det(S1)^{-1/2} e^{-q1(x)/2} + w2 det(S2)^{-1/2} e^{-q2(x)/2} } + w0`,
/// where `qk` is the quadratic form of bump `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSpec {
    pub bump0: Bump,
    pub bump1: Bump,
    pub bump2: Bump,
    pub a_coef: [f64; 4],
    /// `(w, w1, w2, w0)`.
    pub b_coef: [f64; 4],
}

impl Default for SurfaceSpec {
    fn default() -> Self {
        Self {
            bump0: Bump { mu: [4.0, 4.0], sigma: [[2.0, 0.0], [0.0, 2.0]] },
            bump1: Bump { mu: [1.0, 0.0], sigma: [[0.5, 0.0], [0.0, 0.5]] },
            bump2: Bump { mu: [8.0, 7.0], sigma: [[1.0, 0.0], [0.0, 1.0]] },
            a_coef: [-0.2, -0.1, -0.1, 6.0],
            b_coef: [0.07, 0.64, 0.09, 0.14],
        }
    }
}

impl SurfaceSpec {
    pub fn a(&self, x: &Coord) -> f64 {
        let [c0, c1, c2, c3] = self.a_coef;
        c0 * (2.0 * std::f64::consts::PI).ln() + c1 * self.bump0.det().ln() + c2 * self.bump0.quad(x) + c3
    }

    pub fn b(&self, x: &Coord) -> f64 {
        let [w, w1, w2, w0] = self.b_coef;
        // log-sum-exp of the two weighted bumps
        let l1 = w1.ln() - 0.5 * self.bump1.det().ln() - 0.5 * self.bump1.quad(x);
        let l2 = w2.ln() - 0.5 * self.bump2.det().ln() - 0.5 * self.bump2.quad(x);
        let m = l1.max(l2);
        w * (m + ((l1 - m).exp() + (l2 - m).exp()).ln()) + w0
    }
}

/// True `(a, b)` at each coordinate.
pub fn true_surfaces(spec: &SurfaceSpec, coords: &[Coord]) -> Result<(Vec<f64>, Vec<f64>)> {
    if let Some(i) = coords.iter().position(|c| !(c[0].is_finite() && c[1].is_finite())) {
        return Err(Error::Validation(format!("coordinate {i} is not finite")));
    }
    Ok((coords.iter().map(|x| spec.a(x)).collect(), coords.iter().map(|x| spec.b(x)).collect()))
}

/// `side x side` regular lattice on `[lo, hi]^2`, endpoints included,
/// row-major (the first coordinate varies fastest).
pub fn make_lattice(side: usize, lo: f64, hi: f64) -> Result<Vec<Coord>> {
    if side < 2 {
        return Err(Error::Validation(format!("lattice side must be at least 2, got {side}")));
    }
    if !(lo.is_finite() && hi.is_finite() && lo < hi) {
        return Err(Error::Validation(format!("invalid lattice range [{lo}, {hi}]")));
    }
    let step = (hi - lo) / (side - 1) as f64;
    let at = |k: usize| if k == side - 1 { hi } else { lo + k as f64 * step };
    Ok((0..side).flat_map(|r| (0..side).map(move |c| [at(c), at(r)])).collect())
}

/// Independent GEV draws at each site; site `i` uses its own stream
/// derived from `(seed, i)`.
pub fn simulate_dataset(coords: &[Coord], a: &[f64], b: &[f64], shape: Shape, n_per_site: usize, seed: u64) -> Result<SiteDataset> {
    if n_per_site == 0 {
        return Err(Error::Validation("n_per_site must be at least 1".into()));
    }
    if a.len() != coords.len() || b.len() != coords.len() {
        return Err(Error::Dimension { expected: coords.len(), actual: a.len().min(b.len()) });
    }
    let params = (0..coords.len()).map(|i| GevParams::new(a[i], b[i], shape)).collect::<Result<Vec<_>>>()?;
    let obs = par::map(coords.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, i as u64));
        (0..n_per_site).map(|_| params[i].draw(&mut rng)).collect()
    });
    SiteDataset::new(coords.to_vec(), obs, Transform::None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae_a: f64,
    pub mae_b: f64,
    /// `None` for Gumbel models.
    pub ae_s: Option<f64>,
    pub wall_seconds: f64,
}

/// Accuracy of the fitted modes against the truth.
pub fn metrics(fit: &FitResult, a_true: &[f64], b_true: &[f64], s_true: Option<f64>) -> Result<MetricsReport> {
    let u = fit.u_hat()?;
    let h = fit.theta_hat()?;
    let n = u.n_sites();
    if a_true.len() != n || b_true.len() != n {
        return Err(Error::Dimension { expected: n, actual: a_true.len().min(b_true.len()) });
    }
    let mae_a = u.a.iter().zip(a_true).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64;
    let mae_b = match (&u.b, h.b_fixed) {
        (Some(b), _) => b.iter().zip(b_true).map(|(x, y)| (x - y).abs()).sum::<f64>() / n as f64,
        (None, Some(b)) => b_true.iter().map(|y| (b - y).abs()).sum::<f64>() / n as f64,
        (None, None) => unreachable!("either b field or fixed b"),
    };
    let ae_s = match (h.shape, s_true) {
        (Shape::LogShape(s), Some(t)) => Some((s - t).abs()),
        _ => None,
    };
    Ok(MetricsReport { mae_a, mae_b, ae_s, wall_seconds: fit.laplace.diagnostics.wall_seconds })
}

/// Least-squares slope of `y` on `x` (with intercept).
pub fn regression_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// Original-versus-recovered per-site parameters from a refit on
/// pseudo-data simulated at the fitted posterior means.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RefitCheck {
    pub a_original: Vec<f64>,
    pub a_recovered: Vec<f64>,
    pub b_original: Vec<f64>,
    pub b_recovered: Vec<f64>,
    pub slope_a: f64,
    /// `None` when `b` is a single fixed parameter (no spread to regress on).
    pub slope_b: Option<f64>,
    pub refit: FitResult,
}

fn site_params(fit: &FitResult) -> Result<(Vec<f64>, Vec<f64>, Shape)> {
    let u = fit.u_hat()?;
    let h = fit.theta_hat()?;
    let b = match (&u.b, h.b_fixed) {
        (Some(b), _) => b.clone(),
        (None, Some(b)) => vec![b; u.n_sites()],
        (None, None) => unreachable!("either b field or fixed b"),
    };
    Ok((u.a, b, h.shape))
}

/// Simulates pseudo-data from the posterior means of `fit` (same number of
/// observations per site as `data`), refits the same model and compares.
pub fn refit_check(fit: &FitResult, data: &SiteDataset, opts: &FitOptions, seed: u64) -> Result<RefitCheck> {
    let (a, b, shape) = site_params(fit)?;
    if data.n_sites() != a.len() {
        return Err(Error::Dimension { expected: a.len(), actual: data.n_sites() });
    }
    let params = (0..a.len()).map(|i| GevParams::new(a[i], b[i], shape)).collect::<Result<Vec<_>>>()?;
    let obs: Vec<Vec<f64>> = par::map(a.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, i as u64));
        (0..data.obs[i].len())
            .map(|_| {
                let y = params[i].draw(&mut rng);
                // draws live on the modelling scale
                if data.transform == Transform::Log { y.exp() } else { y }
            })
            .collect()
    });
    let pseudo = SiteDataset::new(data.coords.clone(), obs, data.transform)?;
    let refit = outer_optimize(&pseudo, fit.spec, Some(&fit.theta_hat()?), opts)?;
    let (a2, b2, _) = site_params(&refit)?;
    let slope_b = fit.spec.b_random.then(|| regression_slope(&b, &b2));
    Ok(RefitCheck { slope_a: regression_slope(&a, &a2), slope_b, a_original: a, a_recovered: a2, b_original: b, b_recovered: b2, refit })
}
