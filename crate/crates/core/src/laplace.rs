//! Nested Laplace approximation: inner mode finding in the latent field,
//! the Laplace marginal likelihood, outer optimization over the
//! hyperparameters, and the joint Normal posterior of `(u, theta)`.

use std::time::Instant;

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, mat_serde, Cholesky};
use crate::model::{self, GevGpModel, Hypers, KernelSettings, LatentField, LatentGp, ModelSpec, PriorState, SiteDataset, ThetaPrior};
use crate::par;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InnerOptions {
    /// Converged when `max |grad| <= grad_tol * (1 + |G|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    pub max_damping: usize,
}

impl Default for InnerOptions {
    fn default() -> Self {
        Self { grad_tol: 1e-8, max_iter: 100, max_backtracks: 60, max_damping: 24 }
    }
}

/// Mode of `G(.; theta)` and the factor of the negative Hessian there.
#[derive(Debug, Clone)]
pub struct InnerResult {
    pub u_opt: Vec<f64>,
    pub neg_hess_factor: Cholesky,
    pub g_at_opt: f64,
    pub converged: bool,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn with_boost(h: &Mat<f64>, mu: f64) -> Mat<f64> {
    let mut m = h.clone();
    for i in 0..m.nrows() {
        m[(i, i)] += mu;
    }
    m
}

/// Factor of `-H`, adding `mu I` (from `1e-4`, times ten per failure) when
/// it is not positive definite.
fn damped_factor(h: &Mat<f64>, max_damping: usize) -> Result<Cholesky> {
    if let Ok(c) = Cholesky::new(h.as_ref()) {
        return Ok(c);
    }
    let mut mu = 1e-4;
    for _ in 0..max_damping {
        if let Ok(c) = Cholesky::new(with_boost(h, mu).as_ref()) {
            return Ok(c);
        }
        mu *= 10.0;
    }
    Err(Error::IndefiniteHessian { attempts: max_damping })
}

/// Site terms whose 2x2 curvature blocks are projected onto the concave
/// cone. With a PD prior precision the resulting `-H` is always PD, which
/// gives a modified Newton direction away from the mode.
fn concave_terms(terms: &[model::SiteTerm]) -> Vec<model::SiteTerm> {
    terms
        .iter()
        .map(|t| {
            // eigen-decomposition of the negated block [[p, q], [q, r]]
            let (p, q, r) = (-t.hess[0], -t.hess[1], -t.hess[2]);
            let hess = if q == 0.0 {
                [-p.max(0.0), 0.0, -r.max(0.0)]
            } else {
                let m = 0.5 * (p + r);
                let d = (0.25 * (p - r).powi(2) + q * q).sqrt();
                let (l1, l2) = (m + d, m - d);
                if l2 >= 0.0 {
                    t.hess
                } else {
                    // eigenvector of l1 is (q, l1 - p) up to scale
                    let (vx, vy) = (q, l1 - p);
                    let nrm = vx * vx + vy * vy;
                    let l = l1.max(0.0) / nrm;
                    [-l * vx * vx, -l * vx * vy, -l * vy * vy]
                }
            };
            model::SiteTerm { hess, ..*t }
        })
        .collect()
}

/// Starting point: the caller's, else the model's default if it is inside
/// the support, else zero. A caller's point outside the support is an error
/// when `strict`, otherwise it falls through to the defaults.
fn starting_point<M: LatentGp + ?Sized>(
    model: &M,
    prior: &PriorState,
    theta: &[f64],
    u_init: Option<&[f64]>,
    init_fn: Option<&dyn Fn() -> Vec<f64>>,
    strict: bool,
) -> Result<(Vec<f64>, f64)> {
    let dim = model.latent_dim();
    if let Some(u) = u_init {
        if u.len() != dim {
            return Err(Error::Dimension { expected: dim, actual: u.len() });
        }
        let g = model::log_joint_with(model, prior, u, theta);
        if g.is_finite() {
            return Ok((u.to_vec(), g));
        }
        if strict {
            let n = model.n_sites();
            let site = (0..n)
                .find(|&i| {
                    let lat = [u[i], if model.n_fields() == 2 { u[n + i] } else { 0.0 }];
                    model.site_loglik(i, lat, theta) == f64::NEG_INFINITY
                })
                .unwrap_or(0);
            return Err(Error::Support { site });
        }
    }
    let mut candidates = Vec::new();
    if let Some(f) = init_fn {
        candidates.push(f());
    }
    candidates.push(vec![0.0; dim]);
    for u in candidates {
        let g = model::log_joint_with(model, prior, &u, theta);
        if g.is_finite() {
            return Ok((u, g));
        }
    }
    Err(Error::Support { site: 0 })
}

/// Damped Newton ascent on `G(.; theta)` with Armijo backtracking.
///
/// After the gradient test passes, one further full Newton step is taken
/// (kept only if it does not lower `G`), so that the returned mode is
/// accurate to rounding and nearby `theta` see a smooth objective.
pub fn inner_optimize<M: LatentGp + ?Sized>(
    model: &M,
    theta: &[f64],
    u_init: Option<&[f64]>,
    opts: &InnerOptions,
) -> Result<InnerResult> {
    inner_optimize_from(model, theta, u_init, None, true, opts)
}

fn inner_optimize_from<M: LatentGp + ?Sized>(
    model: &M,
    theta: &[f64],
    u_init: Option<&[f64]>,
    init_fn: Option<&dyn Fn() -> Vec<f64>>,
    strict: bool,
    opts: &InnerOptions,
) -> Result<InnerResult> {
    let prior = PriorState::new(model, theta)?;
    let precisions = prior.precisions();
    let k = model.n_fields();
    let (mut u, mut g) = starting_point(model, &prior, theta, u_init, init_fn, strict)?;
    let mut iterations = 0;
    let mut polished = false;
    loop {
        let terms = model::site_terms(model, &u, theta)?;
        let grad = model::gradient_from_terms(&terms, &prior, &u, k);
        let gnorm = max_abs(&grad);
        let neg_h = model::neg_hessian_from_terms(&terms, &precisions, k);
        let done = gnorm <= opts.grad_tol * (1.0 + g.abs());
        if done && polished {
            let factor = Cholesky::new(neg_h.as_ref()).map_err(|_| Error::IndefiniteHessian { attempts: 0 })?;
            return Ok(InnerResult { u_opt: u, neg_hess_factor: factor, g_at_opt: g, converged: true, iterations, grad_norm: gnorm });
        }
        if iterations >= opts.max_iter {
            return Err(Error::InnerNonConvergence { iterations, grad_norm: gnorm, best: u });
        }
        let factor = match Cholesky::new(neg_h.as_ref()) {
            Ok(c) => c,
            Err(_) => {
                let convex = model::neg_hessian_from_terms(&concave_terms(&terms), &precisions, k);
                damped_factor(&convex, opts.max_damping)?
            }
        };
        let step = factor.solve(&grad);
        let slope = linalg::dot(&grad, &step);
        iterations += 1;
        if done {
            polished = true;
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + b).collect();
            let gt = model::log_joint_with(model, &prior, &trial, theta);
            if gt >= g - 1e-14 * (1.0 + g.abs()) {
                u = trial;
                g = gt;
            }
            continue;
        }
        let mut accepted = false;
        if slope <= 1e3 * f64::EPSILON * (1.0 + g.abs()) {
            // the predicted gain is below the rounding of G, so G cannot
            // rank trial points: accept the Newton step if it shrinks the
            // gradient instead
            let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + b).collect();
            let gt = model::log_joint_with(model, &prior, &trial, theta);
            if gt.is_finite() {
                if let Ok(tt) = model::site_terms(model, &trial, theta) {
                    if max_abs(&model::gradient_from_terms(&tt, &prior, &trial, k)) < gnorm {
                        u = trial;
                        g = gt;
                        accepted = true;
                    }
                }
            }
        } else {
            let mut t = 1.0;
            for _ in 0..opts.max_backtracks {
                let trial: Vec<f64> = u.iter().zip(&step).map(|(a, b)| a + t * b).collect();
                if trial == u {
                    break;
                }
                let gt = model::log_joint_with(model, &prior, &trial, theta);
                if gt.is_finite() && gt >= g + 1e-4 * t * slope {
                    u = trial;
                    g = gt;
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
        }
        if !accepted {
            // no ascent possible in floating point: accept as stationary if
            // the gradient is near the rounding floor
            if gnorm <= 1e3 * opts.grad_tol * (1.0 + g.abs()) {
                polished = true;
                let factor = Cholesky::new(neg_h.as_ref()).map_err(|_| Error::IndefiniteHessian { attempts: opts.max_backtracks })?;
                return Ok(InnerResult { u_opt: u, neg_hess_factor: factor, g_at_opt: g, converged: polished, iterations, grad_norm: gnorm });
            }
            return Err(Error::InnerNonConvergence { iterations, grad_norm: gnorm, best: u });
        }
    }
}

/// Laplace approximation to `ln p(y | theta)`, including the `(2 pi)^{d/2}`
/// constant so that it is exact for linear-Gaussian models.
pub fn laplace_logml<M: LatentGp + ?Sized>(
    model: &M,
    theta: &[f64],
    warm: Option<&[f64]>,
    opts: &InnerOptions,
) -> Result<(f64, InnerResult)> {
    let inner = inner_optimize(model, theta, warm, opts)?;
    Ok((logml_from_inner(&inner), inner))
}

fn logml_from_inner(inner: &InnerResult) -> f64 {
    let d = inner.u_opt.len() as f64;
    inner.g_at_opt - 0.5 * inner.neg_hess_factor.log_det() + 0.5 * d * LN_2PI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OuterOptions {
    /// Central-difference step for the gradient, relative to `1 + |theta_j|`.
    pub grad_step: f64,
    /// Converged when the max-norm of the objective gradient falls below this.
    pub grad_tol: f64,
    /// Cap on line-search evaluations of the objective.
    pub max_evals: usize,
    /// Largest change of any coordinate in one quasi-Newton step.
    pub max_step: f64,
    /// Second-difference step for the covariance of `theta_hat`.
    pub hess_step: f64,
    /// Eigenvalue floor when a covariance has to be made positive definite.
    pub pd_floor: f64,
    pub inner: InnerOptions,
}

impl Default for OuterOptions {
    fn default() -> Self {
        Self {
            grad_step: 1e-5,
            grad_tol: 1e-3,
            max_evals: 500,
            max_step: 1.0,
            hess_step: 1e-3,
            pd_floor: 1e-8,
            inner: InnerOptions::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub converged: bool,
    pub outer_iterations: usize,
    /// Line-search evaluations of the objective.
    pub objective_evaluations: usize,
    /// Evaluations spent on finite-difference gradients and Hessians.
    pub fd_evaluations: usize,
    pub grad_norm: f64,
    pub inner_iterations_at_mode: usize,
    pub inner_grad_norm_at_mode: f64,
    /// The finite-difference Hessian needed eigenvalue clipping.
    pub v_theta_clipped: bool,
    pub wall_seconds: f64,
    pub options: OuterOptions,
}

/// Output of the nested Laplace fit in flattened form.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LaplaceFit {
    pub theta_hat: Vec<f64>,
    #[serde(with = "mat_serde")]
    pub v_theta: Mat<f64>,
    pub u_hat: Vec<f64>,
    #[serde(with = "mat_serde")]
    pub v_u: Mat<f64>,
    #[serde(with = "mat_serde")]
    pub j_u: Mat<f64>,
    pub laplace_logml_at_mode: f64,
    pub log_posterior_at_mode: f64,
    pub diagnostics: Diagnostics,
}

struct Objective<'a, M: LatentGp + ?Sized> {
    model: &'a M,
    opts: &'a OuterOptions,
    init_fn: Option<&'a (dyn Fn() -> Vec<f64> + Sync)>,
}

impl<M: LatentGp + ?Sized> Objective<'_, M> {
    /// `-(ln p_laplace(y | theta) + ln p(theta))`.
    fn eval(&self, theta: &[f64], warm: Option<&[f64]>) -> Result<(f64, InnerResult)> {
        let init: Option<&dyn Fn() -> Vec<f64>> = match self.init_fn {
            Some(f) => Some(f),
            None => None,
        };
        let inner = inner_optimize_from(self.model, theta, warm, init, false, &self.opts.inner)?;
        let f = -(logml_from_inner(&inner) + self.model.log_prior(theta));
        if !f.is_finite() {
            return Err(Error::Domain(format!("non-finite objective at {theta:?}")));
        }
        Ok((f, inner))
    }

    /// Central differences with every probe warm-started from `warm`.
    fn gradient(&self, theta: &[f64], f0: f64, warm: &[f64]) -> Result<Vec<f64>> {
        let p = theta.len();
        let vals = par::map(2 * p, |k| {
            let j = k / 2;
            let h = self.opts.grad_step * (1.0 + theta[j].abs());
            let mut t = theta.to_vec();
            t[j] += if k % 2 == 0 { h } else { -h };
            self.eval(&t, Some(warm)).map(|r| r.0).ok()
        });
        (0..p)
            .map(|j| {
                let h = self.opts.grad_step * (1.0 + theta[j].abs());
                match (vals[2 * j], vals[2 * j + 1]) {
                    (Some(fp), Some(fm)) => Ok((fp - fm) / (2.0 * h)),
                    (Some(fp), None) => Ok((fp - f0) / h),
                    (None, Some(fm)) => Ok((f0 - fm) / h),
                    (None, None) => Err(Error::Domain(format!("objective undefined around theta[{j}]"))),
                }
            })
            .collect()
    }

    /// Second-difference Hessian of the objective.
    fn hessian(&self, theta: &[f64], f0: f64, warm: &[f64]) -> Result<Mat<f64>> {
        let p = theta.len();
        let h: Vec<f64> = theta.iter().map(|t| self.opts.hess_step * (1.0 + t.abs())).collect();
        let mut probes: Vec<(usize, usize, f64, f64)> = Vec::new();
        for i in 0..p {
            probes.push((i, i, 1.0, 0.0));
            probes.push((i, i, -1.0, 0.0));
            for j in (i + 1)..p {
                for (si, sj) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                    probes.push((i, j, si, sj));
                }
            }
        }
        let vals = par::map(probes.len(), |k| {
            let (i, j, si, sj) = probes[k];
            let mut t = theta.to_vec();
            t[i] += si * h[i];
            if i != j {
                t[j] += sj * h[j];
            }
            self.eval(&t, Some(warm)).map(|r| r.0)
        });
        let vals = vals.into_iter().collect::<Result<Vec<_>>>()?;
        let mut hess = Mat::<f64>::zeros(p, p);
        let mut k = 0;
        for i in 0..p {
            hess[(i, i)] = (vals[k] - 2.0 * f0 + vals[k + 1]) / (h[i] * h[i]);
            k += 2;
            for j in (i + 1)..p {
                let v = (vals[k] - vals[k + 1] - vals[k + 2] + vals[k + 3]) / (4.0 * h[i] * h[j]);
                hess[(i, j)] = v;
                hess[(j, i)] = v;
                k += 4;
            }
        }
        Ok(hess)
    }
}

/// Quasi-Newton (BFGS) minimization of the negative Laplace log posterior
/// of `theta`, followed by the posterior covariance pieces at the mode.
pub fn outer_optimize_model<M: LatentGp + ?Sized>(model: &M, theta_init: &[f64], opts: &OuterOptions) -> Result<LaplaceFit> {
    fit_with_init(model, theta_init, opts, None)
}

fn fit_with_init<M: LatentGp + ?Sized>(
    model: &M,
    theta_init: &[f64],
    opts: &OuterOptions,
    init_fn: Option<&(dyn Fn() -> Vec<f64> + Sync)>,
) -> Result<LaplaceFit> {
    let start = Instant::now();
    let p = model.theta_dim();
    if theta_init.len() != p {
        return Err(Error::Dimension { expected: p, actual: theta_init.len() });
    }
    let obj = Objective { model, opts, init_fn };
    let mut theta = theta_init.to_vec();
    let (mut f, mut inner) = obj.eval(&theta, None)?;
    let mut evals = 1;
    let mut fd_evals = 2 * p;
    let mut grad = obj.gradient(&theta, f, &inner.u_opt)?;
    let mut hinv = identity(p);
    let mut first = true;
    let mut iterations = 0;
    let mut converged = false;

    loop {
        let gnorm = max_abs(&grad);
        if gnorm <= opts.grad_tol {
            converged = true;
            break;
        }
        if evals >= opts.max_evals {
            break;
        }
        let mut dir = neg_mat_vec(&hinv, &grad);
        let mut slope = linalg::dot(&grad, &dir);
        if !(slope < 0.0) {
            hinv = identity(p);
            dir = grad.iter().map(|g| -g).collect();
            slope = -linalg::dot(&grad, &grad);
        }
        let biggest = max_abs(&dir);
        if biggest > opts.max_step {
            let s = opts.max_step / biggest;
            dir.iter_mut().for_each(|d| *d *= s);
            slope *= s;
        }

        let mut t = 1.0;
        let mut next = None;
        while evals < opts.max_evals {
            let trial: Vec<f64> = theta.iter().zip(&dir).map(|(x, d)| x + t * d).collect();
            evals += 1;
            if let Ok((ft, it)) = obj.eval(&trial, Some(&inner.u_opt)) {
                if ft <= f + 1e-4 * t * slope {
                    next = Some((trial, ft, it));
                    break;
                }
            }
            t *= 0.5;
            if t < 1e-10 {
                break;
            }
        }
        let Some((theta_new, f_new, inner_new)) = next else {
            if !first && hinv != identity(p) {
                // retry along steepest descent before giving up
                hinv = identity(p);
                first = true;
                continue;
            }
            // no decrease representable: stationary up to noise
            converged = gnorm <= 100.0 * opts.grad_tol;
            break;
        };
        iterations += 1;
        let grad_new = obj.gradient(&theta_new, f_new, &inner_new.u_opt)?;
        fd_evals += 2 * p;
        let s: Vec<f64> = theta_new.iter().zip(&theta).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = grad_new.iter().zip(&grad).map(|(a, b)| a - b).collect();
        let sy = linalg::dot(&s, &y);
        if sy > 1e-12 * linalg::dot(&s, &s).sqrt() * linalg::dot(&y, &y).sqrt() {
            if first {
                let scale = sy / linalg::dot(&y, &y);
                hinv = Mat::from_fn(p, p, |i, j| if i == j { scale } else { 0.0 });
            }
            bfgs_update(&mut hinv, &s, &y, sy);
            first = false;
        }
        theta = theta_new;
        f = f_new;
        inner = inner_new;
        grad = grad_new;
    }

    let gnorm = max_abs(&grad);
    if !converged {
        return Err(Error::OuterNonConvergence { evaluations: evals, grad_norm: gnorm });
    }

    let hess = obj.hessian(&theta, f, &inner.u_opt)?;
    fd_evals += 2 * p * p;
    let (hess_pd, clipped) = match Cholesky::new(hess.as_ref()) {
        Ok(_) => (hess, false),
        Err(_) => linalg::clip_to_pd(hess.as_ref(), opts.pd_floor)?,
    };
    let mut v_theta = Cholesky::new(hess_pd.as_ref())?.inverse();
    linalg::symmetrize(&mut v_theta);

    let mut v_u = inner.neg_hess_factor.inverse();
    linalg::symmetrize(&mut v_u);
    let cross = model::cross_deriv_u_theta(model, &theta, &inner.u_opt)?;
    let j_u = inner.neg_hess_factor.solve_mat(cross);
    let logml = logml_from_inner(&inner);

    Ok(LaplaceFit {
        log_posterior_at_mode: -f,
        laplace_logml_at_mode: logml,
        theta_hat: theta,
        v_theta,
        u_hat: inner.u_opt.clone(),
        v_u,
        j_u,
        diagnostics: Diagnostics {
            converged,
            outer_iterations: iterations,
            objective_evaluations: evals,
            fd_evaluations: fd_evals,
            grad_norm: gnorm,
            inner_iterations_at_mode: inner.iterations,
            inner_grad_norm_at_mode: inner.grad_norm,
            v_theta_clipped: clipped,
            wall_seconds: start.elapsed().as_secs_f64(),
            options: *opts,
        },
    })
}

fn identity(p: usize) -> Mat<f64> {
    Mat::from_fn(p, p, |i, j| if i == j { 1.0 } else { 0.0 })
}

fn neg_mat_vec(a: &Mat<f64>, x: &[f64]) -> Vec<f64> {
    linalg::mat_vec(a.as_ref(), x).into_iter().map(|v| -v).collect()
}

/// Inverse-Hessian BFGS update.
fn bfgs_update(hinv: &mut Mat<f64>, s: &[f64], y: &[f64], sy: f64) {
    let p = s.len();
    let hy = linalg::mat_vec(hinv.as_ref(), y);
    let yhy = linalg::dot(y, &hy);
    let rho = 1.0 / sy;
    for i in 0..p {
        for j in 0..p {
            hinv[(i, j)] += rho * ((1.0 + rho * yhy) * s[i] * s[j] - hy[i] * s[j] - s[i] * hy[j]);
        }
    }
    linalg::symmetrize(hinv);
}

/// Joint Normal approximation of `(u, theta)` with a square root of its
/// covariance for sampling.
#[derive(Debug, Clone)]
pub struct JointPosterior {
    pub mean: Vec<f64>,
    pub cov: Mat<f64>,
    /// `root * root^T = cov`; lower-triangular unless `cov` is singular.
    pub root: Mat<f64>,
    pub latent_dim: usize,
    /// The assembled covariance was not positive semidefinite and had its
    /// eigenvalues clipped.
    pub clipped: bool,
}

impl JointPosterior {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Assembles `[[V_u + J V_theta J', J V_theta], [V_theta J', V_theta]]`.
pub fn joint_posterior(fit: &LaplaceFit) -> Result<JointPosterior> {
    let d = fit.u_hat.len();
    let p = fit.theta_hat.len();
    let jv = &fit.j_u * &fit.v_theta;
    let jvj = &jv * fit.j_u.transpose();
    let n = d + p;
    let mut cov = Mat::<f64>::zeros(n, n);
    for j in 0..d {
        for i in 0..d {
            cov[(i, j)] = fit.v_u[(i, j)] + jvj[(i, j)];
        }
    }
    for k in 0..p {
        for i in 0..d {
            cov[(i, d + k)] = jv[(i, k)];
            cov[(d + k, i)] = jv[(i, k)];
        }
        for l in 0..p {
            cov[(d + l, d + k)] = fit.v_theta[(l, k)];
        }
    }
    linalg::symmetrize(&mut cov);
    let (root, clipped) = linalg::psd_root(cov.as_ref(), fit.diagnostics.options.pd_floor)?;
    if clipped {
        cov = &root * root.transpose();
    }
    let mut mean = fit.u_hat.clone();
    mean.extend_from_slice(&fit.theta_hat);
    Ok(JointPosterior { mean, cov, root, latent_dim: d, clipped })
}

/// Settings of a GEV model fit beyond the data and variant.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitOptions {
    pub kernel: KernelSettings,
    pub prior: ThetaPrior,
    pub outer: OuterOptions,
}

/// A fitted spatial GEV model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub spec: ModelSpec,
    pub kernel: KernelSettings,
    pub prior: ThetaPrior,
    pub theta_names: Vec<String>,
    pub n_sites: usize,
    #[serde(flatten)]
    pub laplace: LaplaceFit,
}

impl FitResult {
    pub fn theta_hat(&self) -> Result<Hypers> {
        Hypers::from_vec(&self.spec, &self.kernel, &self.laplace.theta_hat)
    }

    pub fn u_hat(&self) -> Result<LatentField> {
        LatentField::from_stacked(self.n_sites, &self.laplace.u_hat)
    }

    pub fn joint_posterior(&self) -> Result<JointPosterior> {
        joint_posterior(&self.laplace)
    }

    /// The model the fit was computed for, over `data`.
    pub fn model(&self, data: &SiteDataset) -> Result<GevGpModel> {
        if data.n_sites() != self.n_sites {
            return Err(Error::Dimension { expected: self.n_sites, actual: data.n_sites() });
        }
        GevGpModel::new(data.clone(), self.spec, self.kernel)?.with_prior(self.prior.clone())
    }
}

/// Fits a spatial GEV model by nested Laplace approximation.
///
/// `theta_init` defaults to [`GevGpModel::default_theta_init`].
pub fn outer_optimize(data: &SiteDataset, spec: ModelSpec, theta_init: Option<&Hypers>, opts: &FitOptions) -> Result<FitResult> {
    let data = if data.transform == spec.transform { data.clone() } else { data.with_transform(spec.transform)? };
    let model = GevGpModel::new(data, spec, opts.kernel)?.with_prior(opts.prior.clone())?;
    let theta0 = match theta_init {
        Some(h) => h.to_vec(&spec)?,
        None => model.default_theta_init(),
    };
    let init = |theta: &[f64]| gev_latent_start(&model, theta);
    let theta_for_init = theta0.clone();
    let init_fn = move || init(&theta_for_init);
    let laplace = fit_with_init(&model, &theta0, &opts.outer, Some(&init_fn))?;
    Ok(FitResult {
        spec,
        kernel: opts.kernel,
        prior: opts.prior.clone(),
        theta_names: spec.theta_names().into_iter().map(String::from).collect(),
        n_sites: model.data.n_sites(),
        laplace,
    })
}

/// Cold-start latent values for the GEV model: each site's location at its
/// smallest observation and log-scales at zero, which lies in the support
/// for any positive shape.
fn gev_latent_start(model: &GevGpModel, _theta: &[f64]) -> Vec<f64> {
    let n = model.data.n_sites();
    let mut u: Vec<f64> = model.data.obs.iter().map(|ys| ys.iter().copied().fold(f64::INFINITY, f64::min)).collect();
    if model.spec.b_random {
        u.extend(std::iter::repeat_n(0.0, n));
    }
    u
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn concave_projection_of_site_blocks() {
        let t = |h: [f64; 3]| model::SiteTerm { value: 0.0, grad: [0.0; 2], hess: h };
        let out = concave_terms(&[t([-2.0, 0.5, -1.0]), t([1.0, 0.0, -3.0]), t([-1.0, 2.0, -1.0])]);
        assert_eq!(out[0].hess, [-2.0, 0.5, -1.0]);
        assert_eq!(out[1].hess, [0.0, 0.0, -3.0]);
        // [[1, -2], [-2, 1]] negated has eigenvalues 3 and -1; keep the 3 part
        let h = out[2].hess;
        for (got, want) in h.iter().zip([-1.5, 1.5, -1.5]) {
            assert!((got - want).abs() < 1e-14, "{h:?}");
        }
    }
    use crate::kernel::{self, KernelForm};
    use crate::model::{GaussianSurrogate, Jitter};
    use crate::simstudy::tests_support::fit_options;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn surrogate(n: usize, seed: u64) -> GaussianSurrogate {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coords = (0..n).map(|_| [rng.random::<f64>() * 3.0, rng.random::<f64>() * 3.0]).collect::<Vec<_>>();
        let y = (0..n).map(|i| (coords[i][0]).sin() + 0.3 * rng.random::<f64>()).collect();
        GaussianSurrogate::new(coords, y, 0.2, KernelSettings::default()).unwrap()
    }

    #[test]
    fn gaussian_mode_matches_closed_form() {
        let m = surrogate(8, 1);
        let theta = [0.3, 0.2];
        let r = inner_optimize(&m, &theta, None, &InnerOptions::default()).unwrap();
        let exact = m.analytic_posterior_mean(&theta).unwrap();
        for (a, b) in r.u_opt.iter().zip(&exact) {
            assert!((a - b).abs() < 1e-8);
        }
        assert!(r.converged);
    }

    #[test]
    fn prior_only_mode_is_zero() {
        let mut m = surrogate(5, 2);
        m.data_weight = 0.0;
        let r = inner_optimize(&m, &[0.0, 0.0], Some(&[1.0, -1.0, 0.5, 2.0, 0.0]), &InnerOptions::default()).unwrap();
        assert!(max_abs(&r.u_opt) < 1e-10);
    }

    #[test]
    fn warm_start_at_mode_takes_at_most_one_step() {
        let m = surrogate(6, 3);
        let theta = [0.1, -0.2];
        let r = inner_optimize(&m, &theta, None, &InnerOptions::default()).unwrap();
        let again = inner_optimize(&m, &theta, Some(&r.u_opt), &InnerOptions::default()).unwrap();
        assert!(again.iterations <= 1);
    }

    #[test]
    fn inner_gradient_below_tolerance() {
        let data = crate::simstudy::tests_support::small_dataset(6, 3, 5);
        let model = GevGpModel::new(data, ModelSpec::M1, KernelSettings::default()).unwrap();
        let theta = [-1.5, 0.0, 0.3, -1.0, 0.3];
        let r = inner_optimize_from(&model, &theta, None, Some(&|| gev_latent_start(&model, &theta)), true, &InnerOptions::default()).unwrap();
        let g = model::grad_u(&model, &r.u_opt, &theta).unwrap();
        assert!(max_abs(&g) <= 1e-8 * (1.0 + r.g_at_opt.abs()));
    }

    #[test]
    fn iteration_cap_reports_best_iterate() {
        let data = crate::simstudy::tests_support::small_dataset(5, 2, 6);
        let model = GevGpModel::new(data, ModelSpec::M2, KernelSettings::default()).unwrap();
        let opts = InnerOptions { max_iter: 1, ..Default::default() };
        let u0 = gev_latent_start(&model, &[0.0; 4]);
        match inner_optimize(&model, &[0.0, 0.0, 0.0, 0.0], Some(&u0), &opts) {
            Err(Error::InnerNonConvergence { best, iterations, .. }) => {
                assert_eq!(best.len(), 10);
                assert_eq!(iterations, 1);
            }
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }

    #[test]
    fn laplace_exact_for_gaussian_models() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let m = surrogate(10, 4);
        for _ in 0..10 {
            let theta = [rng.random::<f64>() * 2.0 - 1.0, rng.random::<f64>() * 2.0 - 1.0];
            let (l, _) = laplace_logml(&m, &theta, None, &InnerOptions::default()).unwrap();
            let exact = m.analytic_log_marginal(&theta).unwrap();
            assert!((l - exact).abs() < 1e-8, "{l} vs {exact}");
        }
    }

    #[test]
    fn log_det_matches_dense_recomputation_under_jitter_change() {
        let data = crate::simstudy::tests_support::small_dataset(5, 2, 8);
        let theta = [0.0, 0.2, -0.5, 0.1];
        for jitter in [1e-6, 2e-6] {
            let settings = KernelSettings { form: KernelForm::Exponential, jitter: Jitter::Relative(jitter) };
            let model = GevGpModel::new(data.clone(), ModelSpec::M2, settings).unwrap();
            let (_, r) = laplace_logml(&model, &theta, Some(&gev_latent_start(&model, &theta)), &InnerOptions::default()).unwrap();
            let h = model::hess_u(&model, &r.u_opt, &theta).unwrap();
            let neg = Mat::from_fn(h.nrows(), h.ncols(), |i, j| -h[(i, j)]);
            let dense = neg.determinant().ln();
            assert!((r.neg_hess_factor.log_det() - dense).abs() < 1e-10 * (1.0 + dense.abs()));
        }
    }

    fn maximize_analytic(m: &GaussianSurrogate, start: [f64; 2]) -> [f64; 2] {
        // Newton on the analytic marginal with finite-difference derivatives
        // at a larger step, then a golden-section polish per coordinate.
        let f = |t: [f64; 2]| m.analytic_log_marginal(&t).unwrap();
        let mut x = start;
        for _ in 0..200 {
            let h = 1e-4;
            let g = [
                (f([x[0] + h, x[1]]) - f([x[0] - h, x[1]])) / (2.0 * h),
                (f([x[0], x[1] + h]) - f([x[0], x[1] - h])) / (2.0 * h),
            ];
            let f0 = f(x);
            let hxx = (f([x[0] + h, x[1]]) - 2.0 * f0 + f([x[0] - h, x[1]])) / (h * h);
            let hyy = (f([x[0], x[1] + h]) - 2.0 * f0 + f([x[0], x[1] - h])) / (h * h);
            let hxy = (f([x[0] + h, x[1] + h]) - f([x[0] + h, x[1] - h]) - f([x[0] - h, x[1] + h]) + f([x[0] - h, x[1] - h])) / (4.0 * h * h);
            let det = hxx * hyy - hxy * hxy;
            let step = if hxx < 0.0 && det > 0.0 {
                [-(hyy * g[0] - hxy * g[1]) / det, -(-hxy * g[0] + hxx * g[1]) / det]
            } else {
                [0.1 * g[0], 0.1 * g[1]]
            };
            let mut t = 1.0;
            while f([x[0] + t * step[0], x[1] + t * step[1]]) < f0 && t > 1e-8 {
                t *= 0.5;
            }
            x = [x[0] + t * step[0], x[1] + t * step[1]];
            if g[0].abs().max(g[1].abs()) < 1e-9 {
                break;
            }
        }
        x
    }

    #[test]
    fn outer_mode_matches_analytic_marginal() {
        // data drawn from the model itself so the marginal has an interior mode
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let coords: Vec<_> = (0..25).map(|_| [rng.random::<f64>() * 4.0, rng.random::<f64>() * 4.0]).collect();
        let cfg = KernelSettings::default().config(0.0, (0.8f64).ln());
        let field = kernel::mvn_sample(&[0.0; 25], &kernel::build_cov(&coords, &cfg).unwrap(), 1, 5).unwrap().remove(0);
        let y = field.iter().map(|f| f + 0.3 * rng.sample::<f64, _>(rand_distr::StandardNormal)).collect();
        let m = GaussianSurrogate::new(coords, y, 0.09, KernelSettings::default()).unwrap();
        let opts = OuterOptions { grad_tol: 1e-6, ..Default::default() };
        let fit = outer_optimize_model(&m, &[0.0, 0.0], &opts).unwrap();
        let direct = maximize_analytic(&m, [0.0, 0.0]);
        for j in 0..2 {
            assert!((fit.theta_hat[j] - direct[j]).abs() <= 1e-4, "{:?} vs {direct:?}", fit.theta_hat);
        }
        assert!(fit.diagnostics.converged);
    }

    #[test]
    fn jacobian_matches_reoptimized_modes() {
        let data = crate::simstudy::tests_support::small_dataset(5, 3, 31);
        let model = GevGpModel::new(data, ModelSpec::M1, KernelSettings::default()).unwrap();
        let theta = vec![-1.2, 0.0, 0.4, -1.0, 0.4];
        let u0 = gev_latent_start(&model, &theta);
        let r = inner_optimize(&model, &theta, Some(&u0), &InnerOptions::default()).unwrap();
        let cross = model::cross_deriv_u_theta(&model, &theta, &r.u_opt).unwrap();
        let j_u = r.neg_hess_factor.solve_mat(cross);
        for j in 0..theta.len() {
            let h = 1e-4;
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[j] += h;
            tm[j] -= h;
            let up = inner_optimize(&model, &tp, Some(&r.u_opt), &InnerOptions::default()).unwrap().u_opt;
            let um = inner_optimize(&model, &tm, Some(&r.u_opt), &InnerOptions::default()).unwrap().u_opt;
            let fd: Vec<f64> = up.iter().zip(&um).map(|(a, b)| (a - b) / (2.0 * h)).collect();
            let num: f64 = fd.iter().enumerate().map(|(i, v)| (v - j_u[(i, j)]).powi(2)).sum::<f64>().sqrt();
            let den: f64 = fd.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!(num <= 1e-3 * den.max(1e-8), "column {j}: {num} / {den}");
        }
    }

    fn toy_fit() -> LaplaceFit {
        let data = crate::simstudy::tests_support::small_dataset(4, 5, 41);
        let spec = ModelSpec::M2;
        let fit = outer_optimize(&data, spec, None, &fit_options(&spec)).unwrap();
        fit.laplace
    }

    #[test]
    fn joint_covariance_blocks_and_schur_complement() {
        let fit = toy_fit();
        let jp = joint_posterior(&fit).unwrap();
        let d = fit.u_hat.len();
        let p = fit.theta_hat.len();
        assert!(!jp.clipped);
        // Schur complement of the theta block recovers V_u
        let a = Mat::from_fn(d, d, |i, j| jp.cov[(i, j)]);
        let b = Mat::from_fn(d, p, |i, j| jp.cov[(i, d + j)]);
        let c = Cholesky::new(fit.v_theta.as_ref()).unwrap();
        let schur = &a - &b * c.solve_mat(b.transpose().to_owned());
        for i in 0..d {
            for j in 0..d {
                assert!((schur[(i, j)] - fit.v_u[(i, j)]).abs() < 1e-9 * (1.0 + fit.v_u[(i, j)].abs()));
            }
        }
        for i in 0..d + p {
            for j in 0..d + p {
                assert_eq!(jp.cov[(i, j)], jp.cov[(j, i)]);
            }
        }
    }

    #[test]
    fn zero_jacobian_gives_block_diagonal() {
        let mut fit = toy_fit();
        fit.j_u = Mat::zeros(fit.j_u.nrows(), fit.j_u.ncols());
        let jp = joint_posterior(&fit).unwrap();
        let d = fit.u_hat.len();
        for i in 0..d {
            for k in 0..fit.theta_hat.len() {
                assert_eq!(jp.cov[(i, d + k)], 0.0);
            }
        }
    }

    #[test]
    fn fit_result_round_trips_through_json() {
        let data = crate::simstudy::tests_support::small_dataset(4, 3, 42);
        let fit = outer_optimize(&data, ModelSpec::M4, None, &fit_options(&ModelSpec::M4)).unwrap();
        let s = serde_json::to_string(&fit).unwrap();
        let back: FitResult = serde_json::from_str(&s).unwrap();
        assert_eq!(back.laplace.theta_hat, fit.laplace.theta_hat);
        assert_eq!(back.laplace.v_u, fit.laplace.v_u);
        assert_eq!(back.theta_hat().unwrap().b_fixed, fit.theta_hat().unwrap().b_fixed);
    }

    #[test]
    fn parallel_and_sequential_fits_agree() {
        let data = crate::simstudy::tests_support::small_dataset(5, 3, 43);
        let a = outer_optimize(&data, ModelSpec::M2, None, &fit_options(&ModelSpec::M2)).unwrap();
        let b = par::sequential(|| outer_optimize(&data, ModelSpec::M2, None, &fit_options(&ModelSpec::M2)).unwrap());
        assert_eq!(a.laplace.theta_hat, b.laplace.theta_hat);
        assert_eq!(a.laplace.u_hat, b.laplace.u_hat);
    }

    #[test]
    fn gumbel_objective_is_scale_equivariant() {
        // y -> c y maps a -> c a, b -> b + ln c, sigma2 -> c^2 sigma2;
        // the maximized log-likelihood shifts by -N ln c.
        let data = crate::simstudy::tests_support::small_dataset(4, 4, 44);
        let c: f64 = 3.0;
        let scaled = SiteDataset::new(
            data.coords.clone(),
            data.obs.iter().map(|v| v.iter().map(|y| c * y).collect()).collect(),
            data.transform,
        )
        .unwrap();
        let settings = KernelSettings { form: KernelForm::Exponential, jitter: Jitter::Relative(1e-6) };
        let m1 = GevGpModel::new(data.clone(), ModelSpec::M4, settings).unwrap();
        let m2 = GevGpModel::new(scaled, ModelSpec::M4, settings).unwrap();
        let theta = [0.5, 0.3, 0.2];
        let theta_c = [0.5 + 2.0 * c.ln(), 0.3, 0.2 + c.ln()];
        let u1 = gev_latent_start(&m1, &theta);
        let u2: Vec<f64> = u1.iter().map(|x| c * x).collect();
        let (l1, _) = laplace_logml(&m1, &theta, Some(&u1), &InnerOptions::default()).unwrap();
        let (l2, _) = laplace_logml(&m2, &theta_c, Some(&u2), &InnerOptions::default()).unwrap();
        let n_obs = data.n_obs() as f64;
        assert!((l2 - (l1 - n_obs * c.ln())).abs() < 1e-8, "{l1} {l2}");
        let _ = kernel::DEFAULT_RELATIVE_JITTER;
    }
}
