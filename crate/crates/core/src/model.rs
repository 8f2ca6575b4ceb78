//! The joint log-density of data and latent fields, its analytic
//! derivatives in the latent field, and the model variants.
//!
//! The Laplace engine works on any [`LatentGp`]: a site-separable
//! log-likelihood over one or two latent fields, each carrying an
//! independent zero-mean GP prior. [`GevGpModel`] is the spatial GEV model;
//! [`GaussianSurrogate`] is a conjugate linear-Gaussian model used to check
//! the engine against closed forms.

use faer::Mat;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::{self, Shape};
use crate::kernel::{self, Coord, CovMatrix, KernelConfig, KernelForm, DEFAULT_RELATIVE_JITTER};
use crate::par;

/// How the GEV shape enters the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeSpec {
    /// `s = ln(shape)` is an estimated fixed effect.
    EstimatedPositive,
    /// Gumbel: shape fixed at zero.
    FixedZero,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transform {
    #[default]
    None,
    Log,
}

/// One of the four supported model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub b_random: bool,
    pub shape: ShapeSpec,
    pub transform: Transform,
}

impl ModelSpec {
    /// Random `a` and `b`, estimated positive shape.
    pub const M1: ModelSpec = ModelSpec { b_random: true, shape: ShapeSpec::EstimatedPositive, transform: Transform::None };
    /// Random `a` and `b`, Gumbel.
    pub const M2: ModelSpec = ModelSpec { b_random: true, shape: ShapeSpec::FixedZero, transform: Transform::None };
    /// As `M2` on log-transformed data.
    pub const M3: ModelSpec = ModelSpec { b_random: true, shape: ShapeSpec::FixedZero, transform: Transform::Log };
    /// Random `a`, fixed `b`, Gumbel.
    pub const M4: ModelSpec = ModelSpec { b_random: false, shape: ShapeSpec::FixedZero, transform: Transform::None };

    pub fn new(b_random: bool, shape: ShapeSpec, transform: Transform) -> Result<Self> {
        let spec = ModelSpec { b_random, shape, transform };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name().is_some() {
            Ok(())
        } else {
            Err(Error::Validation(format!("unsupported model variant {self:?}")))
        }
    }

    pub fn name(&self) -> Option<&'static str> {
        [("M1", Self::M1), ("M2", Self::M2), ("M3", Self::M3), ("M4", Self::M4)]
            .into_iter()
            .find(|(_, s)| s == self)
            .map(|(n, _)| n)
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "m1" => Ok(Self::M1),
            "m2" => Ok(Self::M2),
            "m3" => Ok(Self::M3),
            "m4" => Ok(Self::M4),
            other => Err(Error::Validation(format!("unknown model '{other}' (expected m1..m4)"))),
        }
    }

    pub fn n_fields(&self) -> usize {
        if self.b_random {
            2
        } else {
            1
        }
    }

    pub fn theta_names(&self) -> Vec<&'static str> {
        let mut names = Vec::new();
        if self.shape == ShapeSpec::EstimatedPositive {
            names.push("s");
        }
        names.extend(["log_sigma2_a", "log_lambda_a"]);
        if self.b_random {
            names.extend(["log_sigma2_b", "log_lambda_b"]);
        } else {
            names.push("b");
        }
        names
    }

    pub fn theta_dim(&self) -> usize {
        self.theta_names().len()
    }
}

/// Diagonal nugget rule applied whenever kernel hyperparameters change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Jitter {
    /// Fraction of the kernel amplitude.
    Relative(f64),
    Absolute(f64),
}

impl Default for Jitter {
    fn default() -> Self {
        Jitter::Relative(DEFAULT_RELATIVE_JITTER)
    }
}

impl Jitter {
    pub fn value(&self, sigma2: f64) -> f64 {
        match *self {
            Jitter::Relative(r) => r * sigma2,
            Jitter::Absolute(j) => j,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelSettings {
    #[serde(default)]
    pub form: KernelForm,
    #[serde(default)]
    pub jitter: Jitter,
}

impl KernelSettings {
    pub fn config(&self, log_sigma2: f64, log_lambda: f64) -> KernelConfig {
        KernelConfig {
            log_sigma2,
            log_lambda,
            jitter: self.jitter.value(log_sigma2.exp()),
            form: self.form,
        }
    }
}

/// Optional prior on the flattened hyperparameter vector. The default is the
/// flat (improper) prior, which contributes nothing.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaPrior {
    #[default]
    Flat,
    /// Independent Normals per coordinate.
    Normal { mean: Vec<f64>, sd: Vec<f64> },
}

impl ThetaPrior {
    pub fn log_density(&self, theta: &[f64]) -> f64 {
        match self {
            ThetaPrior::Flat => 0.0,
            ThetaPrior::Normal { mean, sd } => theta
                .iter()
                .zip(mean.iter().zip(sd))
                .map(|(t, (m, s))| {
                    let z = (t - m) / s;
                    -0.5 * z * z - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
                })
                .sum(),
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if let ThetaPrior::Normal { mean, sd } = self {
            if mean.len() != dim || sd.len() != dim {
                return Err(Error::Dimension { expected: dim, actual: mean.len().min(sd.len()) });
            }
            if sd.iter().any(|s| !(*s > 0.0)) {
                return Err(Error::Validation("prior standard deviations must be positive".into()));
            }
        }
        Ok(())
    }
}

/// Fixed effects and kernel hyperparameters in structured form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hypers {
    pub shape: Shape,
    pub kernel_a: KernelConfig,
    pub kernel_b: Option<KernelConfig>,
    pub b_fixed: Option<f64>,
}

impl Hypers {
    /// Flattens to the optimizer's parameter vector for `spec`.
    pub fn to_vec(&self, spec: &ModelSpec) -> Result<Vec<f64>> {
        self.check(spec)?;
        let mut v = Vec::with_capacity(5);
        if let Shape::LogShape(s) = self.shape {
            v.push(s);
        }
        v.extend([self.kernel_a.log_sigma2, self.kernel_a.log_lambda]);
        match (self.kernel_b, self.b_fixed) {
            (Some(kb), None) => v.extend([kb.log_sigma2, kb.log_lambda]),
            (None, Some(b)) => v.push(b),
            _ => unreachable!("checked above"),
        }
        Ok(v)
    }

    pub fn from_vec(spec: &ModelSpec, kernel: &KernelSettings, theta: &[f64]) -> Result<Self> {
        if theta.len() != spec.theta_dim() {
            return Err(Error::Dimension { expected: spec.theta_dim(), actual: theta.len() });
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(Error::Domain(format!("non-finite hyperparameters {theta:?}")));
        }
        let mut it = theta.iter().copied();
        let shape = match spec.shape {
            ShapeSpec::EstimatedPositive => Shape::LogShape(it.next().unwrap()),
            ShapeSpec::FixedZero => Shape::Gumbel,
        };
        let kernel_a = kernel.config(it.next().unwrap(), it.next().unwrap());
        let (kernel_b, b_fixed) = if spec.b_random {
            (Some(kernel.config(it.next().unwrap(), it.next().unwrap())), None)
        } else {
            (None, Some(it.next().unwrap()))
        };
        Ok(Hypers { shape, kernel_a, kernel_b, b_fixed })
    }

    fn check(&self, spec: &ModelSpec) -> Result<()> {
        let shape_ok = matches!(
            (spec.shape, self.shape),
            (ShapeSpec::EstimatedPositive, Shape::LogShape(_)) | (ShapeSpec::FixedZero, Shape::Gumbel)
        );
        let b_ok = match (self.kernel_b.is_some(), self.b_fixed.is_some()) {
            (true, false) => spec.b_random,
            (false, true) => !spec.b_random,
            _ => false,
        };
        if shape_ok && b_ok {
            Ok(())
        } else {
            Err(Error::Validation(format!("hyperparameters do not match model {:?}", spec.name())))
        }
    }

    /// The model variant implied by this parameter set (no transform).
    pub fn implied_spec(&self) -> Result<ModelSpec> {
        let shape = match self.shape {
            Shape::LogShape(_) => ShapeSpec::EstimatedPositive,
            Shape::Gumbel => ShapeSpec::FixedZero,
        };
        let spec = ModelSpec { b_random: self.kernel_b.is_some(), shape, transform: Transform::None };
        self.check(&spec)?;
        spec.validate()?;
        Ok(spec)
    }
}

/// Latent random effects at the observed sites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentField {
    pub a: Vec<f64>,
    pub b: Option<Vec<f64>>,
}

impl LatentField {
    pub fn zeros(n: usize, b_random: bool) -> Self {
        Self { a: vec![0.0; n], b: b_random.then(|| vec![0.0; n]) }
    }

    /// `u = (a, b)`.
    pub fn stack(&self) -> Vec<f64> {
        let mut u = self.a.clone();
        if let Some(b) = &self.b {
            u.extend_from_slice(b);
        }
        u
    }

    pub fn from_stacked(n: usize, u: &[f64]) -> Result<Self> {
        match u.len() {
            l if l == n => Ok(Self { a: u.to_vec(), b: None }),
            l if l == 2 * n => Ok(Self { a: u[..n].to_vec(), b: Some(u[n..].to_vec()) }),
            l => Err(Error::Dimension { expected: 2 * n, actual: l }),
        }
    }

    pub fn n_sites(&self) -> usize {
        self.a.len()
    }
}

/// Sites with their extreme-value observations.
///
/// `obs` holds values on the modelling scale: with [`Transform::Log`] the
/// logarithm was taken once at construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDataset {
    pub coords: Vec<Coord>,
    pub obs: Vec<Vec<f64>>,
    pub transform: Transform,
}

impl SiteDataset {
    /// Builds a dataset from raw (original-scale) observations.
    pub fn new(coords: Vec<Coord>, raw_obs: Vec<Vec<f64>>, transform: Transform) -> Result<Self> {
        if coords.len() != raw_obs.len() {
            return Err(Error::Dimension { expected: coords.len(), actual: raw_obs.len() });
        }
        if coords.is_empty() {
            return Err(Error::Validation("dataset has no sites".into()));
        }
        for (i, (c, ys)) in coords.iter().zip(&raw_obs).enumerate() {
            if !(c[0].is_finite() && c[1].is_finite()) {
                return Err(Error::Validation(format!("site {i} has non-finite coordinates")));
            }
            if ys.is_empty() {
                return Err(Error::Validation(format!("site {i} has no observations")));
            }
            if ys.iter().any(|y| !y.is_finite()) {
                return Err(Error::Validation(format!("site {i} has a non-finite observation")));
            }
            if transform == Transform::Log && ys.iter().any(|&y| y <= 0.0) {
                return Err(Error::Validation(format!("site {i}: log transform needs positive observations")));
            }
        }
        let obs = match transform {
            Transform::None => raw_obs,
            Transform::Log => raw_obs.into_iter().map(|ys| ys.into_iter().map(f64::ln).collect()).collect(),
        };
        Ok(Self { coords, obs, transform })
    }

    pub fn n_sites(&self) -> usize {
        self.coords.len()
    }

    pub fn n_obs(&self) -> usize {
        self.obs.iter().map(Vec::len).sum()
    }

    /// Observations of site `i` on the original scale.
    pub fn raw_obs(&self, i: usize) -> Vec<f64> {
        match self.transform {
            Transform::None => self.obs[i].clone(),
            Transform::Log => self.obs[i].iter().map(|y| y.exp()).collect(),
        }
    }

    /// Same sites and original-scale values under another transform.
    pub fn with_transform(&self, transform: Transform) -> Result<Self> {
        let raw = (0..self.n_sites()).map(|i| self.raw_obs(i)).collect();
        Self::new(self.coords.clone(), raw, transform)
    }

    /// Median pairwise site distance (0 for a single site).
    pub fn median_pairwise_distance(&self) -> f64 {
        let n = self.n_sites();
        let mut d = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in (i + 1)..n {
                d.push(kernel::distance(&self.coords[i], &self.coords[j]));
            }
        }
        if d.is_empty() {
            return 0.0;
        }
        d.sort_by(f64::total_cmp);
        let m = d.len();
        if m % 2 == 1 {
            d[m / 2]
        } else {
            0.5 * (d[m / 2 - 1] + d[m / 2])
        }
    }

    /// Pooled Gumbel moment estimates `(location, log scale, sd)` of the
    /// observations on the modelling scale.
    fn gumbel_moments(&self) -> (f64, f64, f64) {
        let all: Vec<f64> = self.obs.iter().flatten().copied().collect();
        let n = all.len() as f64;
        let m = all.iter().sum::<f64>() / n;
        let sd = if all.len() < 2 { 0.0 } else { (all.iter().map(|y| (y - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
        let scale = if sd > 0.0 { sd * 6f64.sqrt() / std::f64::consts::PI } else { 1.0 };
        (m - 0.577_215_664_901_532_9 * scale, scale.ln(), sd)
    }
}

/// Per-site log-likelihood value with gradient and Hessian in the site's
/// latent values. Hessian entries are `(00, 01, 11)`; unused slots are zero
/// for single-field models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SiteTerm {
    pub value: f64,
    pub grad: [f64; 2],
    pub hess: [f64; 3],
}

/// A latent Gaussian model with site-separable likelihood.
///
/// The stacked latent vector is field-major: `u[f * n + i]` is field `f`
/// at site `i`.
pub trait LatentGp: Sync {
    fn coords(&self) -> &[Coord];

    /// Number of latent fields (1 or 2).
    fn n_fields(&self) -> usize;

    fn theta_dim(&self) -> usize;

    /// Kernel of each latent field at `theta`.
    fn kernels(&self, theta: &[f64]) -> Result<Vec<KernelConfig>>;

    /// Log-likelihood of site `i`; `-inf` outside the support.
    fn site_loglik(&self, i: usize, latent: [f64; 2], theta: &[f64]) -> f64;

    /// `None` outside the support.
    fn site_term(&self, i: usize, latent: [f64; 2], theta: &[f64]) -> Option<SiteTerm>;

    fn log_prior(&self, _theta: &[f64]) -> f64 {
        0.0
    }

    fn n_sites(&self) -> usize {
        self.coords().len()
    }

    fn latent_dim(&self) -> usize {
        self.n_sites() * self.n_fields()
    }
}

/// Factorized GP prior blocks at one value of `theta`.
#[derive(Debug, Clone)]
pub struct PriorState {
    pub covs: Vec<CovMatrix>,
}

impl PriorState {
    pub fn new<M: LatentGp + ?Sized>(model: &M, theta: &[f64]) -> Result<Self> {
        if theta.len() != model.theta_dim() {
            return Err(Error::Dimension { expected: model.theta_dim(), actual: theta.len() });
        }
        let kernels = model.kernels(theta)?;
        let covs = kernels
            .iter()
            .map(|k| kernel::build_cov(model.coords(), k))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { covs })
    }

    /// Sum of the GP prior log densities of the stacked field.
    pub fn log_density(&self, u: &[f64]) -> f64 {
        let n = self.covs[0].dim();
        self.covs
            .iter()
            .enumerate()
            .map(|(f, c)| {
                let w = c.cholesky().solve_lower(&u[f * n..(f + 1) * n]);
                kernel::mvn_logpdf_whitened(&w, c.log_det())
            })
            .sum()
    }

    /// `Sigma^{-1} u` blockwise.
    pub fn precision_times(&self, u: &[f64]) -> Vec<f64> {
        let n = self.covs[0].dim();
        let mut out = Vec::with_capacity(u.len());
        for (f, c) in self.covs.iter().enumerate() {
            out.extend(c.solve(&u[f * n..(f + 1) * n]));
        }
        out
    }

    pub fn precisions(&self) -> Vec<Mat<f64>> {
        self.covs.iter().map(CovMatrix::precision).collect()
    }
}

#[inline]
fn site_latent(u: &[f64], n: usize, n_fields: usize, i: usize) -> [f64; 2] {
    [u[i], if n_fields == 2 { u[n + i] } else { 0.0 }]
}

fn check_latent<M: LatentGp + ?Sized>(model: &M, u: &[f64]) -> Result<()> {
    if u.len() != model.latent_dim() {
        return Err(Error::Dimension { expected: model.latent_dim(), actual: u.len() });
    }
    Ok(())
}

/// Sum of site log-likelihoods, `-inf` if any site is outside the support.
pub fn loglik_total<M: LatentGp + ?Sized>(model: &M, u: &[f64], theta: &[f64]) -> f64 {
    let n = model.n_sites();
    let k = model.n_fields();
    let mut total = 0.0;
    for i in 0..n {
        let v = model.site_loglik(i, site_latent(u, n, k, i), theta);
        if v == f64::NEG_INFINITY {
            return v;
        }
        total += v;
    }
    total
}

/// `G(u; theta)` with a prepared prior.
pub fn log_joint_with<M: LatentGp + ?Sized>(model: &M, prior: &PriorState, u: &[f64], theta: &[f64]) -> f64 {
    let ll = loglik_total(model, u, theta);
    if ll == f64::NEG_INFINITY {
        return ll;
    }
    ll + prior.log_density(u)
}

/// `G(u; theta)`: log of the joint density of data and latent field.
pub fn log_joint<M: LatentGp + ?Sized>(model: &M, u: &[f64], theta: &[f64]) -> Result<f64> {
    check_latent(model, u)?;
    let prior = PriorState::new(model, theta)?;
    Ok(log_joint_with(model, &prior, u, theta))
}

/// Site terms at `u`; errors on the first site outside the support.
pub fn site_terms<M: LatentGp + ?Sized>(model: &M, u: &[f64], theta: &[f64]) -> Result<Vec<SiteTerm>> {
    let n = model.n_sites();
    let k = model.n_fields();
    (0..n)
        .map(|i| model.site_term(i, site_latent(u, n, k, i), theta).ok_or(Error::Support { site: i }))
        .collect()
}

/// Gradient of `G` in `u` from precomputed site terms.
pub fn gradient_from_terms(terms: &[SiteTerm], prior: &PriorState, u: &[f64], n_fields: usize) -> Vec<f64> {
    let n = terms.len();
    let mut g = prior.precision_times(u);
    for x in g.iter_mut() {
        *x = -*x;
    }
    for (i, t) in terms.iter().enumerate() {
        g[i] += t.grad[0];
        if n_fields == 2 {
            g[n + i] += t.grad[1];
        }
    }
    g
}

/// Negative Hessian `-d^2 G / du du^T` from site terms and prior precisions.
pub fn neg_hessian_from_terms(terms: &[SiteTerm], precisions: &[Mat<f64>], n_fields: usize) -> Mat<f64> {
    let n = terms.len();
    let dim = n * n_fields;
    let mut h = Mat::<f64>::zeros(dim, dim);
    for (f, p) in precisions.iter().enumerate() {
        let off = f * n;
        for j in 0..n {
            for i in 0..n {
                h[(off + i, off + j)] = p[(i, j)];
            }
        }
    }
    for (i, t) in terms.iter().enumerate() {
        h[(i, i)] -= t.hess[0];
        if n_fields == 2 {
            h[(n + i, n + i)] -= t.hess[2];
            h[(i, n + i)] -= t.hess[1];
            h[(n + i, i)] -= t.hess[1];
        }
    }
    h
}

pub fn grad_u<M: LatentGp + ?Sized>(model: &M, u: &[f64], theta: &[f64]) -> Result<Vec<f64>> {
    check_latent(model, u)?;
    let prior = PriorState::new(model, theta)?;
    let terms = site_terms(model, u, theta)?;
    Ok(gradient_from_terms(&terms, &prior, u, model.n_fields()))
}

/// Hessian of `G` in `u`, dense and exactly symmetric.
pub fn hess_u<M: LatentGp + ?Sized>(model: &M, u: &[f64], theta: &[f64]) -> Result<Mat<f64>> {
    check_latent(model, u)?;
    let prior = PriorState::new(model, theta)?;
    let terms = site_terms(model, u, theta)?;
    let mut h = neg_hessian_from_terms(&terms, &prior.precisions(), model.n_fields());
    let dim = h.nrows();
    for j in 0..dim {
        for i in 0..j {
            let m = -0.5 * (h[(i, j)] + h[(j, i)]);
            h[(i, j)] = m;
            h[(j, i)] = m;
        }
        h[(j, j)] = -h[(j, j)];
    }
    Ok(h)
}

/// Relative central-difference step used for derivatives in `theta`.
pub const CROSS_DERIV_STEP: f64 = 1e-4;

/// `d^2 G / du dtheta^T` at `(u, theta)` by central differences of the
/// analytic latent gradient, one column per coordinate of `theta`.
pub fn cross_deriv_u_theta<M: LatentGp + ?Sized>(model: &M, theta: &[f64], u: &[f64]) -> Result<Mat<f64>> {
    check_latent(model, u)?;
    let p = theta.len();
    let cols = par::map(p, |j| -> Result<Vec<f64>> {
        let h = CROSS_DERIV_STEP * (1.0 + theta[j].abs());
        let mut tp = theta.to_vec();
        let mut tm = theta.to_vec();
        tp[j] += h;
        tm[j] -= h;
        let gp = grad_u(model, u, &tp)?;
        let gm = grad_u(model, u, &tm)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    });
    let cols = cols.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Mat::from_fn(u.len(), p, |i, j| cols[j][i]))
}

/// The spatial GEV model with latent GP location and (optionally) log-scale.
#[derive(Debug, Clone)]
pub struct GevGpModel {
    pub data: SiteDataset,
    pub spec: ModelSpec,
    pub kernel: KernelSettings,
    pub prior: ThetaPrior,
}

impl GevGpModel {
    /// The dataset must already carry the spec's transform.
    pub fn new(data: SiteDataset, spec: ModelSpec, kernel: KernelSettings) -> Result<Self> {
        spec.validate()?;
        if data.transform != spec.transform {
            return Err(Error::Validation(format!(
                "dataset transform {:?} does not match model {:?}",
                data.transform,
                spec.name()
            )));
        }
        Ok(Self { data, spec, kernel, prior: ThetaPrior::Flat })
    }

    pub fn with_prior(mut self, prior: ThetaPrior) -> Result<Self> {
        prior.validate(self.spec.theta_dim())?;
        self.prior = prior;
        Ok(self)
    }

    pub fn hypers(&self, theta: &[f64]) -> Result<Hypers> {
        Hypers::from_vec(&self.spec, &self.kernel, theta)
    }

    /// Starting values: `s = -2`, unit amplitudes, length-scales at the
    /// median pairwise site distance, and a fixed `b` at the log of the
    /// observation standard deviation.
    /// Moment-based start: the zero-mean GP amplitudes are set to cover the
    /// pooled Gumbel location and log-scale levels, the log-scale field
    /// starts with little spatial variance, and both length-scales equal the
    /// median site distance.
    pub fn default_theta_init(&self) -> Vec<f64> {
        let d = self.data.median_pairwise_distance();
        let log_lambda = if d > 0.0 { d.ln() } else { 0.0 };
        let (loc, log_scale, sd) = self.data.gumbel_moments();
        let mut v = Vec::new();
        if self.spec.shape == ShapeSpec::EstimatedPositive {
            v.push(-2.0);
        }
        v.extend([(loc * loc + sd * sd).max(1e-2).ln(), log_lambda]);
        if self.spec.b_random {
            v.extend([(log_scale * log_scale + 1e-2).ln(), log_lambda]);
        } else {
            v.push(log_scale);
        }
        v
    }

    fn shape_of(&self, theta: &[f64]) -> Shape {
        match self.spec.shape {
            ShapeSpec::EstimatedPositive => Shape::LogShape(theta[0]),
            ShapeSpec::FixedZero => Shape::Gumbel,
        }
    }

    fn check_hypers(&self, h: &Hypers) -> Result<Vec<f64>> {
        h.to_vec(&self.spec)
    }

    /// `G(u; theta)`.
    pub fn joint_logdensity(&self, u: &LatentField, theta: &Hypers) -> Result<f64> {
        let t = self.check_hypers(theta)?;
        let fixed = FixedKernels { model: self, hypers: theta };
        log_joint(&fixed, &u.stack(), &t)
    }

    pub fn grad_u(&self, u: &LatentField, theta: &Hypers) -> Result<Vec<f64>> {
        let t = self.check_hypers(theta)?;
        let fixed = FixedKernels { model: self, hypers: theta };
        grad_u(&fixed, &u.stack(), &t)
    }

    pub fn hess_u(&self, u: &LatentField, theta: &Hypers) -> Result<Mat<f64>> {
        let t = self.check_hypers(theta)?;
        let fixed = FixedKernels { model: self, hypers: theta };
        hess_u(&fixed, &u.stack(), &t)
    }

    /// Cross-derivative at the flattened `theta` (nuggets follow
    /// [`KernelSettings::jitter`] under perturbation).
    pub fn cross_deriv_u_theta(&self, theta: &Hypers, u_opt: &LatentField) -> Result<Mat<f64>> {
        let t = theta.to_vec(&self.spec)?;
        cross_deriv_u_theta(self, &t, &u_opt.stack())
    }
}

/// Evaluates a [`GevGpModel`] with the kernels of a given [`Hypers`] rather
/// than those rebuilt from the flat vector.
struct FixedKernels<'a> {
    model: &'a GevGpModel,
    hypers: &'a Hypers,
}

impl LatentGp for FixedKernels<'_> {
    fn coords(&self) -> &[Coord] {
        self.model.coords()
    }
    fn n_fields(&self) -> usize {
        self.model.n_fields()
    }
    fn theta_dim(&self) -> usize {
        self.model.theta_dim()
    }
    fn kernels(&self, _theta: &[f64]) -> Result<Vec<KernelConfig>> {
        let mut k = vec![self.hypers.kernel_a];
        k.extend(self.hypers.kernel_b);
        Ok(k)
    }
    fn site_loglik(&self, i: usize, latent: [f64; 2], theta: &[f64]) -> f64 {
        self.model.site_loglik(i, latent, theta)
    }
    fn site_term(&self, i: usize, latent: [f64; 2], theta: &[f64]) -> Option<SiteTerm> {
        self.model.site_term(i, latent, theta)
    }
}

impl GevGpModel {
    #[inline]
    fn site_ab(&self, latent: [f64; 2], theta: &[f64]) -> (f64, f64) {
        if self.spec.b_random {
            (latent[0], latent[1])
        } else {
            (latent[0], theta[theta.len() - 1])
        }
    }
}

impl LatentGp for GevGpModel {
    fn coords(&self) -> &[Coord] {
        &self.data.coords
    }

    fn n_fields(&self) -> usize {
        self.spec.n_fields()
    }

    fn theta_dim(&self) -> usize {
        self.spec.theta_dim()
    }

    fn kernels(&self, theta: &[f64]) -> Result<Vec<KernelConfig>> {
        let h = self.hypers(theta)?;
        let mut k = vec![h.kernel_a];
        k.extend(h.kernel_b);
        Ok(k)
    }

    fn site_loglik(&self, i: usize, latent: [f64; 2], theta: &[f64]) -> f64 {
        let (a, b) = self.site_ab(latent, theta);
        let shape = self.shape_of(theta);
        let mut total = 0.0;
        for &y in &self.data.obs[i] {
            let v = gev::logpdf_raw(y, a, b, shape);
            if v == f64::NEG_INFINITY || v.is_nan() {
                return f64::NEG_INFINITY;
            }
            total += v;
        }
        total
    }

    fn site_term(&self, i: usize, latent: [f64; 2], theta: &[f64]) -> Option<SiteTerm> {
        let (a, b) = self.site_ab(latent, theta);
        let shape = self.shape_of(theta);
        let mut t = SiteTerm { value: 0.0, grad: [0.0; 2], hess: [0.0; 3] };
        for &y in &self.data.obs[i] {
            let (v, g, h) = gev::logpdf_ab_derivs(y, a, b, shape)?;
            if !v.is_finite() {
                return None;
            }
            t.value += v;
            t.grad[0] += g[0];
            t.hess[0] += h[0];
            if self.spec.b_random {
                t.grad[1] += g[1];
                t.hess[1] += h[1];
                t.hess[2] += h[2];
            }
        }
        Some(t)
    }

    fn log_prior(&self, theta: &[f64]) -> f64 {
        self.prior.log_density(theta)
    }
}

/// Conjugate test model: `y_i | u_i ~ N(u_i, tau2)` with one GP field,
/// `theta = (ln sigma2, ln lambda)`.
///
/// `data_weight` scales the log-likelihood; zero leaves the prior alone.
#[derive(Debug, Clone)]
pub struct GaussianSurrogate {
    pub coords: Vec<Coord>,
    pub y: Vec<f64>,
    pub tau2: f64,
    pub kernel: KernelSettings,
    pub data_weight: f64,
}

impl GaussianSurrogate {
    pub fn new(coords: Vec<Coord>, y: Vec<f64>, tau2: f64, kernel: KernelSettings) -> Result<Self> {
        if coords.len() != y.len() {
            return Err(Error::Dimension { expected: coords.len(), actual: y.len() });
        }
        if !(tau2 > 0.0) {
            return Err(Error::Domain("tau2 must be positive".into()));
        }
        Ok(Self { coords, y, tau2, kernel, data_weight: 1.0 })
    }

    /// Exact `ln N(y; 0, K + tau2 I)`.
    pub fn analytic_log_marginal(&self, theta: &[f64]) -> Result<f64> {
        let mut k = kernel::cov_matrix(&self.coords, &self.kernel.config(theta[0], theta[1]));
        for i in 0..self.coords.len() {
            k[(i, i)] += self.tau2;
        }
        kernel::mvn_logpdf(&self.y, &CovMatrix::from_matrix(&k)?)
    }

    /// Exact posterior mean `K (K + tau2 I)^{-1} y` of the latent field.
    pub fn analytic_posterior_mean(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let cfg = self.kernel.config(theta[0], theta[1]);
        let k = kernel::cov_matrix(&self.coords, &cfg);
        let mut kt = k.clone();
        for i in 0..self.coords.len() {
            kt[(i, i)] += self.tau2;
        }
        let alpha = CovMatrix::from_matrix(&kt)?.solve(&self.y);
        Ok(crate::linalg::mat_vec(k.as_ref(), &alpha))
    }
}

impl LatentGp for GaussianSurrogate {
    fn coords(&self) -> &[Coord] {
        &self.coords
    }
    fn n_fields(&self) -> usize {
        1
    }
    fn theta_dim(&self) -> usize {
        2
    }
    fn kernels(&self, theta: &[f64]) -> Result<Vec<KernelConfig>> {
        Ok(vec![self.kernel.config(theta[0], theta[1])])
    }
    fn site_loglik(&self, i: usize, latent: [f64; 2], _theta: &[f64]) -> f64 {
        let r = self.y[i] - latent[0];
        self.data_weight * (-0.5 * (2.0 * std::f64::consts::PI * self.tau2).ln() - 0.5 * r * r / self.tau2)
    }
    fn site_term(&self, i: usize, latent: [f64; 2], theta: &[f64]) -> Option<SiteTerm> {
        let r = self.y[i] - latent[0];
        Some(SiteTerm {
            value: self.site_loglik(i, latent, theta),
            grad: [self.data_weight * r / self.tau2, 0.0],
            hess: [-self.data_weight / self.tau2, 0.0, 0.0],
        })
    }
}
