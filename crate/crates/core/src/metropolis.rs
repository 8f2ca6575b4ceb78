//! Componentwise random-walk Metropolis on `(u, theta)`, used as a
//! reference posterior at desk scale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, LatentGp, PriorState};
use crate::par;

/// Largest `dim(u) + dim(theta)` the sampler accepts.
pub const MAX_DIM: usize = 24;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetropolisOptions {
    /// Sweeps summed over chains; each chain discards its first half.
    pub n_steps: usize,
    pub n_chains: usize,
    /// Initial proposal scales per coordinate (default 0.5 for all).
    pub step_scales: Option<Vec<f64>>,
    pub seed: u64,
    pub target_acceptance: f64,
    pub max_rhat: f64,
}

impl Default for MetropolisOptions {
    fn default() -> Self {
        Self { n_steps: 1_000_000, n_chains: 4, step_scales: None, seed: 1, target_acceptance: 0.3, max_rhat: 1.05 }
    }
}

/// Per-coordinate summaries in stacked order `(u, theta)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetropolisSummary {
    pub mean: Vec<f64>,
    pub sd: Vec<f64>,
    /// Post-adaptation acceptance rate, averaged over chains.
    pub acceptance: Vec<f64>,
    /// Split-chain potential scale reduction.
    pub rhat: Vec<f64>,
    pub n_chains: usize,
    pub sweeps_per_chain: usize,
}

#[derive(Default, Clone, Copy)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn var(&self) -> f64 {
        self.m2 / (self.n - 1.0)
    }
}

struct ChainOutput {
    halves: Vec<[Welford; 2]>,
    accepted: Vec<usize>,
    proposed: Vec<usize>,
}

struct State<'a, M: LatentGp + ?Sized> {
    model: &'a M,
    x: Vec<f64>,
    prior: PriorState,
    site_ll: Vec<f64>,
    prior_ll: f64,
    theta_ll: f64,
}

impl<'a, M: LatentGp + ?Sized> State<'a, M> {
    fn new(model: &'a M, x: Vec<f64>) -> Result<Self> {
        let d = model.latent_dim();
        let (u, theta) = x.split_at(d);
        let prior = PriorState::new(model, theta)?;
        let site_ll = site_lls(model, u, theta);
        let prior_ll = prior.log_density(u);
        let theta_ll = model.log_prior(theta);
        let s = Self { model, x, prior, site_ll, prior_ll, theta_ll };
        if !s.total().is_finite() {
            return Err(Error::Validation("Metropolis start has zero density".into()));
        }
        Ok(s)
    }

    fn total(&self) -> f64 {
        self.site_ll.iter().sum::<f64>() + self.prior_ll + self.theta_ll
    }

    /// Proposes `x[k] += delta`; returns whether it was accepted.
    fn step<R: Rng>(&mut self, k: usize, delta: f64, rng: &mut R) -> bool {
        let d = self.model.latent_dim();
        let n = self.model.n_sites();
        let mut x = self.x.clone();
        x[k] += delta;
        let (u, theta) = x.split_at(d);
        let current = self.total();
        if k < d {
            let i = k % n;
            let lat = [u[i], if self.model.n_fields() == 2 { u[n + i] } else { 0.0 }];
            let ll = self.model.site_loglik(i, lat, theta);
            let pl = self.prior.log_density(u);
            let proposed = current - self.site_ll[i] + ll - self.prior_ll + pl;
            if accept(proposed - current, rng) {
                self.site_ll[i] = ll;
                self.prior_ll = pl;
                self.x = x;
                return true;
            }
            false
        } else {
            let Ok(prior) = PriorState::new(self.model, theta) else {
                return false;
            };
            let site_ll = site_lls(self.model, u, theta);
            let pl = prior.log_density(u);
            let tl = self.model.log_prior(theta);
            let proposed = site_ll.iter().sum::<f64>() + pl + tl;
            if accept(proposed - current, rng) {
                self.prior = prior;
                self.site_ll = site_ll;
                self.prior_ll = pl;
                self.theta_ll = tl;
                self.x = x;
                return true;
            }
            false
        }
    }
}

fn accept<R: Rng>(log_ratio: f64, rng: &mut R) -> bool {
    if log_ratio.is_nan() {
        return false;
    }
    log_ratio >= 0.0 || rng.random::<f64>().ln() < log_ratio
}

fn site_lls<M: LatentGp + ?Sized>(model: &M, u: &[f64], theta: &[f64]) -> Vec<f64> {
    let n = model.n_sites();
    (0..n)
        .map(|i| model.site_loglik(i, [u[i], if model.n_fields() == 2 { u[n + i] } else { 0.0 }], theta))
        .collect()
}

fn run_chain<M: LatentGp + ?Sized>(model: &M, start: &[f64], scales0: &[f64], sweeps: usize, seed: u64, target: f64) -> Result<ChainOutput> {
    let dim = start.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut state = State::new(model, start.to_vec())?;
    let mut log_scale: Vec<f64> = scales0.iter().map(|s| s.ln()).collect();
    let warm = sweeps / 2;
    let mut out = ChainOutput { halves: vec![[Welford::default(); 2]; dim], accepted: vec![0; dim], proposed: vec![0; dim] };
    let kept = sweeps - warm;
    for t in 0..sweeps {
        for k in 0..dim {
            let z: f64 = rng.sample(StandardNormal);
            let ok = state.step(k, log_scale[k].exp() * z, &mut rng);
            if t < warm {
                let gain = 1.0 / ((t + 1) as f64).powf(0.6);
                log_scale[k] += gain * ((ok as u8 as f64) - target);
            } else {
                out.proposed[k] += 1;
                out.accepted[k] += ok as usize;
            }
        }
        if t >= warm {
            let half = usize::from(t - warm >= kept / 2);
            for k in 0..dim {
                out.halves[k][half].push(state.x[k]);
            }
        }
    }
    Ok(out)
}

/// Samples `exp(G(u; theta)) p(theta)` starting every chain from `(u0, theta0)`.
///
/// Errors if the dimension exceeds [`MAX_DIM`], if any post-adaptation
/// acceptance rate leaves `[0.1, 0.6]`, or if split-chain R-hat reaches
/// `max_rhat`.
pub fn metropolis_reference<M: LatentGp + ?Sized>(model: &M, u0: &[f64], theta0: &[f64], opts: &MetropolisOptions) -> Result<MetropolisSummary> {
    let d = model.latent_dim();
    let dim = d + model.theta_dim();
    if dim > MAX_DIM {
        return Err(Error::Validation(format!("Metropolis reference limited to {MAX_DIM} coordinates, got {dim}")));
    }
    if u0.len() != d || theta0.len() != model.theta_dim() {
        return Err(Error::Dimension { expected: dim, actual: u0.len() + theta0.len() });
    }
    if opts.n_chains == 0 {
        return Err(Error::Validation("need at least one chain".into()));
    }
    let sweeps = opts.n_steps / opts.n_chains;
    if sweeps < 8 {
        return Err(Error::Validation("too few Metropolis steps".into()));
    }
    let scales = match &opts.step_scales {
        Some(s) if s.len() == dim && s.iter().all(|v| *v > 0.0) => s.clone(),
        Some(s) => return Err(Error::Validation(format!("{} positive step scales expected, got {s:?}", dim))),
        None => vec![0.5; dim],
    };
    let mut start = u0.to_vec();
    start.extend_from_slice(theta0);
    model::log_joint(model, u0, theta0)?;

    let chains = par::map(opts.n_chains, |c| {
        run_chain(model, &start, &scales, sweeps, par::derive_seed(opts.seed, c as u64), opts.target_acceptance)
    });
    let chains = chains.into_iter().collect::<Result<Vec<_>>>()?;

    let mut summary = MetropolisSummary {
        mean: vec![0.0; dim],
        sd: vec![0.0; dim],
        acceptance: vec![0.0; dim],
        rhat: vec![0.0; dim],
        n_chains: opts.n_chains,
        sweeps_per_chain: sweeps,
    };
    for k in 0..dim {
        let subs: Vec<Welford> = chains.iter().flat_map(|c| c.halves[k]).collect();
        let total_n: f64 = subs.iter().map(|w| w.n).sum();
        let mean = subs.iter().map(|w| w.n * w.mean).sum::<f64>() / total_n;
        let ss: f64 = subs.iter().map(|w| w.m2 + w.n * (w.mean - mean).powi(2)).sum();
        summary.mean[k] = mean;
        summary.sd[k] = (ss / (total_n - 1.0)).sqrt();
        let len = subs.iter().map(|w| w.n).fold(f64::INFINITY, f64::min);
        let w_var = subs.iter().map(Welford::var).sum::<f64>() / subs.len() as f64;
        let means: Vec<f64> = subs.iter().map(|w| w.mean).collect();
        let mm = means.iter().sum::<f64>() / means.len() as f64;
        let b_over_n = means.iter().map(|m| (m - mm).powi(2)).sum::<f64>() / (means.len() - 1) as f64;
        let var_plus = (len - 1.0) / len * w_var + b_over_n;
        summary.rhat[k] = (var_plus / w_var).sqrt();
        for c in &chains {
            let rate = c.accepted[k] as f64 / c.proposed[k] as f64;
            if !(0.1..=0.6).contains(&rate) {
                return Err(Error::Diagnostics(format!("acceptance rate {rate:.3} for coordinate {k} outside [0.1, 0.6]")));
            }
            summary.acceptance[k] += rate / chains.len() as f64;
        }
    }
    if let Some(k) = (0..dim).find(|&k| !(summary.rhat[k] < opts.max_rhat)) {
        return Err(Error::Diagnostics(format!("split R-hat {:.4} for coordinate {k} exceeds {}", summary.rhat[k], opts.max_rhat)));
    }
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{GaussianSurrogate, KernelSettings};

    fn surrogate() -> GaussianSurrogate {
        let coords = vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]];
        GaussianSurrogate::new(coords, vec![0.8, -0.3, 0.5], 0.4, KernelSettings::default()).unwrap()
    }

    /// Surrogate with theta held fixed by a very tight prior.
    fn pinned(theta: [f64; 2]) -> (GaussianSurrogate, PinnedPrior) {
        (surrogate(), PinnedPrior { theta })
    }

    struct PinnedPrior {
        theta: [f64; 2],
    }

    struct Pinned<'a> {
        inner: &'a GaussianSurrogate,
        prior: &'a PinnedPrior,
    }

    impl LatentGp for Pinned<'_> {
        fn coords(&self) -> &[crate::kernel::Coord] {
            self.inner.coords()
        }
        fn n_fields(&self) -> usize {
            1
        }
        fn theta_dim(&self) -> usize {
            2
        }
        fn kernels(&self, theta: &[f64]) -> Result<Vec<crate::kernel::KernelConfig>> {
            self.inner.kernels(theta)
        }
        fn site_loglik(&self, i: usize, l: [f64; 2], t: &[f64]) -> f64 {
            self.inner.site_loglik(i, l, t)
        }
        fn site_term(&self, i: usize, l: [f64; 2], t: &[f64]) -> Option<model::SiteTerm> {
            self.inner.site_term(i, l, t)
        }
        fn log_prior(&self, t: &[f64]) -> f64 {
            -0.5 * ((t[0] - self.prior.theta[0]).powi(2) + (t[1] - self.prior.theta[1]).powi(2)) / 1e-6
        }
    }

    #[test]
    fn conjugate_posterior_means() {
        let theta = [0.2, 0.1];
        let (m, p) = pinned(theta);
        let model = Pinned { inner: &m, prior: &p };
        let exact = m.analytic_posterior_mean(&theta).unwrap();
        let opts = MetropolisOptions { n_steps: 200_000, seed: 3, ..Default::default() };
        let s = metropolis_reference(&model, &[0.0; 3], &theta, &opts).unwrap();
        for i in 0..3 {
            assert!((s.mean[i] - exact[i]).abs() < 0.05 * s.sd[i].max(0.1), "{i}: {} vs {}", s.mean[i], exact[i]);
        }
    }

    #[test]
    fn symmetric_target_gives_equal_means() {
        let coords = vec![[0.0, 0.0], [1.0, 0.0]];
        let m = GaussianSurrogate::new(coords, vec![1.0, 1.0], 0.5, KernelSettings::default()).unwrap();
        let p = PinnedPrior { theta: [0.0, 0.0] };
        let model = Pinned { inner: &m, prior: &p };
        let opts = MetropolisOptions { n_steps: 200_000, seed: 5, ..Default::default() };
        let s = metropolis_reference(&model, &[0.0; 2], &[0.0, 0.0], &opts).unwrap();
        assert!((s.mean[0] - s.mean[1]).abs() < 0.05 * s.sd[0]);
    }

    #[test]
    fn rejects_large_dimension() {
        let coords: Vec<_> = (0..30).map(|i| [i as f64, 0.0]).collect();
        let m = GaussianSurrogate::new(coords, vec![0.0; 30], 1.0, KernelSettings::default()).unwrap();
        let r = metropolis_reference(&m, &[0.0; 30], &[0.0, 0.0], &MetropolisOptions::default());
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn deterministic_under_seed() {
        let (m, p) = pinned([0.0, 0.0]);
        let model = Pinned { inner: &m, prior: &p };
        let opts = MetropolisOptions { n_steps: 20_000, seed: 9, ..Default::default() };
        let a = metropolis_reference(&model, &[0.0; 3], &[0.0, 0.0], &opts).unwrap();
        let b = par::sequential(|| metropolis_reference(&model, &[0.0; 3], &[0.0, 0.0], &opts).unwrap());
        assert_eq!(a, b);
    }
}
