//! Sampling the joint Normal posterior, return-level summaries, prediction
//! at new sites and predictive coverage.

use faer::Mat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gev::{self, GevParams, Shape};
use crate::kernel::{Coord, KernelConfig, Kriging};
use crate::laplace::{FitResult, JointPosterior};
use crate::model::{Hypers, SiteDataset, Transform};
use crate::par;

/// Draws are generated in blocks of this many columns.
const DRAW_BLOCK: usize = 256;
/// Draws processed together when predicting at new sites.
const PREDICT_BLOCK: usize = 64;
const SITE_STREAM: u64 = 0x51_7e_5eed;

/// Posterior draws of `(u, theta)`, one column per draw.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub m: usize,
    pub seed: u64,
    pub latent_dim: usize,
    pub theta_dim: usize,
    draws: Mat<f64>,
}

impl PosteriorDraws {
    pub fn u_draw(&self, j: usize) -> &[f64] {
        &self.draws.col_as_slice(j)[..self.latent_dim]
    }

    pub fn theta_draw(&self, j: usize) -> &[f64] {
        &self.draws.col_as_slice(j)[self.latent_dim..]
    }

    /// Full `(u, theta)` vector of draw `j`.
    pub fn draw(&self, j: usize) -> &[f64] {
        self.draws.col_as_slice(j)
    }
}

/// `m` draws from `N(mean, root root^T)`. Draw `j` uses its own stream
/// derived from `(seed, j)`.
pub fn sample_normal(jp: &JointPosterior, m: usize, seed: u64) -> PosteriorDraws {
    let dim = jp.dim();
    let blocks = m.div_ceil(DRAW_BLOCK);
    let parts = par::map(blocks, |b| {
        let start = b * DRAW_BLOCK;
        let len = DRAW_BLOCK.min(m - start);
        let mut z = Mat::<f64>::zeros(dim, len);
        for c in 0..len {
            let mut rng = ChaCha8Rng::seed_from_u64(par::derive_seed(seed, (start + c) as u64));
            for r in 0..dim {
                z[(r, c)] = rng.sample(StandardNormal);
            }
        }
        let mut x = &jp.root * &z;
        for c in 0..len {
            for r in 0..dim {
                x[(r, c)] += jp.mean[r];
            }
        }
        x
    });
    let mut draws = Mat::<f64>::zeros(dim, m);
    for (b, part) in parts.into_iter().enumerate() {
        for c in 0..part.ncols() {
            for r in 0..dim {
                draws[(r, b * DRAW_BLOCK + c)] = part[(r, c)];
            }
        }
    }
    PosteriorDraws { m, seed, latent_dim: jp.latent_dim, theta_dim: dim - jp.latent_dim, draws }
}

/// `m` draws from the joint Normal posterior of a fit.
pub fn sample_joint(fit: &FitResult, m: usize, seed: u64) -> Result<PosteriorDraws> {
    if m == 0 {
        return Err(Error::Validation("number of draws must be positive".into()));
    }
    Ok(sample_normal(&fit.joint_posterior()?, m, seed))
}

/// Type-7 sample quantile of sorted data: `h = (n - 1) p`, linear
/// interpolation between neighbouring order statistics.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    assert!(n > 0, "quantile of empty sample");
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    if lo + 1 >= n {
        return sorted[n - 1];
    }
    sorted[lo] + (h - lo as f64) * (sorted[lo + 1] - sorted[lo])
}

/// Mean and sample standard deviation, exact for constant samples.
fn mean_sd(x: &[f64]) -> (f64, f64) {
    let x0 = x[0];
    let n = x.len() as f64;
    let shift = x.iter().map(|v| v - x0).sum::<f64>() / n;
    let mean = x0 + shift;
    if x.len() < 2 {
        return (mean, 0.0);
    }
    let ss: f64 = x.iter().map(|v| (v - x0 - shift).powi(2)).sum();
    (mean, (ss / (n - 1.0)).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReturnLevelSummary {
    pub site: usize,
    pub prob_upper: f64,
    pub mean: f64,
    pub sd: f64,
    /// 2.5% sample quantile.
    pub ci_lo: f64,
    /// 97.5% sample quantile.
    pub ci_hi: f64,
}

fn draw_params(fit: &FitResult, draws: &PosteriorDraws, j: usize, site: usize) -> (f64, f64, Shape) {
    let u = draws.u_draw(j);
    let theta = draws.theta_draw(j);
    let n = fit.n_sites;
    let shape = match fit.spec.shape {
        crate::model::ShapeSpec::EstimatedPositive => Shape::LogShape(theta[0]),
        crate::model::ShapeSpec::FixedZero => Shape::Gumbel,
    };
    let b = if fit.spec.b_random { u[n + site] } else { theta[theta.len() - 1] };
    (u[site], b, shape)
}

/// Posterior summaries of the return level `z_p` at observed sites
/// (all sites when `sites` is `None`), on the original data scale.
pub fn return_levels(fit: &FitResult, draws: &PosteriorDraws, prob_upper: f64, sites: Option<&[usize]>) -> Result<Vec<ReturnLevelSummary>> {
    if !(prob_upper > 0.0 && prob_upper < 1.0) {
        return Err(Error::Domain(format!("prob_upper must lie in (0, 1), got {prob_upper}")));
    }
    if draws.latent_dim != fit.laplace.u_hat.len() {
        return Err(Error::Dimension { expected: fit.laplace.u_hat.len(), actual: draws.latent_dim });
    }
    let all: Vec<usize> = (0..fit.n_sites).collect();
    let sites = sites.unwrap_or(&all);
    if let Some(&bad) = sites.iter().find(|&&i| i >= fit.n_sites) {
        return Err(Error::Validation(format!("site index {bad} out of range")));
    }
    Ok(par::map(sites.len(), |k| {
        let i = sites[k];
        let mut z: Vec<f64> = (0..draws.m)
            .map(|j| {
                let (a, b, shape) = draw_params(fit, draws, j, i);
                let v = gev::quantile_raw(prob_upper, a, b.exp(), shape);
                if fit.spec.transform == Transform::Log {
                    v.exp()
                } else {
                    v
                }
            })
            .collect();
        let (mean, sd) = mean_sd(&z);
        z.sort_by(f64::total_cmp);
        ReturnLevelSummary {
            site: i,
            prob_upper,
            mean,
            sd,
            ci_lo: quantile_sorted(&z, 0.025),
            ci_hi: quantile_sorted(&z, 0.975),
        }
    }))
}

/// Kriging moments of the latent fields at new sites for one draw.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldMoments {
    pub a_mean: Vec<f64>,
    pub a_var: Vec<f64>,
    /// `None` when `b` is a fixed effect.
    pub b: Option<(Vec<f64>, Vec<f64>)>,
}

/// Conditional moments of `a(x*)` and `b(x*)` given one draw of the
/// observed-site fields and hyperparameters.
pub fn kriging_moments(fit: &FitResult, coords_obs: &[Coord], draw: &[f64], coords_new: &[Coord]) -> Result<FieldMoments> {
    let n = fit.n_sites;
    let d = fit.laplace.u_hat.len();
    let h = Hypers::from_vec(&fit.spec, &fit.kernel, &draw[d..])?;
    let krig = |cfg: &KernelConfig, vals: &[f64]| Kriging::new(coords_obs, cfg)?.condition(vals, coords_new);
    let (a_mean, a_var) = krig(&h.kernel_a, &draw[..n])?;
    let b = match h.kernel_b {
        Some(kb) => Some(krig(&kb, &draw[n..2 * n])?),
        None => None,
    };
    Ok(FieldMoments { a_mean, a_var, b })
}

/// Posterior predictive draws at one new site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SitePrediction {
    pub coord: Coord,
    /// Predictive draws on the original data scale, in draw order.
    pub draws: Vec<f64>,
    pub mean: f64,
    /// `(1 - p_exp) / 2` quantile.
    pub lower: f64,
    /// `1 - (1 - p_exp) / 2` quantile.
    pub upper: f64,
    pub p_exp: f64,
}

impl SitePrediction {
    pub fn sorted_draws(&self) -> Vec<f64> {
        let mut s = self.draws.clone();
        s.sort_by(f64::total_cmp);
        s
    }
}

/// Interval `[L, U]` with central probability `p_exp` from sorted draws.
pub fn central_interval(sorted: &[f64], p_exp: f64) -> (f64, f64) {
    let tail = 0.5 * (1.0 - p_exp);
    (quantile_sorted(sorted, tail), quantile_sorted(sorted, 1.0 - tail))
}

/// Per-site random stream keyed by the coordinate, so that outputs follow
/// the sites under any reordering.
fn site_seed(seed: u64, x: &Coord) -> u64 {
    let key = par::mix64(x[0].to_bits() ^ par::mix64(x[1].to_bits()));
    par::derive_seed(seed ^ SITE_STREAM, key)
}

struct SiteState {
    rng: ChaCha8Rng,
    draws: Vec<f64>,
}

/// Multi-stage posterior predictive sampling at new sites: joint draws of
/// `(u, theta)`, then `a(x*)`, `b(x*)` from their GP conditionals given
/// each draw, then `y*` from the GEV.
///
/// Sites with non-finite coordinates get an error entry; the rest are
/// unaffected.
pub fn predict_new(
    fit: &FitResult,
    data: &SiteDataset,
    coords_new: &[Coord],
    m: usize,
    seed: u64,
    p_exp: f64,
) -> Result<Vec<Result<SitePrediction>>> {
    if !(p_exp > 0.0 && p_exp < 1.0) {
        return Err(Error::Domain(format!("p_exp must lie in (0, 1), got {p_exp}")));
    }
    if data.n_sites() != fit.n_sites {
        return Err(Error::Dimension { expected: fit.n_sites, actual: data.n_sites() });
    }
    let draws = sample_joint(fit, m, seed)?;
    let valid: Vec<usize> = (0..coords_new.len()).filter(|&k| coords_new[k].iter().all(|c| c.is_finite())).collect();
    let targets: Vec<Coord> = valid.iter().map(|&k| coords_new[k]).collect();
    let mut states: Vec<SiteState> = targets
        .iter()
        .map(|x| SiteState { rng: ChaCha8Rng::seed_from_u64(site_seed(seed, x)), draws: Vec::with_capacity(m) })
        .collect();
    let log_scale = fit.spec.transform == Transform::Log;

    for start in (0..m).step_by(PREDICT_BLOCK) {
        let len = PREDICT_BLOCK.min(m - start);
        let moments = par::map(len, |c| kriging_moments(fit, &data.coords, draws.draw(start + c), &targets));
        let moments = moments.into_iter().collect::<Result<Vec<_>>>()?;
        par::for_each_mut(&mut states, |k, st| {
            for (c, mo) in moments.iter().enumerate() {
                let theta = draws.theta_draw(start + c);
                let za: f64 = st.rng.sample(StandardNormal);
                let a = mo.a_mean[k] + mo.a_var[k].sqrt() * za;
                let b = match &mo.b {
                    Some((bm, bv)) => {
                        let zb: f64 = st.rng.sample(StandardNormal);
                        bm[k] + bv[k].sqrt() * zb
                    }
                    None => theta[theta.len() - 1],
                };
                let shape = match fit.spec.shape {
                    crate::model::ShapeSpec::EstimatedPositive => Shape::LogShape(theta[0]),
                    crate::model::ShapeSpec::FixedZero => Shape::Gumbel,
                };
                let y = GevParams { a, b, shape }.draw(&mut st.rng);
                st.draws.push(if log_scale { y.exp() } else { y });
            }
        });
    }

    let mut out: Vec<Result<SitePrediction>> = (0..coords_new.len())
        .map(|k| Err(Error::Validation(format!("new site {k} has non-finite coordinates"))))
        .collect();
    let summaries = par::map(states.len(), |k| {
        let st = &states[k];
        let mut sorted = st.draws.clone();
        sorted.sort_by(f64::total_cmp);
        let (lower, upper) = central_interval(&sorted, p_exp);
        let (mean, _) = mean_sd(&st.draws);
        SitePrediction { coord: targets[k], draws: st.draws.clone(), mean, lower, upper, p_exp }
    });
    for (k, s) in valid.into_iter().zip(summaries) {
        out[k] = Ok(s);
    }
    Ok(out)
}

/// Empirical coverage `p_obs` of in-sample predictive intervals for each
/// nominal level `p_exp`; every observation counts separately.
pub fn coverage_check(fit: &FitResult, data: &SiteDataset, p_exp_grid: &[f64], m: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    if let Some(p) = p_exp_grid.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::Domain(format!("p_exp must lie in (0, 1), got {p}")));
    }
    let preds = predict_new(fit, data, &data.coords, m, seed, 0.5)?;
    let preds = preds.into_iter().collect::<Result<Vec<_>>>()?;
    let sorted: Vec<Vec<f64>> = preds.iter().map(SitePrediction::sorted_draws).collect();
    let raw: Vec<Vec<f64>> = (0..data.n_sites()).map(|i| data.raw_obs(i)).collect();
    let total = data.n_obs() as f64;
    Ok(p_exp_grid
        .iter()
        .map(|&p| {
            let inside: usize = (0..data.n_sites())
                .map(|i| {
                    let (lo, hi) = central_interval(&sorted[i], p);
                    raw[i].iter().filter(|&&y| lo <= y && y <= hi).count()
                })
                .sum();
            (p, inside as f64 / total)
        })
        .collect())
}

/// `{0.10, 0.11, ..., 0.99}`.
pub fn default_p_exp_grid() -> Vec<f64> {
    (10..=99).map(|k| k as f64 / 100.0).collect()
}
