//! Generalized extreme value (GEV) and Gumbel distribution primitives.
//!
//! Parameters are held as `(a, b, shape)` where `a` is the location,
//! `b = ln(scale)` and the shape is either `ln(shape)` for a strictly
//! positive shape or the Gumbel (zero shape) tag.

use rand::distr::Open01;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};

/// Shape parameter of a GEV distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shape {
    /// `s = ln(shape)`, so the shape `exp(s)` is strictly positive.
    LogShape(f64),
    /// Shape exactly zero.
    Gumbel,
}

impl Shape {
    /// The shape on its natural scale (`0` for Gumbel).
    pub fn natural(&self) -> f64 {
        match *self {
            Shape::LogShape(s) => s.exp(),
            Shape::Gumbel => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GevParams {
    /// Location.
    pub a: f64,
    /// Log of the scale.
    pub b: f64,
    pub shape: Shape,
}

impl GevParams {
    pub fn new(a: f64, b: f64, shape: Shape) -> Result<Self> {
        ensure_finite("location", a)?;
        ensure_finite("log-scale", b)?;
        if let Shape::LogShape(s) = shape {
            ensure_finite("log-shape", s)?;
        }
        Ok(Self { a, b, shape })
    }

    pub fn gumbel(a: f64, b: f64) -> Result<Self> {
        Self::new(a, b, Shape::Gumbel)
    }

    pub fn scale(&self) -> f64 {
        self.b.exp()
    }

    /// Lower end of the support (`-inf` for Gumbel).
    pub fn lower_bound(&self) -> f64 {
        match self.shape {
            Shape::LogShape(s) => self.a - self.scale() / s.exp(),
            Shape::Gumbel => f64::NEG_INFINITY,
        }
    }

    /// Distribution function. Values below the support give `0`.
    pub fn cdf(&self, y: f64) -> Result<f64> {
        ensure_finite("y", y)?;
        let z = (y - self.a) / self.scale();
        Ok(match self.shape {
            Shape::Gumbel => (-(-z).exp()).exp(),
            Shape::LogShape(s) => {
                let xi = s.exp();
                let xz = xi * z;
                if xz <= -1.0 {
                    0.0
                } else {
                    (-(-xz.ln_1p() / xi).exp()).exp()
                }
            }
        })
    }

    /// Log density. Points outside the support give `f64::NEG_INFINITY`;
    /// non-finite input is a domain error.
    pub fn logpdf(&self, y: f64) -> Result<f64> {
        ensure_finite("y", y)?;
        Ok(logpdf_raw(y, self.a, self.b, self.shape))
    }

    /// Value exceeded with probability `prob_upper`, i.e. the
    /// `1 - prob_upper` quantile.
    pub fn quantile(&self, prob_upper: f64) -> Result<f64> {
        if !(prob_upper > 0.0 && prob_upper < 1.0) {
            return Err(Error::Domain(format!(
                "upper-tail probability must lie in (0, 1), got {prob_upper}"
            )));
        }
        Ok(quantile_raw(prob_upper, self.a, self.scale(), self.shape))
    }

    /// `n` i.i.d. draws by inversion, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.draw(&mut rng)).collect()
    }

    /// One draw by inversion using the caller's generator.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        quantile_raw(u, self.a, self.scale(), self.shape)
    }

    /// Distribution mean, `+inf` when the shape is at least one.
    pub fn mean(&self) -> f64 {
        const EULER_GAMMA: f64 = 0.577_215_664_901_532_9;
        match self.shape {
            Shape::Gumbel => self.a + self.scale() * EULER_GAMMA,
            Shape::LogShape(s) => {
                let xi = s.exp();
                if xi >= 1.0 {
                    f64::INFINITY
                } else {
                    self.a + self.scale() * (gamma(1.0 - xi) - 1.0) / xi
                }
            }
        }
    }
}

/// Log density without validation.
pub(crate) fn logpdf_raw(y: f64, a: f64, b: f64, shape: Shape) -> f64 {
    let z = (y - a) * (-b).exp();
    match shape {
        Shape::Gumbel => -b - z - (-z).exp(),
        Shape::LogShape(s) => {
            let xi = s.exp();
            let xz = xi * z;
            if xz <= -1.0 {
                return f64::NEG_INFINITY;
            }
            let lt = xz.ln_1p();
            -b - (1.0 + 1.0 / xi) * lt - (-lt / xi).exp()
        }
    }
}

pub(crate) fn quantile_raw(prob_upper: f64, a: f64, scale: f64, shape: Shape) -> f64 {
    // -ln(1 - p)
    let x = -(-prob_upper).ln_1p();
    match shape {
        Shape::Gumbel => a - scale * x.ln(),
        Shape::LogShape(s) => {
            let xi = s.exp();
            a + scale / xi * (-xi * x.ln()).exp_m1()
        }
    }
}

/// Value, gradient and Hessian of the log density of one observation with
/// respect to `(a, b)`. Hessian entries are `(aa, ab, bb)`. `None` outside
/// the support.
pub(crate) fn logpdf_ab_derivs(y: f64, a: f64, b: f64, shape: Shape) -> Option<(f64, [f64; 2], [f64; 3])> {
    let inv_sigma = (-b).exp();
    let z = (y - a) * inv_sigma;
    match shape {
        Shape::Gumbel => {
            let e = (-z).exp();
            let val = -b - z - e;
            let ga = (1.0 - e) * inv_sigma;
            let gb = -1.0 + z - z * e;
            let haa = -e * inv_sigma * inv_sigma;
            let hab = (-z * e - 1.0 + e) * inv_sigma;
            let hbb = z * (e - 1.0) - z * z * e;
            Some((val, [ga, gb], [haa, hab, hbb]))
        }
        Shape::LogShape(s) => {
            let xi = s.exp();
            let xz = xi * z;
            if xz <= -1.0 {
                return None;
            }
            let lt = xz.ln_1p();
            let t = 1.0 + xz;
            let w = (-lt / xi).exp();
            let val = -b - (1.0 + 1.0 / xi) * lt - w;
            // r = (w - 1 - xi) / t; q = (1 + xi)(xi - w) / t^2
            let r = (w - 1.0 - xi) / t;
            let q = (1.0 + xi) * (xi - w) / (t * t);
            let ga = -r * inv_sigma;
            let gb = -1.0 - r * z;
            let haa = q * inv_sigma * inv_sigma;
            let hab = (q * z + r) * inv_sigma;
            let hbb = q * z * z + r * z;
            Some((val, [ga, gb], [haa, hab, hbb]))
        }
    }
}

/// Lanczos approximation of the gamma function (g = 7, n = 9).
fn gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const C: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI / ((std::f64::consts::PI * x).sin() * gamma(1.0 - x))
    } else {
        let x = x - 1.0;
        let mut acc = C[0];
        for (i, c) in C.iter().enumerate().skip(1) {
            acc += c / (x + i as f64);
        }
        let t = x + G + 0.5;
        (2.0 * std::f64::consts::PI).sqrt() * t.powf(x + 0.5) * (-t).exp() * acc
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const E_INV: f64 = 0.367_879_441_171_442_3;

    /// Adaptive Simpson quadrature; test oracle only.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let lm = 0.5 * (a + m);
            let rm = 0.5 * (m + b);
            let flm = f(lm);
            let frm = f(rm);
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let fa = f(a);
        let fb = f(b);
        let fm = f(0.5 * (a + b));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    /// Bisection root of an increasing function; test oracle only.
    fn bisect<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64) -> f64 {
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if f(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    fn pos(a: f64, b: f64, so: f64) -> GevParams {
        GevParams::new(a, b, Shape::LogShape(so.ln())).unwrap()
    }

    #[test]
    fn cdf_examples() {
        let g = GevParams::gumbel(0.0, 0.0).unwrap();
        assert!((g.cdf(0.0).unwrap() - E_INV).abs() < 1e-15);

        let p = pos(0.0, 0.0, 0.1);
        assert_eq!(p.cdf(p.lower_bound()).unwrap(), 0.0);
        assert_eq!(p.cdf(-20.0).unwrap(), 0.0);

        // Oracle: direct evaluation of exp(-(1 + 0.1 y)^-10) and the
        // integral of the density from the lower bound.
        let direct = (-(1.1f64).powi(-10)).exp();
        let integral = simpson(&|y| p.logpdf(y).unwrap().exp(), p.lower_bound(), 1.0, 1e-13);
        assert!((direct - 0.680_081_054_970_499).abs() < 1e-14);
        assert!((p.cdf(1.0).unwrap() - direct).abs() < 1e-14);
        assert!((integral - direct).abs() < 1e-9);

        assert!(matches!(g.cdf(f64::NAN), Err(Error::Domain(_))));
    }

    #[test]
    fn logpdf_examples() {
        let g = GevParams::gumbel(0.0, 0.0).unwrap();
        assert_eq!(g.logpdf(0.0).unwrap(), -1.0);

        let p = pos(0.0, 0.0, 0.135);
        let lo = p.lower_bound();
        let f = |y: f64| p.logpdf(y).unwrap().exp();
        let total = simpson(&f, lo, 0.0, 1e-12) + simpson(&f, 0.0, 20.0, 1e-12) + simpson(&f, 20.0, 5000.0, 1e-12);
        // tail beyond 5000 is 1 - cdf(5000)
        let tail = 1.0 - p.cdf(5000.0).unwrap();
        assert!((total + tail - 1.0).abs() < 1e-6, "{}", total + tail);

        let q = pos(0.2, -0.1, 0.2);
        let y = 1.3;
        let h = 1e-5;
        let fd = (q.cdf(y + h).unwrap() - q.cdf(y - h).unwrap()) / (2.0 * h);
        let dens = q.logpdf(y).unwrap().exp();
        assert!(((fd - dens) / dens).abs() < 1e-6);

        assert_eq!(p.logpdf(lo - 1.0).unwrap(), f64::NEG_INFINITY);
        assert!(p.logpdf(f64::INFINITY).is_err());
    }

    #[test]
    fn quantile_examples() {
        let g = GevParams::gumbel(0.0, 0.0).unwrap();
        assert!(g.quantile(1.0 - E_INV).unwrap().abs() < 1e-15);

        let g = GevParams::gumbel(2.0, 3f64.ln()).unwrap();
        let z = g.quantile(0.1).unwrap();
        let root = bisect(|y| g.cdf(y).unwrap() - 0.9, -50.0, 50.0);
        assert!((z - root).abs() < 1e-10);
        assert!((z - 8.751_102).abs() < 1e-6);

        let p = GevParams::new(0.0, 0.0, Shape::LogShape(-2.0)).unwrap();
        let z = p.quantile(0.1).unwrap();
        let root = bisect(|y| p.cdf(y).unwrap() - 0.9, p.lower_bound(), 50.0);
        assert!((z - root).abs() < 1e-10);
        assert!((z - 2.6307).abs() < 1e-4);

        for bad in [0.0, 1.0, -0.5, f64::NAN] {
            assert!(matches!(p.quantile(bad), Err(Error::Domain(_))));
        }
    }

    #[test]
    fn sampling() {
        let p = pos(0.0, 0.0, 0.135);
        assert!(p.sample(0, 1).is_empty());
        assert_eq!(p.sample(50, 9), p.sample(50, 9));
        assert_ne!(p.sample(50, 9), p.sample(50, 10));

        let mut xs = p.sample(100_000, 42);
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = p.cdf(x).unwrap();
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "KS distance {ks}");
    }

    #[test]
    fn mean_matches_quadrature() {
        let p = pos(1.0, 0.3, 0.135);
        let m = simpson(&|u: f64| p.quantile(u).unwrap(), 1e-12, 1.0 - 1e-12, 1e-12);
        assert!((p.mean() - m).abs() < 1e-5, "{} vs {}", p.mean(), m);
        let g = GevParams::gumbel(1.0, 0.3).unwrap();
        let m = simpson(&|u: f64| g.quantile(u).unwrap(), 1e-14, 1.0 - 1e-14, 1e-12);
        assert!((g.mean() - m).abs() < 1e-5);
    }

    #[test]
    fn derivatives_match_finite_differences() {
        for shape in [Shape::Gumbel, Shape::LogShape(-2.0), Shape::LogShape(-0.3)] {
            for &(y, a, b) in &[(1.3, 0.2, -0.1), (5.0, 4.2, 0.4), (-0.5, 0.1, 0.2)] {
                let (v, g, h) = logpdf_ab_derivs(y, a, b, shape).unwrap();
                assert!((v - logpdf_raw(y, a, b, shape)).abs() < 1e-14);
                let e = 1e-5;
                let f = |a: f64, b: f64| logpdf_raw(y, a, b, shape);
                let ga = (f(a + e, b) - f(a - e, b)) / (2.0 * e);
                let gb = (f(a, b + e) - f(a, b - e)) / (2.0 * e);
                assert!((ga - g[0]).abs() < 1e-7 * (1.0 + g[0].abs()));
                assert!((gb - g[1]).abs() < 1e-7 * (1.0 + g[1].abs()));
                let d = |a: f64, b: f64| logpdf_ab_derivs(y, a, b, shape).unwrap().1;
                let haa = (d(a + e, b)[0] - d(a - e, b)[0]) / (2.0 * e);
                let hab = (d(a, b + e)[0] - d(a, b - e)[0]) / (2.0 * e);
                let hbb = (d(a, b + e)[1] - d(a, b - e)[1]) / (2.0 * e);
                assert!((haa - h[0]).abs() < 1e-6 * (1.0 + h[0].abs()));
                assert!((hab - h[1]).abs() < 1e-6 * (1.0 + h[1].abs()));
                assert!((hbb - h[2]).abs() < 1e-6 * (1.0 + h[2].abs()));
            }
        }
    }

    #[test]
    fn gumbel_continuity() {
        let tiny = pos(0.3, 0.2, 1e-8);
        let g = GevParams::gumbel(0.3, 0.2).unwrap();
        for k in 0..=80 {
            let y = -3.0 + 0.1 * k as f64;
            let d = (tiny.logpdf(y).unwrap() - g.logpdf(y).unwrap()).abs();
            assert!(d < 1e-5, "y={y} diff={d}");
        }
    }

    proptest! {
        #[test]
        fn quantile_cdf_round_trip(a in -10.0..10.0f64, b in -2.0..2.0f64, s in -6.0..0.5f64, gumbel: bool, q in 0.001..0.999f64) {
            let shape = if gumbel { Shape::Gumbel } else { Shape::LogShape(s) };
            let p = GevParams::new(a, b, shape).unwrap();
            let z = p.quantile(q).unwrap();
            prop_assert!((p.cdf(z).unwrap() - (1.0 - q)).abs() < 1e-10);
        }

        #[test]
        fn cdf_monotone(a in -5.0..5.0f64, b in -1.0..1.0f64, s in -4.0..0.5f64, y0 in -10.0..10.0f64, dy in 0.0..5.0f64) {
            let p = GevParams::new(a, b, Shape::LogShape(s)).unwrap();
            prop_assert!(p.cdf(y0).unwrap() <= p.cdf(y0 + dy).unwrap());
        }

        #[test]
        fn support_boundary(a in -5.0..5.0f64, b in -1.0..1.0f64, s in -2.5..0.5f64, d in 1e-2..10.0f64) {
            let p = GevParams::new(a, b, Shape::LogShape(s)).unwrap();
            let lo = p.lower_bound();
            prop_assert_eq!(p.logpdf(lo - d).unwrap(), f64::NEG_INFINITY);
            prop_assert!(p.logpdf(lo + d).unwrap().is_finite());
        }
    }
}
