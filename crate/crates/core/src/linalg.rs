//! Thin dense linear-algebra layer over `faer`.

use faer::linalg::solvers::{DenseSolveCore, Solve};
use faer::linalg::triangular_solve;
use faer::{Mat, MatRef, Par, Side};

use crate::error::{Error, Result};

/// Lower Cholesky factor `L` of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    llt: faer::linalg::solvers::Llt<f64>,
    log_det: f64,
}

impl Cholesky {
    /// Factors `a` (only the lower triangle is read).
    ///
    /// A failed pivot is reported as the 1-based order of the leading minor
    /// that is not positive.
    pub fn new(a: MatRef<'_, f64>) -> Result<Self> {
        if a.nrows() != a.ncols() {
            return Err(Error::Dimension { expected: a.nrows(), actual: a.ncols() });
        }
        let llt = a.llt(Side::Lower).map_err(|e| match e {
            faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index } => {
                Error::SingularCovariance { minor: index + 1 }
            }
        })?;
        let l = llt.L();
        let mut log_det = 0.0;
        for i in 0..l.nrows() {
            let d = l[(i, i)];
            if !(d > 0.0 && d.is_finite()) {
                return Err(Error::SingularCovariance { minor: i + 1 });
            }
            log_det += d.ln();
        }
        Ok(Self { llt, log_det: 2.0 * log_det })
    }

    pub fn dim(&self) -> usize {
        self.llt.L().nrows()
    }

    pub fn l(&self) -> MatRef<'_, f64> {
        self.llt.L()
    }

    /// `log |A|`.
    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// Solves `A x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let mut x = col(b);
        self.llt.solve_in_place(x.as_mut());
        x.col_as_slice(0).to_vec()
    }

    /// Solves `A X = B` for a matrix right-hand side.
    pub fn solve_mat(&self, mut b: Mat<f64>) -> Mat<f64> {
        self.llt.solve_in_place(b.as_mut());
        b
    }

    /// `L^{-1} b`.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let mut x = col(b);
        triangular_solve::solve_lower_triangular_in_place(self.l(), x.as_mut(), Par::Seq);
        x.col_as_slice(0).to_vec()
    }

    /// `L^{-1} B` in place.
    pub fn solve_lower_mat(&self, mut b: Mat<f64>) -> Mat<f64> {
        triangular_solve::solve_lower_triangular_in_place(self.l(), b.as_mut(), Par::Seq);
        b
    }

    /// `L z`.
    pub fn mul_lower(&self, z: &[f64]) -> Vec<f64> {
        mul_lower(self.l(), z)
    }

    /// Dense `A^{-1}`.
    pub fn inverse(&self) -> Mat<f64> {
        self.llt.inverse()
    }

    /// `L L^T`.
    pub fn reconstruct(&self) -> Mat<f64> {
        self.llt.reconstruct()
    }
}

/// `L z` for a lower-triangular `L`.
pub fn mul_lower(l: MatRef<'_, f64>, z: &[f64]) -> Vec<f64> {
    let n = l.nrows();
    assert_eq!(z.len(), n);
    let mut out = vec![0.0; n];
    for (j, &zj) in z.iter().enumerate() {
        if zj == 0.0 {
            continue;
        }
        for i in j..n {
            out[i] += l[(i, j)] * zj;
        }
    }
    out
}

/// Column vector as an `n x 1` matrix.
pub fn col(v: &[f64]) -> Mat<f64> {
    Mat::from_fn(v.len(), 1, |i, _| v[i])
}

/// `A x` for a dense matrix.
pub fn mat_vec(a: MatRef<'_, f64>, x: &[f64]) -> Vec<f64> {
    assert_eq!(a.ncols(), x.len());
    let mut out = vec![0.0; a.nrows()];
    for (j, &xj) in x.iter().enumerate() {
        for (i, o) in out.iter_mut().enumerate() {
            *o += a[(i, j)] * xj;
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Replaces `a` by `(a + a^T) / 2`.
pub fn symmetrize(a: &mut Mat<f64>) {
    let n = a.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let m = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = m;
            a[(j, i)] = m;
        }
    }
}

/// Nearest symmetric positive definite matrix by eigenvalue clipping.
///
/// Returns the projected matrix and whether any eigenvalue was clipped.
pub fn clip_to_pd(a: MatRef<'_, f64>, floor: f64) -> Result<(Mat<f64>, bool)> {
    let mut sym = a.to_owned();
    symmetrize(&mut sym);
    let evd = sym
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::Domain("eigendecomposition did not converge".into()))?;
    let u = evd.U();
    let s = evd.S();
    let n = sym.nrows();
    let vals: Vec<f64> = (0..n).map(|i| s[i]).collect();
    if vals.iter().all(|&v| v >= floor) {
        return Ok((sym, false));
    }
    let clipped: Vec<f64> = vals.iter().map(|&v| v.max(floor)).collect();
    let mut out = Mat::<f64>::zeros(n, n);
    for k in 0..n {
        let lam = clipped[k];
        for j in 0..n {
            let ujk = u[(j, k)] * lam;
            for i in 0..n {
                out[(i, j)] += u[(i, k)] * ujk;
            }
        }
    }
    symmetrize(&mut out);
    Ok((out, true))
}

/// A square root `R` with `R R^T = a` for symmetric `a`.
///
/// Uses the Cholesky factor when `a` is positive definite, otherwise
/// `U diag(sqrt(lambda))` from the eigendecomposition. Eigenvalues within
/// rounding of zero are treated as zero (positive semidefinite input);
/// clearly negative ones are raised to `floor`, which is reported by the
/// returned flag.
pub fn psd_root(a: MatRef<'_, f64>, floor: f64) -> Result<(Mat<f64>, bool)> {
    let mut sym = a.to_owned();
    symmetrize(&mut sym);
    let n = sym.nrows();
    if let Ok(c) = Cholesky::new(sym.as_ref()) {
        let l = c.l();
        return Ok((Mat::from_fn(n, n, |i, j| if i >= j { l[(i, j)] } else { 0.0 }), false));
    }
    let evd = sym
        .self_adjoint_eigen(Side::Lower)
        .map_err(|_| Error::Domain("eigendecomposition did not converge".into()))?;
    let u = evd.U();
    let s = evd.S();
    let vals: Vec<f64> = (0..n).map(|i| s[i]).collect();
    let scale = vals.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let tol = 1e-10 * scale.max(f64::MIN_POSITIVE);
    let clipped = vals.iter().any(|&v| v < -tol);
    let roots: Vec<f64> = vals
        .iter()
        .map(|&v| if clipped { v.max(floor).sqrt() } else { v.max(0.0).sqrt() })
        .collect();
    Ok((Mat::from_fn(n, n, |i, k| u[(i, k)] * roots[k]), clipped))
}

/// Serde adapter storing a dense matrix as a list of rows.
pub mod mat_serde {
    use faer::Mat;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &Mat<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Mat<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(Mat::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
    }
}
