//! Ellipsoidal uncertainty sets.
//!
//! The stacked disturbance `zeta = [d0_bar; d_0; ..; d_{T-1}]` lives in
//! `U[tau] = { Gamma z : z' S z <= tau }`. Linearization errors get their own
//! per-timestep ellipsoids `{ e : (e - c)' S_e (e - c) <= tau_e }`.
//!
//! All `S^{-1}`-weighted norms go through the cached Cholesky factor.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-10;

fn check_symmetric(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::invalid(format!("{what} must be a nonempty square matrix")));
    }
    let scale = m.amax().max(1.0);
    for i in 0..m.nrows() {
        for j in 0..i {
            if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!("{what} is not symmetric")));
            }
        }
    }
    Ok(())
}

fn cholesky(m: &DMatrix<f64>, what: &str) -> Result<Cholesky<f64, Dyn>> {
    check_symmetric(m, what)?;
    Cholesky::new(m.clone()).ok_or_else(|| Error::invalid(format!("{what} is not positive definite")))
}

/// `||v||_{M^{-1}}` given the Cholesky factor of `M`.
fn inv_weighted_norm(chol: &Cholesky<f64, Dyn>, v: &DVector<f64>) -> f64 {
    chol.l_dirty()
        .solve_lower_triangular(v)
        .expect("Cholesky factor has a nonzero diagonal")
        .norm()
}

#[derive(Debug, Clone)]
pub struct UncertaintySet {
    gamma: DMatrix<f64>,
    s: DMatrix<f64>,
    tau: f64,
    chol_s: Cholesky<f64, Dyn>,
    /// `L^{-1} Gamma'` with `S = L L'`, so that `||Gamma' c||_{S^{-1}} = ||W c||`.
    whitened: DMatrix<f64>,
}

impl PartialEq for UncertaintySet {
    fn eq(&self, other: &Self) -> bool {
        self.gamma == other.gamma && self.s == other.s && self.tau == other.tau
    }
}

impl UncertaintySet {
    pub fn new(gamma: DMatrix<f64>, s: DMatrix<f64>, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau >= 0.0) {
            return Err(Error::invalid(format!("tau must be finite and nonnegative, got {tau}")));
        }
        if gamma.ncols() != s.nrows() {
            return Err(Error::invalid(format!(
                "Gamma has {} columns but S is {}x{}",
                gamma.ncols(),
                s.nrows(),
                s.ncols()
            )));
        }
        let chol_s = cholesky(&s, "S")?;
        let whitened = chol_s
            .l_dirty()
            .solve_lower_triangular(&gamma.transpose())
            .expect("Cholesky factor has a nonzero diagonal");
        Ok(Self { gamma, s, tau, chol_s, whitened })
    }

    /// `Gamma` with i.i.d. uniform(-1, 1) entries.
    pub fn random_gamma<R: Rng + ?Sized>(rng: &mut R, rows: usize, n_z: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, n_z, |_, _| rng.gen_range(-1.0..1.0))
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn s(&self) -> &DMatrix<f64> {
        &self.s
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn n_z(&self) -> usize {
        self.gamma.ncols()
    }

    /// Length of the stacked disturbance.
    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    /// `L^{-1} Gamma'` (`n_z x dim`).
    pub fn whitened_gamma_t(&self) -> &DMatrix<f64> {
        &self.whitened
    }

    pub fn with_tau(&self, tau: f64) -> Result<Self> {
        Self::new(self.gamma.clone(), self.s.clone(), tau)
    }

    /// `max_{zeta in U[tau]} c' zeta = sqrt(tau) ||Gamma' c||_{S^{-1}}`.
    pub fn support(&self, c: &DVector<f64>) -> Result<f64> {
        if c.len() != self.dim() {
            return Err(Error::invalid(format!(
                "support direction has length {}, expected {}",
                c.len(),
                self.dim()
            )));
        }
        let gc = self.gamma.tr_mul(c);
        Ok(self.tau.sqrt() * inv_weighted_norm(&self.chol_s, &gc))
    }

    /// Coordinates `z` with `z' S z <= tau`. Interior samples are uniform in
    /// volume; boundary samples satisfy `z' S z = tau`.
    pub fn sample_z<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, boundary: bool) -> Vec<DVector<f64>> {
        let n_z = self.n_z();
        let scale = self.tau.sqrt();
        (0..n)
            .map(|_| {
                let mut g = DVector::from_fn(n_z, |_, _| StandardNormal.sample(rng));
                let norm = g.norm();
                if norm > 0.0 {
                    g /= norm;
                }
                if !boundary {
                    let u: f64 = rng.gen();
                    g *= u.powf(1.0 / n_z as f64);
                }
                // z = sqrt(tau) L^{-T} g gives z' S z = tau ||g||^2
                let z = self
                    .chol_s
                    .l_dirty()
                    .tr_solve_lower_triangular(&g)
                    .expect("Cholesky factor has a nonzero diagonal");
                z * scale
            })
            .collect()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize, boundary: bool) -> Vec<DVector<f64>> {
        self.sample_z(rng, n, boundary)
            .into_iter()
            .map(|z| &self.gamma * z)
            .collect()
    }
}

/// `{ e : (e - center)' shape (e - center) <= level }`.
#[derive(Debug, Clone)]
pub struct ErrorEllipsoid {
    center: DVector<f64>,
    shape: DMatrix<f64>,
    level: f64,
    chol: Cholesky<f64, Dyn>,
}

impl PartialEq for ErrorEllipsoid {
    fn eq(&self, other: &Self) -> bool {
        self.center == other.center && self.shape == other.shape && self.level == other.level
    }
}

impl ErrorEllipsoid {
    pub fn new(center: DVector<f64>, shape: DMatrix<f64>, level: f64) -> Result<Self> {
        if !(level.is_finite() && level >= 0.0) {
            return Err(Error::invalid(format!("ellipsoid level must be nonnegative, got {level}")));
        }
        if shape.nrows() != center.len() {
            return Err(Error::invalid("ellipsoid shape and center dimensions differ"));
        }
        let chol = cholesky(&shape, "error ellipsoid shape")?;
        Ok(Self { center, shape, level, chol })
    }

    /// Zero-centered, zero-level set: contributes nothing to a robust margin.
    pub fn trivial(n_x: usize) -> Self {
        Self::new(DVector::zeros(n_x), DMatrix::identity(n_x, n_x), 0.0)
            .expect("identity is positive definite")
    }

    pub fn center(&self) -> &DVector<f64> {
        &self.center
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn dim(&self) -> usize {
        self.center.len()
    }

    /// `(e - c)' S_e (e - c)`.
    pub fn membership(&self, e: &DVector<f64>) -> f64 {
        let d = e - &self.center;
        d.dot(&(&self.shape * &d))
    }

    /// `max_{e in E} g' e = g' c + sqrt(level) ||g||_{S_e^{-1}}`.
    pub fn support(&self, g: &DVector<f64>) -> f64 {
        if self.level == 0.0 {
            return g.dot(&self.center);
        }
        g.dot(&self.center) + self.level.sqrt() * inv_weighted_norm(&self.chol, g)
    }

    /// Draw `n` points on the boundary of the ellipsoid.
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Vec<DVector<f64>> {
        (0..n)
            .map(|_| {
                let mut g = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
                let norm = g.norm();
                if norm > 0.0 {
                    g /= norm;
                }
                let off = self
                    .chol
                    .l_dirty()
                    .tr_solve_lower_triangular(&g)
                    .expect("Cholesky factor has a nonzero diagonal");
                &self.center + off * self.level.sqrt()
            })
            .collect()
    }
}

/// JSON form of an [`ErrorEllipsoid`] (row-major shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorEllipsoidRecord {
    pub timestep: usize,
    pub center: Vec<f64>,
    pub shape: Vec<Vec<f64>>,
    pub level: f64,
}

impl ErrorEllipsoid {
    pub fn to_record(&self, timestep: usize) -> ErrorEllipsoidRecord {
        ErrorEllipsoidRecord {
            timestep,
            center: self.center.iter().copied().collect(),
            shape: self
                .shape
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
            level: self.level,
        }
    }

    pub fn from_record(rec: &ErrorEllipsoidRecord) -> Result<Self> {
        let shape = crate::models::rows_to_matrix(&rec.shape)?;
        Self::new(DVector::from_column_slice(&rec.center), shape, rec.level)
    }
}

/// Regularizer added to sample covariances before inversion.
fn covariance_regularizer(cov: &DMatrix<f64>) -> f64 {
    let n = cov.nrows() as f64;
    1e-9 * (cov.trace() / n).max(1e-12)
}

/// Fit one ellipsoid per timestep from observed linearization errors.
///
/// Center is the sample mean, shape the inverse of the regularized sample
/// covariance, and level `inflation` times the largest observed Mahalanobis
/// residual, so every input sample is contained when `inflation >= 1`.
pub fn fit_error_ellipsoids(samples: &[Vec<DVector<f64>>], inflation: f64) -> Result<Vec<ErrorEllipsoid>> {
    if !(inflation.is_finite() && inflation >= 1.0) {
        return Err(Error::invalid(format!("inflation must be >= 1, got {inflation}")));
    }
    samples
        .iter()
        .enumerate()
        .map(|(k, pts)| {
            let n_x = pts.first().map_or(0, DVector::len);
            if n_x == 0 || pts.len() < n_x + 1 {
                return Err(Error::invalid(format!(
                    "timestep {k}: need at least n_x + 1 = {} error samples, got {}",
                    n_x + 1,
                    pts.len()
                )));
            }
            if pts.iter().any(|p| p.len() != n_x) {
                return Err(Error::invalid(format!("timestep {k}: inconsistent sample dimensions")));
            }
            let n = pts.len() as f64;
            let mean = pts.iter().fold(DVector::zeros(n_x), |acc, p| acc + p) / n;
            let mut cov = DMatrix::zeros(n_x, n_x);
            for p in pts {
                let d = p - &mean;
                cov += &d * d.transpose();
            }
            cov /= n - 1.0;
            let eps = covariance_regularizer(&cov);
            for i in 0..n_x {
                cov[(i, i)] += eps;
            }
            let shape = Cholesky::new(cov)
                .ok_or_else(|| Error::invalid(format!("timestep {k}: covariance not positive definite")))?
                .inverse();
            // symmetrize the inverse against round-off
            let shape = (&shape + shape.transpose()) * 0.5;
            let max_resid = pts
                .iter()
                .map(|p| {
                    let d = p - &mean;
                    d.dot(&(&shape * &d))
                })
                .fold(0.0, f64::max);
            ErrorEllipsoid::new(mean, shape, inflation * max_resid)
        })
        .collect()
}

/// `sum_k [ g_k' c_k + sqrt(level_k) ||g_k||_{S_k^{-1}} ]` over the timestep
/// slices `g_k` of a constraint gradient.
pub fn error_support(ellipsoids: &[ErrorEllipsoid], grad_slices: &[DVector<f64>]) -> Result<f64> {
    if ellipsoids.len() != grad_slices.len() {
        return Err(Error::invalid(format!(
            "{} error ellipsoids but {} gradient slices",
            ellipsoids.len(),
            grad_slices.len()
        )));
    }
    let mut total = 0.0;
    for (e, g) in ellipsoids.iter().zip(grad_slices) {
        if g.len() != e.dim() {
            return Err(Error::invalid("gradient slice and ellipsoid dimensions differ"));
        }
        if g.iter().all(|&v| v == 0.0) {
            continue;
        }
        total += e.support(g);
    }
    Ok(total)
}
