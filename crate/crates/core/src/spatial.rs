//! Cylinder distance, power exponential correlation and the separable
//! cross-mode by spatial covariance `Σ_w = Σ_f ⊗ Ω`.
//!
//! Effects are stacked mode-major: `w = (w_1', w_2')'` with all mode-1 effects
//! first. With `W` the `n x 2` matrix whose columns are `w_1` and `w_2`, the
//! quadratic form is `w' Σ_w⁻¹ w = tr(Σ_f⁻¹ W' Ω⁻¹ W)` and
//! `log|Σ_w| = n log|Σ_f| + 2 log|Ω|`; `Σ_w` itself is only formed on request.

use std::io::Write;

use nalgebra::{Cholesky, DMatrix, Dyn, Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Grid, Location};
use crate::error::{Error, Result};

/// Diagonal jitter added to `Ω` when its first factorization fails.
pub const CHOLESKY_JITTER: f64 = 1e-10;

/// Normalized cylinder distance: the row offset is scaled by `rows - 1` and
/// the wrapped column offset by `floor(cols / 2)`, so the largest distance on
/// any grid is `√2`.
pub fn distance(grid: &Grid, a: Location, b: Location) -> Result<f64> {
    for loc in [a, b] {
        if !grid.contains(loc) {
            return Err(Error::Validation(format!(
                "location ({}, {}) outside the {}x{} grid",
                loc.row, loc.col, grid.rows, grid.cols
            )));
        }
    }
    Ok(distance_unchecked(grid, a, b))
}

fn distance_unchecked(grid: &Grid, a: Location, b: Location) -> f64 {
    let dr = (a.row as f64 - b.row as f64) / (grid.rows - 1) as f64;
    let dc_raw = (a.col as i64 - b.col as i64).unsigned_abs() as usize;
    let dc = dc_raw.min(grid.cols - dc_raw) as f64 / (grid.cols / 2) as f64;
    (dr * dr + dc * dc).sqrt()
}

/// Pairwise distances between a fixed set of locations.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    d: DMatrix<f64>,
}

impl DistanceMatrix {
    pub fn new(grid: &Grid, locations: &[Location]) -> Result<Self> {
        let n = locations.len();
        let mut d = DMatrix::zeros(n, n);
        for s in 0..n {
            for l in 0..s {
                let v = distance(grid, locations[s], locations[l])?;
                d[(s, l)] = v;
                d[(l, s)] = v;
            }
        }
        Ok(Self { d })
    }

    pub fn n(&self) -> usize {
        self.d.nrows()
    }

    pub fn get(&self, s: usize, l: usize) -> f64 {
        self.d[(s, l)]
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CorrelationKind {
    /// `exp(-(d/ν)^κ)` with free `κ ∈ (0, 2]`.
    PowerExponential,
    /// `κ = 1`.
    Exponential,
    /// `κ = 2`.
    Gaussian,
}

impl CorrelationKind {
    pub fn fixed_kappa(self) -> Option<f64> {
        match self {
            Self::PowerExponential => None,
            Self::Exponential => Some(1.0),
            Self::Gaussian => Some(2.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorrelationFamily {
    kind: CorrelationKind,
    nu: f64,
    kappa: f64,
}

impl CorrelationFamily {
    pub fn new(kind: CorrelationKind, nu: f64, kappa: f64) -> Result<Self> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(Error::Validation(format!("range ν must be positive, got {nu}")));
        }
        let kappa = match kind.fixed_kappa() {
            Some(k) => k,
            None if kappa > 0.0 && kappa <= 2.0 => kappa,
            None => return Err(Error::Validation(format!("power κ must lie in (0, 2], got {kappa}"))),
        };
        Ok(Self { kind, nu, kappa })
    }

    pub fn power_exponential(nu: f64, kappa: f64) -> Result<Self> {
        Self::new(CorrelationKind::PowerExponential, nu, kappa)
    }

    pub fn kind(&self) -> CorrelationKind {
        self.kind
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn kappa(&self) -> f64 {
        self.kappa
    }
}

/// `exp(-(d/ν)^κ)`.
pub fn correlation(family: &CorrelationFamily, d: f64) -> f64 {
    power_exponential(d, family.nu, family.kappa)
}

pub(crate) fn power_exponential(d: f64, nu: f64, kappa: f64) -> f64 {
    if d == 0.0 {
        1.0
    } else {
        (-(d / nu).powf(kappa)).exp()
    }
}

/// Correlation matrix `Ω` for range `ν` and power `κ`.
pub fn correlation_matrix(dist: &DistanceMatrix, nu: f64, kappa: f64) -> DMatrix<f64> {
    let n = dist.n();
    let mut omega = DMatrix::identity(n, n);
    for s in 0..n {
        for l in 0..s {
            let v = power_exponential(dist.get(s, l), nu, kappa);
            omega[(s, l)] = v;
            omega[(l, s)] = v;
        }
    }
    omega
}

/// Cross-mode covariance `[[σ1², ρσ1σ2], [ρσ1σ2, σ2²]]`.
pub fn cross_mode_covariance(sigma1: f64, sigma2: f64, rho: f64) -> Matrix2<f64> {
    let c = rho * sigma1 * sigma2;
    Matrix2::new(sigma1 * sigma1, c, c, sigma2 * sigma2)
}

pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 0 {
        return f64::INFINITY;
    }
    SymmetricEigen::new(m.clone()).eigenvalues.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Cholesky factorization with one jitter retry; reports the smallest
/// eigenvalue when both attempts fail.
pub fn cholesky_with_jitter(m: &DMatrix<f64>) -> Result<(Cholesky<f64, Dyn>, bool)> {
    if let Some(c) = Cholesky::new(m.clone()) {
        return Ok((c, false));
    }
    let mut jittered = m.clone();
    for i in 0..m.nrows() {
        jittered[(i, i)] += CHOLESKY_JITTER;
    }
    match Cholesky::new(jittered) {
        Some(c) => Ok((c, true)),
        None => Err(Error::NotPositiveDefinite { min_eigenvalue: min_eigenvalue(m) }),
    }
}

/// Factored `Σ_f ⊗ Ω`: log-determinant, solves and quadratic forms without the
/// dense `2n x 2n` matrix.
#[derive(Debug, Clone)]
pub struct KroneckerFactor {
    sigma_f: Matrix2<f64>,
    chol_f: Matrix2<f64>,
    chol_omega: Cholesky<f64, Dyn>,
}

impl KroneckerFactor {
    pub fn new(sigma_f: Matrix2<f64>, omega: &DMatrix<f64>) -> Result<Self> {
        let chol_f = sigma_f
            .cholesky()
            .ok_or_else(|| Error::NotPositiveDefinite {
                min_eigenvalue: sigma_f.symmetric_eigenvalues().min(),
            })?
            .l();
        let (chol_omega, _) = cholesky_with_jitter(omega)?;
        Ok(Self { sigma_f, chol_f, chol_omega })
    }

    pub fn n(&self) -> usize {
        self.chol_omega.l_dirty().nrows()
    }

    pub fn log_det_sigma_f(&self) -> f64 {
        2.0 * (self.chol_f[(0, 0)].ln() + self.chol_f[(1, 1)].ln())
    }

    pub fn log_det_omega(&self) -> f64 {
        2.0 * self.chol_omega.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
    }

    /// `log|Σ_f ⊗ Ω| = n log|Σ_f| + 2 log|Ω|`.
    pub fn log_det(&self) -> f64 {
        self.n() as f64 * self.log_det_sigma_f() + 2.0 * self.log_det_omega()
    }

    fn as_columns(&self, w: &[f64]) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.n(), 2, w)
    }

    /// `Σ_w⁻¹ w` for mode-major `w`, computed as `vec(Ω⁻¹ W Σ_f⁻¹)`.
    pub fn solve(&self, w: &[f64]) -> Vec<f64> {
        let omega_inv_w = self.chol_omega.solve(&self.as_columns(w));
        let p = self.sigma_f.try_inverse().expect("Σ_f is positive definite");
        (omega_inv_w * p).as_slice().to_vec()
    }

    pub fn quad_form(&self, w: &[f64]) -> f64 {
        self.solve(w).iter().zip(w).map(|(a, b)| a * b).sum()
    }

    /// `chol(Σ_f) ⊗ chol(Ω)`, the lower Cholesky factor of `Σ_w`.
    pub fn dense_factor(&self) -> DMatrix<f64> {
        let lo = self.chol_omega.l();
        kronecker(&DMatrix::from_fn(2, 2, |i, j| self.chol_f[(i, j)]), &lo)
    }
}

pub fn kronecker(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = a.shape();
    let (br, bc) = b.shape();
    DMatrix::from_fn(ar * br, ac * bc, |i, j| a[(i / br, j / bc)] * b[(i % br, j % bc)])
}

/// Assembled covariance structure for one set of spatial parameters.
#[derive(Debug, Clone)]
pub struct SpatialStructure {
    pub locations: Vec<Location>,
    pub distance: DistanceMatrix,
    pub omega: DMatrix<f64>,
    pub sigma_f: Matrix2<f64>,
    pub factor: KroneckerFactor,
}

impl SpatialStructure {
    /// Dense `Σ_w = Σ_f ⊗ Ω` (mode-major stacking).
    pub fn sigma_w(&self) -> DMatrix<f64> {
        let sf = DMatrix::from_fn(2, 2, |i, j| self.sigma_f[(i, j)]);
        kronecker(&sf, &self.omega)
    }
}

pub fn build_sigma_w(
    grid: &Grid,
    locations: &[Location],
    family: &CorrelationFamily,
    sigma1: f64,
    sigma2: f64,
    rho12: f64,
) -> Result<SpatialStructure> {
    if !(sigma1 > 0.0 && sigma2 > 0.0) {
        return Err(Error::Validation(format!("σ1, σ2 must be positive, got {sigma1}, {sigma2}")));
    }
    if rho12.abs() > 0.95 {
        return Err(Error::Validation(format!("|ρ12| must not exceed 0.95, got {rho12}")));
    }
    let distance = DistanceMatrix::new(grid, locations)?;
    let omega = correlation_matrix(&distance, family.nu, family.kappa);
    let sigma_f = cross_mode_covariance(sigma1, sigma2, rho12);
    let factor = KroneckerFactor::new(sigma_f, &omega)?;
    Ok(SpatialStructure { locations: locations.to_vec(), distance, omega, sigma_f, factor })
}

/// Every cell of a grid in row-major order.
pub fn all_locations(grid: &Grid) -> Vec<Location> {
    (0..grid.rows)
        .flat_map(|r| (0..grid.cols).map(move |c| Location::new(r as u8, c as u8)))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EigenMapPoint {
    pub nu: f64,
    pub kappa: f64,
    pub min_eig: f64,
}

/// Smallest eigenvalue of `Ω(ν, κ)` over a grid of range and power values.
pub fn min_eigenvalue_map(nu_grid: &[f64], kappa_grid: &[f64], dist: &DistanceMatrix) -> Result<Vec<EigenMapPoint>> {
    if nu_grid.is_empty() || kappa_grid.is_empty() {
        return Err(Error::Validation("eigenvalue map grids must be nonempty".into()));
    }
    if nu_grid.iter().any(|&v| !(v > 0.0)) || kappa_grid.iter().any(|&k| !(k > 0.0 && k <= 2.0)) {
        return Err(Error::Validation("eigenvalue map grid outside ν > 0, κ ∈ (0, 2]".into()));
    }
    let mut out = Vec::with_capacity(nu_grid.len() * kappa_grid.len());
    for &nu in nu_grid {
        for &kappa in kappa_grid {
            let omega = correlation_matrix(dist, nu, kappa);
            out.push(EigenMapPoint { nu, kappa, min_eig: min_eigenvalue(&omega) });
        }
    }
    Ok(out)
}

pub fn write_eigen_map<W: Write>(points: &[EigenMapPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["nu", "kappa", "min_eig"])?;
    for p in points {
        w.write_record([p.nu.to_string(), p.kappa.to_string(), p.min_eig.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `n` evenly spaced values over `[lo, hi]`.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}
