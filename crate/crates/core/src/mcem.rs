//! Monte Carlo EM. The E-step runs Metropolis-within-Gibbs over the location
//! intercepts `u_ik = μ_k + w_ik`; the M-step maximizes the Monte Carlo
//! complete-data log likelihood by quasi-Newton on the unconstrained scale.

use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, Matrix2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::{minimize, BfgsOptions};
use crate::params::{dot, CorrStructure, ModelConfig, ParamLayout, SpatialField, ThetaT, ThetaW, MU1, MU2};
use crate::posterior::{add_covariance_gradient, unit_log_lik, Posterior};
use crate::spatial::{cholesky_with_jitter, correlation_matrix, cross_mode_covariance, kronecker, linspace, min_eigenvalue, DistanceMatrix};
use crate::special::TWO_PI;

/// Upper end of the `ν` grid used to locate the positive-definite boundary.
pub const NU_GRID_MAX: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct McemConfig {
    pub max_iters: usize,
    /// E-step sweeps discarded before retaining draws.
    pub burn_in: usize,
    /// Retained draws at iteration `t` are `base_samples + samples_per_iter * (t - 1)`.
    pub base_samples: usize,
    pub samples_per_iter: usize,
    /// Sweeps between retained draws.
    pub thin: usize,
    pub proposal_sd: f64,
    /// Largest absolute change of any unconstrained parameter that counts as
    /// converged.
    pub tolerance: f64,
    /// Objective value assigned to `(ν, κ)` outside the positive-definite region.
    pub penalty: f64,
    /// Points per axis of the `(ν, κ)` boundary grid.
    pub grid_resolution: usize,
    pub seed: u64,
}

impl Default for McemConfig {
    fn default() -> Self {
        Self {
            max_iters: 30,
            burn_in: 200,
            base_samples: 100,
            samples_per_iter: 50,
            thin: 5,
            proposal_sd: 0.05,
            tolerance: 0.01,
            penalty: 10_000.0,
            grid_resolution: 40,
            seed: 1,
        }
    }
}

impl McemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 || self.base_samples == 0 || self.thin == 0 || self.grid_resolution < 2 {
            return Err(Error::Config("max_iters, base_samples, thin must be positive and grid_resolution >= 2".into()));
        }
        if !(self.proposal_sd > 0.0 && self.tolerance > 0.0 && self.penalty > 0.0) {
            return Err(Error::Config("proposal_sd, tolerance and penalty must be positive".into()));
        }
        Ok(())
    }

    pub fn retained(&self, iteration: usize) -> usize {
        self.base_samples + self.samples_per_iter * iteration.saturating_sub(1)
    }
}

/// Largest admissible `ν` for each `κ` on a grid, from the smallest
/// eigenvalue of `Ω`.
#[derive(Debug, Clone, PartialEq)]
pub struct PdBoundary {
    pub kappa: Vec<f64>,
    /// `+inf` when no grid `ν` failed.
    pub nu_max: Vec<f64>,
}

impl PdBoundary {
    pub fn new(dist: &DistanceMatrix, kappa: Vec<f64>, resolution: usize) -> Self {
        let nu_grid = linspace(NU_GRID_MAX / resolution as f64, NU_GRID_MAX, resolution);
        let nu_max = kappa
            .iter()
            .map(|&k| {
                let mut best = 0.0;
                for &nu in &nu_grid {
                    if min_eigenvalue(&correlation_matrix(dist, nu, k)) <= 0.0 {
                        return best;
                    }
                    best = nu;
                }
                f64::INFINITY
            })
            .collect();
        Self { kappa, nu_max }
    }

    fn for_structure(dist: &DistanceMatrix, corr: CorrStructure, resolution: usize) -> Self {
        let kappa = match corr.kind().and_then(|k| k.fixed_kappa()) {
            Some(k) => vec![k],
            None => linspace(2.0 / resolution as f64, 2.0, resolution),
        };
        Self::new(dist, kappa, resolution)
    }

    /// Conservative test: between grid columns the smaller bound applies.
    pub fn contains(&self, nu: f64, kappa: f64) -> bool {
        if self.kappa.len() == 1 {
            return nu < self.nu_max[0];
        }
        let pos = self.kappa.partition_point(|&k| k < kappa);
        let bound = if pos == 0 {
            self.nu_max[0]
        } else if pos >= self.kappa.len() {
            self.nu_max[self.kappa.len() - 1]
        } else {
            self.nu_max[pos - 1].min(self.nu_max[pos])
        };
        nu < bound
    }
}

/// Current iterate of the algorithm.
#[derive(Debug, Clone, PartialEq)]
pub struct McemState {
    /// Non-effect unconstrained parameters in layout order.
    pub theta: Vec<f64>,
    /// Location-major interleaved intercepts `(u_11, u_12, ..., u_n1, u_n2)`.
    pub u: Vec<f64>,
    /// Retained E-step draws of `u`.
    pub e_draws: Vec<Vec<f64>>,
    pub iteration: usize,
    proposal_sd: Vec<f64>,
    adapt_batches: usize,
}

impl McemState {
    pub fn proposal_sd(&self) -> &[f64] {
        &self.proposal_sd
    }
}

/// Interleaved `u` to mode-major order.
pub fn interleaved_to_mode_major(u: &[f64]) -> Vec<f64> {
    let n = u.len() / 2;
    let mut w = vec![0.0; u.len()];
    for i in 0..n {
        w[i] = u[2 * i];
        w[n + i] = u[2 * i + 1];
    }
    w
}

pub fn mode_major_to_interleaved(w: &[f64]) -> Vec<f64> {
    let n = w.len() / 2;
    let mut u = vec![0.0; w.len()];
    for i in 0..n {
        u[2 * i] = w[i];
        u[2 * i + 1] = w[n + i];
    }
    u
}

/// Single-site Metropolis sampler for `u` at fixed parameters.
pub(crate) struct Gibbs<'p> {
    mcem: &'p Mcem<'p>,
    tt: ThetaT,
    mu: [f64; 2],
    /// Precision `Ω⁻¹ ⊗ Σ_f⁻¹` in interleaved order.
    pub(crate) b: DMatrix<f64>,
    pub(crate) u: Vec<f64>,
    /// `B (u - μ)`.
    r: Vec<f64>,
    xb: Vec<[f64; 2]>,
    ll: Vec<f64>,
    pub(crate) loc_units: Vec<Vec<usize>>,
    pub(crate) sd: Vec<f64>,
    scratch: Vec<f64>,
}

/// `a₂` of the acceptance log-probability for moving coordinate `l` by `y`,
/// given `r = B (u - μ)`.
pub fn prior_log_ratio(b: &DMatrix<f64>, r: &[f64], l: usize, y: f64) -> f64 {
    -y * r[l] - 0.5 * y * y * b[(l, l)]
}

impl<'p> Gibbs<'p> {
    fn new(mcem: &'p Mcem<'p>, theta: &[f64], u: Vec<f64>, sd: Vec<f64>) -> Result<Self> {
        let (tt, tw) = mcem.layout.constrain_theta(theta);
        let b = mcem.precision(&tw)?;
        let mu = [tt.mu1, tt.mu2];
        let data = mcem.post.data();
        let xb: Vec<[f64; 2]> = (0..data.len())
            .map(|j| {
                let x = data.covariates(j);
                [dot(x, &tt.beta1), dot(x, &tt.beta2)]
            })
            .collect();
        let mut g = Self {
            mcem,
            tt,
            mu,
            b,
            r: Vec::new(),
            xb,
            ll: vec![0.0; data.len()],
            loc_units: mcem.loc_units.clone(),
            sd,
            scratch: Vec::new(),
            u,
        };
        g.refresh();
        Ok(g)
    }

    fn refresh(&mut self) {
        let dev: Vec<f64> = self.u.iter().enumerate().map(|(l, v)| v - self.mu[l % 2]).collect();
        self.r = (&self.b * nalgebra::DVector::from_vec(dev)).iter().copied().collect();
        for j in 0..self.ll.len() {
            self.ll[j] = self.unit(j, &self.u);
        }
    }

    fn unit_at(&self, j: usize, u1: f64, u2: f64) -> f64 {
        let m = &self.mcem;
        let rec = &m.post.data().records()[j];
        let y = m.post.log_times()[j];
        unit_log_lik(m.config.family, m.config.mixture, y, rec.event, u1 + self.xb[j][0], u2 + self.xb[j][1], &self.tt, None)
    }

    fn unit(&self, j: usize, u: &[f64]) -> f64 {
        let i = self.mcem.post.data().location_of(j);
        self.unit_at(j, u[2 * i], u[2 * i + 1])
    }

    /// One Metropolis update of coordinate `l`; returns whether it moved.
    pub(crate) fn update<R: Rng>(&mut self, l: usize, rng: &mut R) -> bool {
        let z: f64 = rng.sample(StandardNormal);
        let y = self.sd[l] * z;
        let a2 = prior_log_ratio(&self.b, &self.r, l, y);
        let i = l / 2;
        let (mut u1, mut u2) = (self.u[2 * i], self.u[2 * i + 1]);
        if l % 2 == 0 {
            u1 += y;
        } else {
            u2 += y;
        }
        self.scratch.clear();
        let mut a1 = 0.0;
        for &j in &self.loc_units[i] {
            let v = self.unit_at(j, u1, u2);
            self.scratch.push(v);
            a1 += v - self.ll[j];
        }
        let log_alpha = a1 + a2;
        if !(log_alpha.is_finite() || log_alpha == f64::INFINITY) {
            return false;
        }
        if log_alpha >= 0.0 || rng.random::<f64>().ln() < log_alpha {
            self.u[l] += y;
            for (r, b) in self.r.iter_mut().zip(self.b.column(l).iter()) {
                *r += y * b;
            }
            for (k, &j) in self.loc_units[i].iter().enumerate() {
                self.ll[j] = self.scratch[k];
            }
            true
        } else {
            false
        }
    }

    /// Updates every coordinate once in interleaved order; returns per-coordinate
    /// acceptance flags.
    fn sweep<R: Rng>(&mut self, rng: &mut R, accepted: &mut [usize]) {
        for l in 0..self.u.len() {
            if self.update(l, rng) {
                accepted[l] += 1;
            }
        }
    }
}

/// Outcome of one M-step.
#[derive(Debug, Clone, PartialEq)]
pub struct MStep {
    pub theta: Vec<f64>,
    /// Monte Carlo estimate of the expected complete-data log likelihood.
    pub objective: f64,
}

/// One row of the parameter trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub iter: usize,
    /// Constrained parameters in [`ParamLayout::theta_names`] order.
    pub values: Vec<f64>,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct McemResult {
    pub names: Vec<String>,
    pub theta_u: Vec<f64>,
    pub theta_t: ThetaT,
    pub theta_w: ThetaW,
    pub trajectory: Vec<TrajectoryRow>,
    pub converged: bool,
    /// Mean E-step acceptance rate of the final iteration.
    pub acceptance: f64,
    /// Posterior-mean location intercepts from the final E-step, interleaved.
    pub u_mean: Vec<f64>,
}

impl McemResult {
    /// Constrained estimate by parameter name.
    pub fn estimate(&self, name: &str) -> Option<f64> {
        let i = self.names.iter().position(|n| n == name)?;
        self.trajectory.last().map(|r| r.values[i])
    }

    /// CSV with header `iter,<names>,objective`.
    pub fn write_trajectory_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["iter".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("objective".into());
        w.write_record(&header)?;
        for row in &self.trajectory {
            let mut rec = vec![row.iter.to_string()];
            rec.extend(row.values.iter().map(|v| v.to_string()));
            rec.push(row.objective.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_trajectory_csv_path(&self, path: &Path) -> Result<()> {
        self.write_trajectory_csv(std::fs::File::create(path)?)
    }
}

/// Expected first and second moments of `u - μ`, mode-major.
struct Moments {
    mean: Vec<f64>,
    second: DMatrix<f64>,
}

/// MCEM problem on one dataset.
pub struct Mcem<'a> {
    post: Posterior<'a>,
    config: ModelConfig,
    layout: ParamLayout,
    pub(crate) cfg: McemConfig,
    loc_units: Vec<Vec<usize>>,
    distance: Option<DistanceMatrix>,
    log_distance: Option<DMatrix<f64>>,
    boundary: Option<PdBoundary>,
}

impl<'a> Mcem<'a> {
    pub fn new(data: &'a Dataset, config: ModelConfig, cfg: McemConfig) -> Result<Self> {
        cfg.validate()?;
        if !config.corr.has_effects() {
            return Err(Error::Config("MCEM needs a model with random effects".into()));
        }
        if data.len() == 0 {
            return Err(Error::Validation("MCEM needs a nonempty dataset".into()));
        }
        let post = Posterior::new(data, config)?;
        let layout = post.layout().clone();
        let n = data.n_locations();
        let mut loc_units = vec![Vec::new(); n];
        for j in 0..data.len() {
            loc_units[data.location_of(j)].push(j);
        }
        let (distance, log_distance, boundary) = if config.corr.has_range() {
            let d = DistanceMatrix::new(&data.grid(), data.locations())?;
            let ld = d.matrix().map(|v| if v > 0.0 { v.ln() } else { 0.0 });
            let b = PdBoundary::for_structure(&d, config.corr, cfg.grid_resolution);
            (Some(d), Some(ld), Some(b))
        } else {
            (None, None, None)
        };
        Ok(Self { post, config, layout, cfg, loc_units, distance, log_distance, boundary })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn boundary(&self) -> Option<&PdBoundary> {
        self.boundary.as_ref()
    }

    fn n(&self) -> usize {
        self.layout.n_locations()
    }

    fn omega(&self, tw: &ThetaW) -> DMatrix<f64> {
        match &self.distance {
            Some(d) => correlation_matrix(d, tw.nu, tw.kappa),
            None => DMatrix::identity(self.n(), self.n()),
        }
    }

    fn admissible(&self, tw: &ThetaW) -> bool {
        self.boundary.as_ref().is_none_or(|b| b.contains(tw.nu, tw.kappa))
    }

    /// `B = Ω⁻¹ ⊗ Σ_f⁻¹`, the precision of the interleaved `u`.
    pub fn precision(&self, tw: &ThetaW) -> Result<DMatrix<f64>> {
        let sigma_f = cross_mode_covariance(tw.sigma1, tw.sigma2, tw.rho12);
        let p = sigma_f
            .try_inverse()
            .filter(|_| sigma_f.determinant() > 0.0)
            .ok_or(Error::NotPositiveDefinite { min_eigenvalue: sigma_f.symmetric_eigenvalues().min() })?;
        let omega = self.omega(tw);
        let m = min_eigenvalue(&omega);
        if m <= 0.0 {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: m });
        }
        let (chol, _) = cholesky_with_jitter(&omega)?;
        let p_dyn = DMatrix::from_fn(2, 2, |r, c| p[(r, c)]);
        Ok(kronecker(&chol.inverse(), &p_dyn))
    }

    /// Starting point: a fit without random effects for the likelihood
    /// parameters, small effect variances and a range well inside the
    /// positive-definite region.
    pub fn initial_state(&self) -> Result<McemState> {
        let data = self.post.data();
        let plain = ModelConfig { corr: CorrStructure::None, ..self.config };
        let plain_post = Posterior::new(data, plain)?;
        let nt = plain_post.layout().n_theta();
        let mut x0 = vec![0.0; nt];
        let y = plain_post.log_times();
        let mean_y = y.iter().sum::<f64>() / y.len() as f64;
        x0[MU1] = mean_y + 1.0;
        x0[MU2] = mean_y + 1.0;
        let empty = SpatialField::zeros(0);
        let fit = minimize(
            |x, g| match plain_post.log_joint(x, &empty, true) {
                Ok(e) if e.log_lik.is_finite() => {
                    for (gi, v) in g.iter_mut().zip(&e.grad_theta) {
                        *gi = -v;
                    }
                    -e.log_lik
                }
                _ => f64::INFINITY,
            },
            &x0,
            BfgsOptions::default(),
        );
        if !fit.f.is_finite() {
            return Err(Error::Numerical("initial fit without random effects failed".into()));
        }
        let (tt, _) = plain_post.layout().constrain_theta(&fit.x);
        let mut tw = ThetaW { sigma1: 0.1, sigma2: 0.1, rho12: 0.0, nu: f64::NAN, kappa: f64::NAN };
        let (_, defaults) = self.layout.constrain_theta(&vec![0.0; self.layout.n_theta()]);
        tw.kappa = defaults.kappa;
        if self.config.corr.has_range() {
            if self.config.corr.has_free_kappa() {
                tw.kappa = 1.0;
            }
            let cap = self.boundary.as_ref().map_or(f64::INFINITY, |b| {
                let i = b.kappa.partition_point(|&k| k < tw.kappa).min(b.kappa.len() - 1);
                b.nu_max[i]
            });
            tw.nu = 0.25f64.min(0.5 * cap);
        }
        let theta = self.layout.unconstrain(&tt, &tw, &SpatialField::zeros(self.n()))?[..self.layout.n_theta()].to_vec();
        let u = (0..2 * self.n()).map(|l| if l % 2 == 0 { tt.mu1 } else { tt.mu2 }).collect();
        Ok(McemState {
            theta,
            u,
            e_draws: Vec::new(),
            iteration: 0,
            proposal_sd: vec![self.cfg.proposal_sd; 2 * self.n()],
            adapt_batches: 0,
        })
    }

    /// Runs burn-in with proposal adaptation towards 0.44 acceptance, then
    /// retains `n_keep` thinned draws. Returns the acceptance rate over the
    /// retained sweeps.
    pub fn e_step<R: Rng>(&self, state: &mut McemState, n_keep: usize, rng: &mut R) -> Result<f64> {
        let mut g = Gibbs::new(self, &state.theta, state.u.clone(), state.proposal_sd.clone())?;
        let dim = g.u.len();
        const BATCH: usize = 25;
        let mut acc = vec![0usize; dim];
        for s in 0..self.cfg.burn_in {
            g.sweep(rng, &mut acc);
            if (s + 1) % BATCH == 0 {
                state.adapt_batches += 1;
                let delta = (1.0 / (state.adapt_batches as f64).sqrt()).min(0.5);
                for l in 0..dim {
                    let rate = acc[l] as f64 / BATCH as f64;
                    g.sd[l] *= if rate > 0.44 { delta.exp() } else { (-delta).exp() };
                }
                acc.fill(0);
            }
        }
        acc.fill(0);
        state.e_draws.clear();
        let total = n_keep * self.cfg.thin;
        for s in 0..total {
            g.sweep(rng, &mut acc);
            if (s + 1) % self.cfg.thin == 0 {
                state.e_draws.push(g.u.clone());
            }
        }
        state.u = g.u;
        state.proposal_sd = g.sd;
        Ok(acc.iter().sum::<usize>() as f64 / (total * dim).max(1) as f64)
    }

    fn lik_indices(&self) -> Vec<usize> {
        let l = &self.layout;
        let mut idx: Vec<usize> = l.beta1().chain(l.beta2()).collect();
        idx.push(l.log_xi1());
        idx.push(l.log_xi21());
        idx.extend([l.log_xi22(), l.log_eta(), l.logit_lambda()].into_iter().flatten());
        idx
    }

    fn mvn_indices(&self) -> Vec<usize> {
        let l = &self.layout;
        let mut idx = vec![MU1, MU2];
        idx.extend([l.log_sigma1(), l.log_sigma2(), l.rho(), l.log_nu(), l.logit_kappa()].into_iter().flatten());
        idx
    }

    /// Mean over draws of the log likelihood, with its gradient with respect
    /// to the non-effect coordinates.
    pub fn expected_log_likelihood(&self, theta: &[f64], draws: &[Vec<f64>], grad: Option<&mut [f64]>) -> f64 {
        let (mut tt, _) = self.layout.constrain_theta(theta);
        tt.mu1 = 0.0;
        tt.mu2 = 0.0;
        let nt = self.layout.n_theta();
        let want = grad.is_some();
        let parts: Vec<(f64, Vec<f64>)> = draws
            .par_iter()
            .map(|u| {
                let w = SpatialField::from_vec(interleaved_to_mode_major(u)).expect("even length");
                if want {
                    let mut g = vec![0.0; nt];
                    let mut gw = vec![0.0; u.len()];
                    let v = self.post.log_likelihood_grad(&tt, &w, &mut g, &mut gw);
                    (v, g)
                } else {
                    (self.post.log_likelihood(&tt, &w), Vec::new())
                }
            })
            .collect();
        let s = draws.len() as f64;
        let mut total = 0.0;
        let mut g_total = vec![0.0; nt];
        for (v, g) in &parts {
            total += v;
            for (a, b) in g_total.iter_mut().zip(g) {
                *a += b;
            }
        }
        if let Some(out) = grad {
            for (o, v) in out.iter_mut().zip(&g_total) {
                *o = v / s;
            }
        }
        total / s
    }

    fn moments(draws: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
        let dim = draws[0].len();
        let s = draws.len() as f64;
        let mut mean = vec![0.0; dim];
        let mut second = DMatrix::zeros(dim, dim);
        for u in draws {
            let w = interleaved_to_mode_major(u);
            for a in 0..dim {
                mean[a] += w[a] / s;
                for b in 0..=a {
                    second[(a, b)] += w[a] * w[b] / s;
                }
            }
        }
        for a in 0..dim {
            for b in 0..a {
                second[(b, a)] = second[(a, b)];
            }
        }
        (mean, second)
    }

    fn centered(&self, mu: [f64; 2], ubar: &[f64], s: &DMatrix<f64>) -> Moments {
        let n = self.n();
        let m = |a: usize| mu[a / n];
        let mean: Vec<f64> = (0..2 * n).map(|a| ubar[a] - m(a)).collect();
        let second = DMatrix::from_fn(2 * n, 2 * n, |a, b| s[(a, b)] - ubar[a] * m(b) - m(a) * ubar[b] + m(a) * m(b));
        Moments { mean, second }
    }

    /// Expected MVN log density of the effects given mode-major moments
    /// `ubar = E[u]`, `s = E[u u']`, with gradient over the non-effect
    /// coordinates. `None` outside the positive-definite region.
    pub fn expected_log_mvn(&self, theta: &[f64], ubar: &[f64], s: &DMatrix<f64>, grad: Option<&mut [f64]>) -> Option<f64> {
        let (tt, tw) = self.layout.constrain_theta(theta);
        if !self.admissible(&tw) {
            return None;
        }
        let n = self.n();
        let mo = self.centered([tt.mu1, tt.mu2], ubar, s);
        let sigma_f = cross_mode_covariance(tw.sigma1, tw.sigma2, tw.rho12);
        let det_f = sigma_f.determinant();
        if !(det_f > 0.0) {
            return None;
        }
        let p = sigma_f.try_inverse()?;
        let omega = self.omega(&tw);
        let (chol, _) = cholesky_with_jitter(&omega).ok()?;
        let log_det_omega = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let oinv = chol.inverse();
        let block = |k: usize, l: usize| mo.second.view((k * n, l * n), (n, n)).into_owned();
        let mut g2 = Matrix2::zeros();
        for k in 0..2 {
            for l in 0..2 {
                g2[(k, l)] = oinv.component_mul(&block(k, l)).sum();
            }
        }
        let quad = (p * g2).trace();
        let value = -(n as f64) * TWO_PI.ln() - 0.5 * (n as f64 * det_f.ln() + 2.0 * log_det_omega) - 0.5 * quad;
        if !value.is_finite() {
            return None;
        }
        if let Some(g) = grad {
            g.fill(0.0);
            let wbar = DMatrix::from_column_slice(n, 2, &mo.mean);
            let p_dyn = DMatrix::from_fn(2, 2, |r, c| p[(r, c)]);
            let awp = &oinv * &wbar * &p_dyn;
            for k in 0..2 {
                g[[MU1, MU2][k]] = awp.column(k).sum();
            }
            let m = p * g2 * p - p * n as f64;
            let k = self.log_distance.as_ref().map(|_| {
                let mut h = DMatrix::zeros(n, n);
                for a in 0..2 {
                    for b in 0..2 {
                        h += block(a, b) * p[(a, b)];
                    }
                }
                &oinv * h * &oinv - &oinv * 2.0
            });
            add_covariance_gradient(&self.layout, &tw, &m, k.as_ref(), &omega, self.log_distance.as_ref(), g);
        }
        Some(value)
    }

    /// Negative penalized MVN objective over the MVN block coordinates.
    fn mvn_objective(&self, theta: &[f64], idx: &[usize], x: &[f64], ubar: &[f64], s: &DMatrix<f64>, g: &mut [f64]) -> f64 {
        let mut th = theta.to_vec();
        for (&i, &v) in idx.iter().zip(x) {
            th[i] = v;
        }
        let mut full = vec![0.0; th.len()];
        match self.expected_log_mvn(&th, ubar, s, Some(&mut full)) {
            Some(v) => {
                for (gi, &i) in g.iter_mut().zip(idx) {
                    *gi = -full[i];
                }
                -v
            }
            None => {
                g.fill(0.0);
                self.cfg.penalty
            }
        }
    }

    /// Penalized negative expected MVN log density; exposed for checking the
    /// boundary penalty.
    pub fn penalized_mvn_objective(&self, theta: &[f64], draws: &[Vec<f64>]) -> f64 {
        let (ubar, s) = Self::moments(draws);
        let idx = self.mvn_indices();
        let x: Vec<f64> = idx.iter().map(|&i| theta[i]).collect();
        let mut g = vec![0.0; idx.len()];
        self.mvn_objective(theta, &idx, &x, &ubar, &s, &mut g)
    }

    /// Expected complete-data log likelihood at `theta` over `draws`.
    pub fn q_function(&self, theta: &[f64], draws: &[Vec<f64>]) -> f64 {
        let (ubar, s) = Self::moments(draws);
        let mvn = self.expected_log_mvn(theta, &ubar, &s, None).unwrap_or(-self.cfg.penalty);
        self.expected_log_likelihood(theta, draws, None) + mvn
    }

    fn optimize_block<F>(&self, mut f: F, x0: &[f64], rng: &mut ChaCha8Rng) -> Result<Vec<f64>>
    where
        F: FnMut(&[f64], &mut [f64]) -> f64,
    {
        let mut g0 = vec![0.0; x0.len()];
        let f0 = f(x0, &mut g0);
        let mut start = x0.to_vec();
        for _ in 0..3 {
            let m = minimize(&mut f, &start, BfgsOptions { max_iters: 200, grad_tol: 1e-6, f_tol: 1e-12 });
            if m.f.is_finite() && (m.f <= f0 || !f0.is_finite()) {
                return Ok(m.x);
            }
            start = x0.iter().map(|v| v + rng.random_range(-0.1..0.1)).collect();
        }
        Err(Error::Numerical("M-step did not improve the objective after 3 restarts".into()))
    }

    /// Maximizes the Monte Carlo complete-data log likelihood. The likelihood
    /// and effect-density blocks share no parameters and are optimized
    /// separately.
    pub fn m_step(&self, theta: &[f64], draws: &[Vec<f64>]) -> Result<MStep> {
        if draws.is_empty() {
            return Err(Error::Validation("M-step needs at least one E-step draw".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed ^ 0x9e37_79b9);
        let mut out = theta.to_vec();

        let idx = self.lik_indices();
        let nt = self.layout.n_theta();
        let x0: Vec<f64> = idx.iter().map(|&i| theta[i]).collect();
        let x = self.optimize_block(
            |x, g| {
                let mut th = theta.to_vec();
                for (&i, &v) in idx.iter().zip(x) {
                    th[i] = v;
                }
                let mut full = vec![0.0; nt];
                let v = self.expected_log_likelihood(&th, draws, Some(&mut full));
                for (gi, &i) in g.iter_mut().zip(&idx) {
                    *gi = -full[i];
                }
                if v.is_finite() { -v } else { f64::INFINITY }
            },
            &x0,
            &mut rng,
        )?;
        for (&i, v) in idx.iter().zip(x) {
            out[i] = v;
        }

        let (ubar, s) = Self::moments(draws);
        let idx = self.mvn_indices();
        let x0: Vec<f64> = idx.iter().map(|&i| theta[i]).collect();
        let x = self.optimize_block(|x, g| self.mvn_objective(theta, &idx, x, &ubar, &s, g), &x0, &mut rng)?;
        for (&i, v) in idx.iter().zip(x) {
            out[i] = v;
        }
        let objective = self.q_function(&out, draws);
        Ok(MStep { theta: out, objective })
    }

    /// Alternates E and M steps until the largest parameter change falls
    /// below the tolerance or the iteration cap is reached.
    pub fn run(&self) -> Result<McemResult> {
        let mut state = self.initial_state()?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut trajectory = Vec::new();
        let mut converged = false;
        let mut acceptance = f64::NAN;
        for it in 1..=self.cfg.max_iters {
            acceptance = self.e_step(&mut state, self.cfg.retained(it), &mut rng)?;
            let step = self.m_step(&state.theta, &state.e_draws)?;
            let change = step.theta.iter().zip(&state.theta).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            let (tt, tw) = self.layout.constrain_theta(&step.theta);
            trajectory.push(TrajectoryRow { iter: it, values: self.layout.theta_vector(&tt, &tw), objective: step.objective });
            log::debug!("MCEM iteration {it}: max change {change:.4}, objective {:.3}", step.objective);
            state.theta = step.theta;
            state.iteration = it;
            if change < self.cfg.tolerance {
                converged = true;
                break;
            }
        }
        if !converged {
            log::warn!("MCEM stopped after {} iterations without meeting the tolerance", self.cfg.max_iters);
        }
        let s = state.e_draws.len() as f64;
        let u_mean = (0..state.u.len()).map(|l| state.e_draws.iter().map(|d| d[l]).sum::<f64>() / s).collect();
        let (theta_t, theta_w) = self.layout.constrain_theta(&state.theta);
        Ok(McemResult {
            names: self.layout.theta_names(),
            theta_u: state.theta,
            theta_t,
            theta_w,
            trajectory,
            converged,
            acceptance,
            u_mean,
        })
    }
}

/// Runs Monte Carlo EM for one model on one dataset.
pub fn run_mcem(data: &Dataset, config: ModelConfig, cfg: McemConfig) -> Result<McemResult> {
    Mcem::new(data, config, cfg)?.run()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariates, EventType, FailureRecord, Grid, Location};
    use crate::distributions::DistributionFamily;
    use crate::simulation::{simulate, SimConfig, SimTruth};
    use crate::spatial::KroneckerFactor;

    fn sim_problem(n: usize, d: usize, seed: u64) -> (Dataset, crate::simulation::SimOutput) {
        let out = simulate(&SimConfig::new(n, d, seed)).unwrap();
        (out.dataset.clone(), out)
    }

    fn truth_theta(m: &Mcem) -> Vec<f64> {
        let t = SimTruth::table1();
        m.layout.unconstrain(&t.theta_t, &t.theta_w, &SpatialField::zeros(m.n())).unwrap()[..m.layout.n_theta()].to_vec()
    }

    #[test]
    fn zero_proposal_has_zero_prior_ratio() {
        let b = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        assert_eq!(prior_log_ratio(&b, &[0.7, -1.2], 1, 0.0), 0.0);
    }

    #[test]
    fn prior_ratio_matches_density_difference() {
        let (data, _) = sim_problem(300, 3, 1);
        let m = Mcem::new(&data, SimTruth::table1().model_config(), McemConfig::default()).unwrap();
        let th = truth_theta(&m);
        let (_, tw) = m.layout.constrain_theta(&th);
        let b = m.precision(&tw).unwrap();
        let dev: Vec<f64> = (0..18).map(|l| 0.05 * ((l * 7 % 5) as f64 - 2.0)).collect();
        let q = |v: &[f64]| {
            let x = nalgebra::DVector::from_column_slice(v);
            -0.5 * (x.transpose() * &b * &x)[(0, 0)]
        };
        let r: Vec<f64> = (&b * nalgebra::DVector::from_column_slice(&dev)).iter().copied().collect();
        for l in [0, 5, 17] {
            let mut moved = dev.clone();
            moved[l] += 0.13;
            assert!((prior_log_ratio(&b, &r, l, 0.13) - (q(&moved) - q(&dev))).abs() < 1e-12);
        }
    }

    #[test]
    fn interleaved_and_mode_major_quadratic_forms_agree() {
        let (data, _) = sim_problem(400, 4, 2);
        let m = Mcem::new(&data, SimTruth::table1().model_config(), McemConfig::default()).unwrap();
        let tw = ThetaW { sigma1: 0.3, sigma2: 0.2, rho12: 0.6, nu: 0.3, kappa: 1.3 };
        let b = m.precision(&tw).unwrap();
        let omega = m.omega(&tw);
        let factor = KroneckerFactor::new(cross_mode_covariance(0.3, 0.2, 0.6), &omega).unwrap();
        let n = m.n();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let u: Vec<f64> = (0..2 * n).map(|_| rng.sample(StandardNormal)).collect();
            let x = nalgebra::DVector::from_column_slice(&u);
            let interleaved = (x.transpose() * &b * &x)[(0, 0)];
            let mode_major = factor.quad_form(&interleaved_to_mode_major(&u));
            assert!((interleaved - mode_major).abs() < 1e-8 * mode_major.abs().max(1.0));
        }
        assert_eq!(mode_major_to_interleaved(&interleaved_to_mode_major(&[1.0, 2.0, 3.0, 4.0])), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn coordinate_without_data_targets_conditional_normal() {
        let (data, _) = sim_problem(300, 3, 3);
        let m = Mcem::new(&data, SimTruth::table1().model_config(), McemConfig::default()).unwrap();
        let th = truth_theta(&m);
        let n = m.n();
        let mut u: Vec<f64> = (0..2 * n).map(|l| if l % 2 == 0 { 1.7 } else { 1.55 }).collect();
        u[3] += 0.1;
        u[6] -= 0.08;
        let mut g = Gibbs::new(&m, &th, u.clone(), vec![0.1; 2 * n]).unwrap();
        g.loc_units[0].clear();
        let l = 0;
        let b = g.b.clone();
        let mu = [1.7, 1.55];
        let cond_mean = mu[0] - (0..2 * n).filter(|&j| j != l).map(|j| b[(l, j)] * (u[j] - mu[j % 2])).sum::<f64>() / b[(l, l)];
        let cond_sd = (1.0 / b[(l, l)]).sqrt();
        g.sd[l] = 2.4 * cond_sd;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut xs = Vec::with_capacity(40_000);
        for _ in 0..40_000 {
            g.update(l, &mut rng);
            xs.push(g.u[l]);
        }
        let ess = crate::diagnostics::ess_bulk(&xs.chunks(10_000).map(<[f64]>::to_vec).collect::<Vec<_>>());
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let se = cond_sd / ess.sqrt();
        assert!((mean - cond_mean).abs() < 3.0 * se, "mean {mean} vs {cond_mean} (se {se})");
        let var = xs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!((var.sqrt() / cond_sd - 1.0).abs() < 0.05);
    }

    #[test]
    fn single_location_conjugate_mean() {
        // lognormal mode-1 failures at one location; mode 2 never fails
        // within the window, so u_1 | data is normal with a closed form.
        let ys = [0.9, 1.1, 1.3, 0.8, 1.25, 1.05, 0.95, 1.4];
        let records: Vec<FailureRecord> = ys
            .iter()
            .enumerate()
            .map(|(j, &y): (usize, &f64)| FailureRecord {
                unit_id: format!("u{j}"),
                location: Location::new(0, 0),
                covariates: Covariates::Values(vec![]),
                time: y.exp(),
                event: EventType::Mode1,
            })
            .collect();
        let data = Dataset::new(Grid::square(2).unwrap(), records).unwrap();
        let config = ModelConfig {
            family: DistributionFamily::Lognormal,
            corr: CorrStructure::Indep,
            mixture: false,
            ..ModelConfig::default()
        };
        let m = Mcem::new(&data, config, McemConfig::default()).unwrap();
        let (mu, xi, sigma) = (1.5, 0.3, 0.2);
        let tt = ThetaT {
            mu1: mu,
            mu2: 3.0,
            beta1: vec![],
            beta2: vec![],
            xi1: xi,
            xi21: 0.2,
            xi22: f64::NAN,
            eta: f64::NAN,
            lambda: 1.0,
        };
        let tw = ThetaW { sigma1: sigma, sigma2: 0.1, rho12: 0.0, nu: f64::NAN, kappa: f64::NAN };
        let th = m.layout.unconstrain(&tt, &tw, &SpatialField::zeros(1)).unwrap();
        let mut g = Gibbs::new(&m, &th, vec![mu, 3.0], vec![0.1, 0.1]).unwrap();
        let prec = 1.0 / (sigma * sigma) + ys.len() as f64 / (xi * xi);
        let post_mean = (mu / (sigma * sigma) + ys.iter().sum::<f64>() / (xi * xi)) / prec;
        g.sd[0] = 2.4 / prec.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut xs = Vec::new();
        for _ in 0..40_000 {
            g.update(0, &mut rng);
            xs.push(g.u[0]);
        }
        let ess = crate::diagnostics::ess_bulk(&xs.chunks(10_000).map(<[f64]>::to_vec).collect::<Vec<_>>());
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        assert!((mean - post_mean).abs() < 3.0 / prec.sqrt() / ess.sqrt(), "{mean} vs {post_mean}");
    }

    #[test]
    fn expected_mvn_gradient_matches_finite_differences() {
        let (data, _) = sim_problem(300, 3, 4);
        let m = Mcem::new(&data, SimTruth::table1().model_config(), McemConfig::default()).unwrap();
        let mut th = truth_theta(&m);
        th[MU1] += 0.05;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draws: Vec<Vec<f64>> = (0..20)
            .map(|_| (0..18).map(|l| [1.7, 1.55][l % 2] + 0.15 * rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let (ubar, s) = Mcem::moments(&draws);
        let mut g = vec![0.0; th.len()];
        m.expected_log_mvn(&th, &ubar, &s, Some(&mut g)).unwrap();
        for i in m.mvn_indices() {
            let h = 1e-5;
            let mut a = th.clone();
            let mut b = th.clone();
            a[i] += h;
            b[i] -= h;
            let fd = (m.expected_log_mvn(&a, &ubar, &s, None).unwrap() - m.expected_log_mvn(&b, &ubar, &s, None).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0), "coordinate {i}: {fd} vs {}", g[i]);
        }
        // a single draw reproduces the posterior's MVN term
        let one = vec![draws[0].clone()];
        let (ubar, s) = Mcem::moments(&one);
        let w: Vec<f64> = interleaved_to_mode_major(&draws[0]).iter().enumerate().map(|(a, v)| v - [th[MU1], th[MU2]][a / 9]).collect();
        let joint = m.post.log_joint(&th, &SpatialField::from_vec(w).unwrap(), false).unwrap();
        assert!((m.expected_log_mvn(&th, &ubar, &s, None).unwrap() - joint.log_mvn).abs() < 1e-9);
    }

    #[test]
    fn boundary_penalty_dominates_interior() {
        let (data, _) = sim_problem(400, 5, 5);
        let m = Mcem::new(&data, SimTruth::table1().model_config(), McemConfig::default()).unwrap();
        let boundary = m.boundary().unwrap();
        let (ki, nu_max) = boundary.nu_max.iter().copied().enumerate().find(|(_, v)| v.is_finite()).expect("some κ column has a boundary");
        let kappa = boundary.kappa[ki];
        let th = truth_theta(&m);
        let draws = vec![m.initial_state().unwrap().u];
        let layout = &m.layout;
        let with = |nu: f64, kappa: f64| {
            let mut t = th.clone();
            t[layout.log_nu().unwrap()] = nu.ln();
            t[layout.logit_kappa().unwrap()] = crate::special::logit(kappa / 2.0);
            m.penalized_mvn_objective(&t, &draws)
        };
        let outside = with(nu_max * 1.5, kappa);
        assert_eq!(outside, m.cfg.penalty);
        for nu in linspace(0.02, 0.95 * nu_max, 10) {
            for k in [0.3, 1.0, 1.52] {
                if boundary.contains(nu, k) {
                    assert!(with(nu, k) < outside);
                }
            }
        }
    }

    #[test]
    fn m_step_recovers_scale_from_true_effects() {
        let out = simulate(&SimConfig::new(5000, 5, 6)).unwrap();
        let m = Mcem::new(&out.dataset, SimTruth::table1().model_config(), McemConfig::default()).unwrap();
        let th = truth_theta(&m);
        let w = out.effects_at_data_locations();
        let truth = SimTruth::table1().theta_t;
        let shifted: Vec<f64> = w.as_slice().iter().enumerate().map(|(a, v)| v + [truth.mu1, truth.mu2][a / m.n()]).collect();
        let draws = vec![mode_major_to_interleaved(&shifted)];
        let mut start = th.clone();
        start[m.layout.log_xi1()] = 0.5f64.ln();
        let step = m.m_step(&start, &draws).unwrap();
        let (tt, _) = m.layout.constrain_theta(&step.theta);
        assert!((tt.xi1 - 0.19).abs() < 0.02, "xi1 = {}", tt.xi1);
        assert!(step.objective >= m.q_function(&start, &draws));
    }

    #[test]
    fn m_step_ascends_the_q_function() {
        let (data, _) = sim_problem(800, 4, 7);
        let cfg = McemConfig { burn_in: 100, base_samples: 30, ..McemConfig::default() };
        let m = Mcem::new(&data, SimTruth::table1().model_config(), cfg).unwrap();
        let mut state = m.initial_state().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..3 {
            let rate = m.e_step(&mut state, 30, &mut rng).unwrap();
            assert!(rate > 0.1 && rate < 0.7, "acceptance {rate}");
            let before = m.q_function(&state.theta, &state.e_draws);
            let step = m.m_step(&state.theta, &state.e_draws).unwrap();
            assert!(step.objective >= before - 1e-9, "{} < {before}", step.objective);
            state.theta = step.theta;
        }
    }

    #[test]
    fn run_emits_trajectory() {
        let (data, _) = sim_problem(600, 3, 8);
        let cfg = McemConfig { max_iters: 3, burn_in: 50, base_samples: 20, samples_per_iter: 10, ..McemConfig::default() };
        let res = run_mcem(&data, SimTruth::table1().model_config(), cfg).unwrap();
        assert!(!res.trajectory.is_empty() && res.trajectory.len() <= 3);
        let mut buf = Vec::new();
        res.write_trajectory_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("iter,mu1,mu2,beta1[1]"));
        assert!(text.lines().next().unwrap().ends_with(",kappa,objective"));
        assert!(res.estimate("xi1").unwrap() > 0.0);
    }

    #[test]
    fn rejects_models_without_effects() {
        let (data, _) = sim_problem(300, 3, 9);
        let config = ModelConfig { corr: CorrStructure::None, ..ModelConfig::default() };
        assert!(matches!(Mcem::new(&data, config, McemConfig::default()), Err(Error::Config(_))));
    }
}
