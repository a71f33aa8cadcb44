//! Log joint density of parameters and random effects with analytic
//! gradients, on the unconstrained scale used by the samplers.

use std::sync::atomic::{AtomicU64, Ordering};

use nalgebra::{DMatrix, Matrix2};

use crate::data::{Dataset, EventType};
use crate::distributions::{component_log_pdf, component_log_surv, mixture_log, DistributionFamily, Term};
use crate::error::{Error, Result};
use crate::params::{dot, ModelConfig, ParamLayout, PriorConfig, SpatialField, ThetaT, ThetaW, MU1, MU2, RHO_BOUND};
use crate::spatial::{cholesky_with_jitter, cross_mode_covariance, DistanceMatrix};
use crate::special::{ln_beta, ln_gamma, log_sigmoid, sigmoid, LOG_TWO, TWO_PI};

/// A differentiable log density on `R^dim`.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;

    /// Returns the log density and writes its gradient into `grad`. A
    /// non-finite return marks the point as outside the support.
    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64;

    fn log_density(&self, x: &[f64]) -> f64 {
        let mut g = vec![0.0; self.dim()];
        self.log_density_grad(x, &mut g)
    }

    /// Names the term responsible for a non-finite density at `x`.
    fn describe_non_finite(&self, _x: &[f64]) -> String {
        "log density is not finite".into()
    }
}

/// Partial derivatives of one unit's log likelihood.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct UnitGrad {
    m1: f64,
    m21: f64,
    log_xi1: f64,
    log_xi21: f64,
    log_xi22: f64,
    eta: f64,
    logit_lambda: f64,
}

/// Log likelihood and MVN log density with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct JointEval {
    pub log_lik: f64,
    pub log_mvn: f64,
    /// Gradient with respect to the non-effect unconstrained coordinates.
    pub grad_theta: Vec<f64>,
    /// Gradient with respect to the full mode-major effect vector.
    pub grad_w: Vec<f64>,
}

impl JointEval {
    pub fn value(&self) -> f64 {
        self.log_lik + self.log_mvn
    }
}

/// Posterior of one model on one dataset.
#[derive(Debug)]
pub struct Posterior<'a> {
    data: &'a Dataset,
    config: ModelConfig,
    layout: ParamLayout,
    y: Vec<f64>,
    distance: Option<DistanceMatrix>,
    log_distance: Option<DMatrix<f64>>,
    non_pd: AtomicU64,
}

impl<'a> Posterior<'a> {
    pub fn new(data: &'a Dataset, config: ModelConfig) -> Result<Self> {
        config.prior.validate()?;
        let layout = ParamLayout::new(&config, data.n_covariates(), data.n_locations());
        let y = data.records().iter().map(|r| r.time.ln()).collect();
        let (distance, log_distance) = if config.corr.has_range() {
            let d = DistanceMatrix::new(&data.grid(), data.locations())?;
            let ld = d.matrix().map(|v| if v > 0.0 { v.ln() } else { 0.0 });
            (Some(d), Some(ld))
        } else {
            (None, None)
        };
        Ok(Self { data, config, layout, y, distance, log_distance, non_pd: AtomicU64::new(0) })
    }

    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn family(&self) -> DistributionFamily {
        self.config.family
    }

    /// Log failure or censoring times.
    pub fn log_times(&self) -> &[f64] {
        &self.y
    }

    /// Number of evaluations rejected because `Ω` was not positive definite.
    pub fn non_pd_count(&self) -> u64 {
        self.non_pd.load(Ordering::Relaxed)
    }

    fn unit(&self, j: usize, tt: &ThetaT, w: &SpatialField, grad: Option<&mut UnitGrad>) -> f64 {
        let x = self.data.covariates(j);
        let (w1, w2) = if w.n() > 0 {
            let i = self.data.location_of(j);
            (w.get(i, 1), w.get(i, 2))
        } else {
            (0.0, 0.0)
        };
        let m1 = tt.mu1 + dot(x, &tt.beta1) + w1;
        let m21 = tt.mu2 + dot(x, &tt.beta2) + w2;
        unit_log_lik(self.config.family, self.config.mixture, self.y[j], self.data.records()[j].event, m1, m21, tt, grad)
    }

    /// Per-unit log likelihood conditional on the effects.
    pub fn pointwise_log_likelihood(&self, tt: &ThetaT, w: &SpatialField) -> Vec<f64> {
        (0..self.data.len()).map(|j| self.unit(j, tt, w, None)).collect()
    }

    /// Log likelihood of unit `j` conditional on the effects.
    pub fn unit_log_likelihood(&self, j: usize, tt: &ThetaT, w: &SpatialField) -> f64 {
        self.unit(j, tt, w, None)
    }

    pub fn log_likelihood(&self, tt: &ThetaT, w: &SpatialField) -> f64 {
        (0..self.data.len()).map(|j| self.unit(j, tt, w, None)).sum()
    }

    /// Log likelihood with gradients accumulated into the non-effect
    /// coordinates and the full effect vector.
    pub(crate) fn log_likelihood_grad(&self, tt: &ThetaT, w: &SpatialField, g_theta: &mut [f64], g_w: &mut [f64]) -> f64 {
        let l = &self.layout;
        let p = l.p();
        let n = w.n();
        let (b1, b2) = (l.beta1().start, l.beta2().start);
        let mut total = 0.0;
        for j in 0..self.data.len() {
            let mut ug = UnitGrad::default();
            let v = self.unit(j, tt, w, Some(&mut ug));
            total += v;
            if !v.is_finite() {
                return f64::NEG_INFINITY;
            }
            let x = self.data.covariates(j);
            g_theta[MU1] += ug.m1;
            g_theta[MU2] += ug.m21;
            for c in 0..p {
                g_theta[b1 + c] += ug.m1 * x[c];
                g_theta[b2 + c] += ug.m21 * x[c];
            }
            g_theta[l.log_xi1()] += ug.log_xi1;
            g_theta[l.log_xi21()] += ug.log_xi21;
            if let (Some(a), Some(b), Some(c)) = (l.log_xi22(), l.log_eta(), l.logit_lambda()) {
                g_theta[a] += ug.log_xi22;
                g_theta[b] += ug.eta * tt.eta;
                g_theta[c] += ug.logit_lambda;
            }
            if n > 0 {
                let i = self.data.location_of(j);
                g_w[i] += ug.m1;
                g_w[n + i] += ug.m21;
            }
        }
        total
    }

    fn omega(&self, tw: &ThetaW) -> DMatrix<f64> {
        match &self.distance {
            Some(d) => crate::spatial::correlation_matrix(d, tw.nu, tw.kappa),
            None => DMatrix::identity(self.layout.n_locations(), self.layout.n_locations()),
        }
    }

    /// `log N(w; 0, Σ_f ⊗ Ω)`, with gradients when `grad` is given.
    fn log_mvn(&self, tw: &ThetaW, w: &SpatialField, grad: Option<(&mut [f64], &mut [f64])>) -> Result<f64> {
        let n = w.n();
        if !self.config.corr.has_effects() || n == 0 {
            return Ok(0.0);
        }
        let sigma_f = cross_mode_covariance(tw.sigma1, tw.sigma2, tw.rho12);
        let det_f = sigma_f.determinant();
        if !(det_f > 0.0) {
            return Err(Error::NotPositiveDefinite { min_eigenvalue: sigma_f.symmetric_eigenvalues().min() });
        }
        let p_f = sigma_f.try_inverse().ok_or(Error::Numerical("singular Σ_f".into()))?;
        let omega = self.omega(tw);
        let (chol, _) = cholesky_with_jitter(&omega)?;
        let log_det_omega = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let wm = DMatrix::from_column_slice(n, 2, w.as_slice());
        let a = chol.solve(&wm);
        let gm = wm.transpose() * &a;
        let g2 = Matrix2::new(gm[(0, 0)], gm[(0, 1)], gm[(1, 0)], gm[(1, 1)]);
        let quad = (p_f * g2).trace();
        let value = -(n as f64) * TWO_PI.ln() - 0.5 * (n as f64 * det_f.ln() + 2.0 * log_det_omega) - 0.5 * quad;

        if let Some((g_theta, g_w)) = grad {
            let l = &self.layout;
            let p_dyn = DMatrix::from_fn(2, 2, |r, c| p_f[(r, c)]);
            let ap = &a * &p_dyn;
            for (gw, v) in g_w.iter_mut().zip(ap.iter()) {
                *gw -= v;
            }
            // d/dΣ_f = ½ (P G P - n P), d/dΩ = ½ (A P A' - 2 Ω⁻¹)
            let m = p_f * g2 * p_f - p_f * n as f64;
            let k = self.log_distance.as_ref().map(|_| &ap * a.transpose() - chol.inverse() * 2.0);
            add_covariance_gradient(l, tw, &m, k.as_ref(), &omega, self.log_distance.as_ref(), g_theta);
        }
        Ok(value)
    }

    /// Log likelihood plus MVN density at non-effect coordinates `theta_u`
    /// and full effects `w`, without priors or Jacobians.
    pub fn log_joint(&self, theta_u: &[f64], w: &SpatialField, with_grad: bool) -> Result<JointEval> {
        let (tt, tw) = self.layout.constrain_theta(theta_u);
        let nt = self.layout.n_theta();
        let mut grad_theta = vec![0.0; nt];
        let mut grad_w = vec![0.0; w.as_slice().len()];
        let log_lik = if with_grad {
            self.log_likelihood_grad(&tt, w, &mut grad_theta, &mut grad_w)
        } else {
            self.log_likelihood(&tt, w)
        };
        let log_mvn = self.log_mvn(&tw, w, with_grad.then_some((&mut grad_theta[..], &mut grad_w[..])))?;
        Ok(JointEval { log_lik, log_mvn, grad_theta, grad_w })
    }

    /// Sum of log prior and log-Jacobian on the unconstrained scale, with
    /// gradient added into `grad`.
    pub fn log_prior_jacobian(&self, u: &[f64], grad: Option<&mut [f64]>) -> f64 {
        prior_jacobian(&self.layout, &self.config.prior, u, grad)
    }

    /// Log posterior density of the unconstrained state; `-inf` outside the
    /// support or where `Ω` is not positive definite.
    pub fn log_posterior(&self, u: &[f64]) -> f64 {
        self.evaluate(u, None)
    }

    pub fn grad_log_posterior(&self, u: &[f64]) -> (f64, Vec<f64>) {
        let mut g = vec![0.0; u.len()];
        let v = self.evaluate(u, Some(&mut g));
        (v, g)
    }

    fn evaluate(&self, u: &[f64], grad: Option<&mut [f64]>) -> f64 {
        if u.len() != self.layout.dim() || u.iter().any(|v| !v.is_finite()) {
            return f64::NEG_INFINITY;
        }
        let want = grad.is_some();
        let mut local = vec![0.0; u.len()];
        let lp = prior_jacobian(&self.layout, &self.config.prior, u, want.then_some(&mut local[..]));
        if !lp.is_finite() {
            return f64::NEG_INFINITY;
        }
        let nt = self.layout.n_theta();
        let w = self.layout.effects(u);
        let joint = match self.log_joint(&u[..nt], &w, want) {
            Ok(j) => j,
            Err(Error::NotPositiveDefinite { .. }) => {
                self.non_pd.fetch_add(1, Ordering::Relaxed);
                return f64::NEG_INFINITY;
            }
            Err(_) => return f64::NEG_INFINITY,
        };
        let total = lp + joint.value();
        if !total.is_finite() {
            return f64::NEG_INFINITY;
        }
        if let Some(g) = grad {
            for (a, b) in local[..nt].iter_mut().zip(&joint.grad_theta) {
                *a += b;
            }
            let n = w.n();
            if n > 1 {
                let free = self.layout.free_effects().start;
                for k in 0..2 {
                    let gw = &joint.grad_w[k * n..(k + 1) * n];
                    for i in 0..n - 1 {
                        local[free + k * (n - 1) + i] += gw[i] - gw[n - 1];
                    }
                }
            }
            g.copy_from_slice(&local);
        }
        total
    }
}

impl LogDensity for Posterior<'_> {
    fn dim(&self) -> usize {
        self.layout.dim()
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let v = self.evaluate(x, Some(grad));
        if !v.is_finite() {
            grad.fill(0.0);
        }
        v
    }

    fn log_density(&self, x: &[f64]) -> f64 {
        self.evaluate(x, None)
    }

    fn describe_non_finite(&self, x: &[f64]) -> String {
        if x.len() != self.layout.dim() {
            return format!("state has length {}, expected {}", x.len(), self.layout.dim());
        }
        if let Some(k) = x.iter().position(|v| !v.is_finite()) {
            return format!("unconstrained coordinate {k} is not finite");
        }
        if !prior_jacobian(&self.layout, &self.config.prior, x, None).is_finite() {
            return "log prior is not finite".into();
        }
        let nt = self.layout.n_theta();
        let w = self.layout.effects(x);
        let tt = self.layout.constrain_theta(&x[..nt]).0;
        if let Some(j) = self.pointwise_log_likelihood(&tt, &w).iter().position(|v| !v.is_finite()) {
            return format!("log likelihood of unit {} is not finite", self.data.records()[j].unit_id);
        }
        match self.log_joint(&x[..nt], &w, false) {
            Err(e) => format!("random-effect density: {e}"),
            Ok(_) => "log density is not finite".into(),
        }
    }
}

/// Adds the gradient of an MVN log density with respect to the covariance
/// coordinates, given `m = ∂/∂Σ_f` and `k = ∂/∂Ω` up to the factor ½.
pub(crate) fn add_covariance_gradient(
    l: &ParamLayout,
    tw: &ThetaW,
    m: &Matrix2<f64>,
    k: Option<&DMatrix<f64>>,
    omega: &DMatrix<f64>,
    log_distance: Option<&DMatrix<f64>>,
    g_theta: &mut [f64],
) {
    let (s1, s2, rho) = (tw.sigma1, tw.sigma2, tw.rho12);
    let off = rho * s1 * s2;
    let contract = |d: Matrix2<f64>| 0.5 * m.component_mul(&d).sum();
    g_theta[l.log_sigma1().unwrap()] += contract(Matrix2::new(2.0 * s1 * s1, off, off, 0.0));
    g_theta[l.log_sigma2().unwrap()] += contract(Matrix2::new(0.0, off, off, 2.0 * s2 * s2));
    let s = (rho / RHO_BOUND + 1.0) / 2.0;
    let drho_du = 2.0 * RHO_BOUND * s * (1.0 - s);
    g_theta[l.rho().unwrap()] += contract(Matrix2::new(0.0, s1 * s2, s1 * s2, 0.0)) * drho_du;

    if let (Some(iv), Some(ld), Some(k)) = (l.log_nu(), log_distance, k) {
        let n = omega.nrows();
        let (nu, kappa) = (tw.nu, tw.kappa);
        let (mut g_nu, mut g_kappa) = (0.0, 0.0);
        for c in 0..n {
            for r in 0..n {
                if r == c {
                    continue;
                }
                let o = omega[(r, c)];
                let lr = ld[(r, c)] - nu.ln();
                let rr = (kappa * lr).exp();
                g_nu += k[(r, c)] * o * kappa * rr;
                g_kappa -= k[(r, c)] * o * rr * lr;
            }
        }
        g_theta[iv] += 0.5 * g_nu;
        if let Some(ik) = l.logit_kappa() {
            g_theta[ik] += 0.5 * g_kappa * kappa * (1.0 - kappa / 2.0);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn unit_log_lik(
    family: DistributionFamily,
    mixture: bool,
    y: f64,
    event: EventType,
    m1: f64,
    m21: f64,
    tt: &ThetaT,
    grad: Option<&mut UnitGrad>,
) -> f64 {
    let mode1 = if event == EventType::Mode1 {
        component_log_pdf(family, y, m1, tt.xi1)
    } else {
        component_log_surv(family, y, m1, tt.xi1)
    };
    let comp = |loc: f64, scale: f64| {
        if event == EventType::Mode2 {
            component_log_pdf(family, y, loc, scale)
        } else {
            component_log_surv(family, y, loc, scale)
        }
    };
    let c1 = comp(m21, tt.xi21);
    let (mode2, mix) = if mixture {
        let c2 = comp(m21 + tt.eta, tt.xi22);
        let (v, r1) = mixture_log(c1.value, c2.value, tt.lambda);
        (v, Some((c2, r1)))
    } else {
        (c1.value, None)
    };
    let total = mode1.value + mode2;
    if let Some(g) = grad {
        fill_grad(g, &mode1, &c1, mix, tt.lambda);
    }
    total
}

fn fill_grad(g: &mut UnitGrad, mode1: &Term, c1: &Term, mix: Option<(Term, f64)>, lambda: f64) {
    g.m1 = mode1.d_loc;
    g.log_xi1 = mode1.d_log_scale;
    match mix {
        None => {
            g.m21 = c1.d_loc;
            g.log_xi21 = c1.d_log_scale;
        }
        Some((c2, r1)) => {
            let r2 = 1.0 - r1;
            g.m21 = r1 * c1.d_loc + r2 * c2.d_loc;
            g.eta = r2 * c2.d_loc;
            g.log_xi21 = r1 * c1.d_log_scale;
            g.log_xi22 = r2 * c2.d_log_scale;
            g.logit_lambda = r1 - lambda;
        }
    }
}

/// `log π(θ)` on the constrained scale: flat for locations, coefficients,
/// `λ`, `η` and `ρ12`; `1/ξ` and `1/σ` for scales; `IG(a, b)` for `ν`;
/// `Beta(c, d)` for `κ/2`. `-inf` outside the support.
pub fn log_prior(config: &ModelConfig, tt: &ThetaT, tw: &ThetaW) -> f64 {
    let mut lp = 0.0;
    let mut scales = vec![tt.xi1, tt.xi21];
    if config.mixture {
        scales.push(tt.xi22);
        if !(0.0..=1.0).contains(&tt.lambda) || !(tt.eta > 0.0) {
            return f64::NEG_INFINITY;
        }
    }
    if config.corr.has_effects() {
        scales.extend([tw.sigma1, tw.sigma2]);
        if !(tw.rho12.abs() <= RHO_BOUND) {
            return f64::NEG_INFINITY;
        }
    }
    for s in scales {
        if !(s > 0.0) {
            return f64::NEG_INFINITY;
        }
        lp -= s.ln();
    }
    if config.corr.has_range() {
        lp += inverse_gamma_log_pdf(tw.nu, config.prior.a, config.prior.b);
    }
    if config.corr.has_free_kappa() {
        if !(tw.kappa > 0.0 && tw.kappa <= 2.0) {
            return f64::NEG_INFINITY;
        }
        lp += beta_log_pdf(tw.kappa / 2.0, config.prior.c, config.prior.d) - LOG_TWO;
    }
    lp
}

pub fn inverse_gamma_log_pdf(x: f64, a: f64, b: f64) -> f64 {
    if !(x > 0.0) {
        return f64::NEG_INFINITY;
    }
    a * b.ln() - ln_gamma(a) - (a + 1.0) * x.ln() - b / x
}

pub fn beta_log_pdf(x: f64, c: f64, d: f64) -> f64 {
    if !(0.0..=1.0).contains(&x) {
        return f64::NEG_INFINITY;
    }
    let term = |e: f64, v: f64| if e == 1.0 { 0.0 } else { (e - 1.0) * v.ln() };
    term(c, x) + term(d, 1.0 - x) - ln_beta(c, d)
}

/// Log-Jacobian of the map from unconstrained to constrained coordinates.
pub fn log_jacobian(layout: &ParamLayout, u: &[f64]) -> f64 {
    let logistic = |v: f64| log_sigmoid(v) + log_sigmoid(-v);
    let mut j = u[layout.log_xi1()] + u[layout.log_xi21()];
    for i in [layout.log_xi22(), layout.log_eta(), layout.log_sigma1(), layout.log_sigma2(), layout.log_nu()]
        .into_iter()
        .flatten()
    {
        j += u[i];
    }
    if let Some(i) = layout.logit_lambda() {
        j += logistic(u[i]);
    }
    if let Some(i) = layout.rho() {
        j += (2.0 * RHO_BOUND).ln() + logistic(u[i]);
    }
    if let Some(i) = layout.logit_kappa() {
        j += LOG_TWO + logistic(u[i]);
    }
    j
}

fn prior_jacobian(layout: &ParamLayout, prior: &PriorConfig, u: &[f64], grad: Option<&mut [f64]>) -> f64 {
    // The 1/ξ and 1/σ priors cancel their log-Jacobians exactly, so those
    // coordinates contribute neither value nor gradient.
    let mut value = 0.0;
    let mut g = vec![0.0; layout.n_theta()];
    if let Some(i) = layout.log_eta() {
        value += u[i];
        g[i] = 1.0;
    }
    if let Some(i) = layout.logit_lambda() {
        value += log_sigmoid(u[i]) + log_sigmoid(-u[i]);
        g[i] = 1.0 - 2.0 * sigmoid(u[i]);
    }
    if let Some(i) = layout.rho() {
        value += (2.0 * RHO_BOUND).ln() + log_sigmoid(u[i]) + log_sigmoid(-u[i]);
        g[i] = 1.0 - 2.0 * sigmoid(u[i]);
    }
    if let Some(i) = layout.log_nu() {
        (value, g[i]) = add(value, nu_term(u[i], prior));
    }
    if let Some(i) = layout.logit_kappa() {
        (value, g[i]) = add(value, kappa_term(u[i], prior));
    }
    if let Some(out) = grad {
        for (o, v) in out.iter_mut().zip(&g) {
            *o += v;
        }
    }
    if value.is_nan() {
        f64::NEG_INFINITY
    } else {
        value
    }
}

fn add(acc: f64, (v, g): (f64, f64)) -> (f64, f64) {
    (acc + v, g)
}

/// `IG(a, b)` log density of `ν = e^u` plus the log-Jacobian `u`, and its
/// derivative in `u`.
fn nu_term(u: f64, prior: &PriorConfig) -> (f64, f64) {
    let nu = u.exp();
    (inverse_gamma_log_pdf(nu, prior.a, prior.b) + u, -(prior.a + 1.0) + prior.b / nu + 1.0)
}

/// `Beta(c, d)` log density of `κ/2 = sigmoid(u)` with the Jacobian of
/// `κ = 2 sigmoid(u)` (the factor 2 cancels), and its derivative in `u`.
fn kappa_term(u: f64, prior: &PriorConfig) -> (f64, f64) {
    let s = sigmoid(u);
    let (ls, l1s) = (log_sigmoid(u), log_sigmoid(-u));
    let v = prior.c * ls + prior.d * l1s - ln_beta(prior.c, prior.d);
    (v, prior.c * (1.0 - s) - prior.d * s)
}

/// Prior-only target over `(log ν, logit κ/2)`.
#[derive(Debug, Clone, Copy)]
pub struct SpatialPriorTarget {
    pub prior: PriorConfig,
}

impl LogDensity for SpatialPriorTarget {
    fn dim(&self) -> usize {
        2
    }

    fn log_density_grad(&self, x: &[f64], grad: &mut [f64]) -> f64 {
        let (a, ga) = nu_term(x[0], &self.prior);
        let (b, gb) = kappa_term(x[1], &self.prior);
        grad[0] = ga;
        grad[1] = gb;
        a + b
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Covariates, FailureRecord, Grid, Location};
    use crate::distributions::{log_pdf_mode1, log_pdf_mode2, log_survival_mode1, log_survival_mode2, MixtureAt};
    use crate::params::CorrStructure;
    use crate::simulation::{simulate, SimConfig};
    use crate::special::gamma_q;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn record(loc: (u8, u8), x: Vec<f64>, time: f64, event: EventType) -> FailureRecord {
        FailureRecord {
            unit_id: "u".into(),
            location: Location::new(loc.0, loc.1),
            covariates: Covariates::Values(x),
            time,
            event,
        }
    }

    fn mixture_theta() -> ThetaT {
        ThetaT {
            mu1: 1.4,
            mu2: 1.1,
            beta1: vec![0.3, -0.2],
            beta2: vec![0.1, 0.4],
            xi1: 0.3,
            xi21: 0.25,
            xi22: 0.9,
            eta: 1.2,
            lambda: 0.6,
        }
    }

    fn spatial_theta() -> ThetaW {
        ThetaW { sigma1: 0.2, sigma2: 0.15, rho12: 0.4, nu: 0.3, kappa: 1.4 }
    }

    fn sim_data(n: usize, d: usize, seed: u64) -> Dataset {
        simulate(&SimConfig::new(n, d, seed)).unwrap().dataset
    }

    #[test]
    fn empty_dataset_has_zero_likelihood() {
        let data = Dataset::empty(Grid::TITAN, 2);
        let post = Posterior::new(&data, ModelConfig::default()).unwrap();
        assert_eq!(post.log_likelihood(&mixture_theta(), &SpatialField::zeros(0)), 0.0);
    }

    #[test]
    fn single_failure_includes_competing_survival() {
        let data = Dataset::new(Grid::TITAN, vec![record((0, 0), vec![0.0, 0.0], 2.5, EventType::Mode1)]).unwrap();
        let post = Posterior::new(&data, ModelConfig::default()).unwrap();
        let tt = mixture_theta();
        let fam = DistributionFamily::Weibull;
        let m = MixtureAt { mu1: tt.mu2, mu2: tt.mu2 + tt.eta, xi1: tt.xi21, xi2: tt.xi22, lambda: tt.lambda };
        let expected = log_pdf_mode1(2.5, tt.mu1, tt.xi1, fam).unwrap() + log_survival_mode2(2.5, &m, fam).unwrap();
        assert_relative_eq!(post.log_likelihood(&tt, &SpatialField::zeros(1)), expected, max_relative = 1e-14);
    }

    #[test]
    fn likelihood_matches_per_unit_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = Grid::square(4).unwrap();
        let records: Vec<_> = (0..100)
            .map(|_| {
                let event = EventType::from_code(rng.random_range(0..3)).unwrap();
                let x = vec![rng.random_range(0..2) as f64, rng.random_range(0..2) as f64];
                record((rng.random_range(0..4), rng.random_range(0..4)), x, rng.random_range(0.2..8.0), event)
            })
            .collect();
        let data = Dataset::new(grid, records).unwrap();
        let n = data.n_locations();
        let free: Vec<f64> = (0..2 * (n - 1)).map(|_| rng.random_range(-0.3..0.3)).collect();
        let w = crate::params::reconstruct_effects(&free, n);
        for family in [DistributionFamily::Weibull, DistributionFamily::Lognormal] {
            let post = Posterior::new(&data, ModelConfig { family, ..ModelConfig::default() }).unwrap();
            let tt = mixture_theta();
            let mut naive = 0.0;
            for (j, r) in data.records().iter().enumerate() {
                let i = data.location_of(j);
                let (m1, _) = tt.location_params(data.covariates(j), w.get(i, 1), 1);
                let (m21, m22) = tt.location_params(data.covariates(j), w.get(i, 2), 2);
                let mix = MixtureAt { mu1: m21, mu2: m22.unwrap(), xi1: tt.xi21, xi2: tt.xi22, lambda: tt.lambda };
                let t = r.time;
                naive += match r.event {
                    EventType::Mode1 => log_pdf_mode1(t, m1, tt.xi1, family).unwrap() + log_survival_mode2(t, &mix, family).unwrap(),
                    EventType::Mode2 => log_survival_mode1(t, m1, tt.xi1, family).unwrap() + log_pdf_mode2(t, &mix, family).unwrap(),
                    EventType::Censored => {
                        log_survival_mode1(t, m1, tt.xi1, family).unwrap() + log_survival_mode2(t, &mix, family).unwrap()
                    }
                };
            }
            assert_relative_eq!(post.log_likelihood(&tt, &w), naive, max_relative = 1e-12);
            let pw: f64 = post.pointwise_log_likelihood(&tt, &w).iter().sum();
            assert_relative_eq!(pw, naive, max_relative = 1e-12);
        }
    }

    #[test]
    fn shifting_intercept_against_effects_leaves_likelihood_unchanged() {
        let data = sim_data(300, 3, 1);
        let post = Posterior::new(&data, ModelConfig::default()).unwrap();
        let n = data.n_locations();
        let tt = mixture_theta();
        let w = SpatialField::from_vec((0..2 * n).map(|i| 0.05 * i as f64).collect()).unwrap();
        let base = post.log_likelihood(&tt, &w);
        let shifted_t = ThetaT { mu1: tt.mu1 + 0.3, ..tt.clone() };
        let mut v = w.as_slice().to_vec();
        v[..n].iter_mut().for_each(|x| *x -= 0.3);
        let shifted_w = SpatialField::from_vec(v).unwrap();
        assert_relative_eq!(post.log_likelihood(&shifted_t, &shifted_w), base, max_relative = 1e-12);
    }

    #[test]
    fn prior_examples() {
        let a = 5.0;
        let b = 1.0;
        let mode = b / (a + 1.0);
        let at = |x: f64| inverse_gamma_log_pdf(x, a, b);
        assert!(at(mode) > at(mode * 1.01) && at(mode) > at(mode * 0.99));
        // P(ν ≤ 0.5) for IG(5, 1) is the Gamma(5, 1) upper tail at 2, i.e. 7 e^-2
        assert_relative_eq!(gamma_q(a, b / 0.5), 7.0 * (-2.0f64).exp(), max_relative = 1e-12);
        assert!((gamma_q(a, 2.0) - 0.947).abs() < 0.001);
        for k in [0.1, 0.7, 1.3, 2.0] {
            assert_eq!(beta_log_pdf(k / 2.0, 1.0, 1.0), 0.0);
        }
        let cfg = ModelConfig::default();
        let tt = mixture_theta();
        let tw = spatial_theta();
        assert!(log_prior(&cfg, &tt, &tw).is_finite());
        assert_eq!(log_prior(&cfg, &ThetaT { lambda: 1.2, ..tt.clone() }, &tw), f64::NEG_INFINITY);
        assert_eq!(log_prior(&cfg, &tt, &ThetaW { rho12: 0.96, ..tw }), f64::NEG_INFINITY);
        assert_eq!(log_prior(&cfg, &tt, &ThetaW { kappa: 2.1, ..tw }), f64::NEG_INFINITY);
    }

    #[test]
    fn combined_prior_jacobian_matches_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for corr in CorrStructure::ALL {
            for mixture in [true, false] {
                let cfg = ModelConfig { corr, mixture, prior: PriorConfig { a: 3.0, b: 0.7, c: 2.0, d: 1.5 }, ..Default::default() };
                let layout = ParamLayout::new(&cfg, 2, 4);
                let u: Vec<f64> = (0..layout.dim()).map(|_| rng.random_range(-2.0..2.0)).collect();
                let (tt, tw) = layout.constrain_theta(&u);
                let parts = log_prior(&cfg, &tt, &tw) + log_jacobian(&layout, &u);
                assert_relative_eq!(prior_jacobian(&layout, &cfg.prior, &u, None), parts, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn log_scale_jacobian_has_unit_slope() {
        let layout = ParamLayout::new(&ModelConfig::default(), 2, 4);
        let mut u = vec![0.3; layout.dim()];
        for i in [layout.log_xi1(), layout.log_xi21(), layout.log_xi22().unwrap()] {
            let base = log_jacobian(&layout, &u);
            u[i] += 0.5;
            assert_relative_eq!(log_jacobian(&layout, &u) - base, 0.5, epsilon = 1e-12);
        }
    }

    fn relative_error(analytic: f64, numeric: f64) -> f64 {
        (analytic - numeric).abs() / numeric.abs().max(1.0)
    }

    fn check_gradient(post: &Posterior, u: &[f64]) {
        let (v, g) = post.grad_log_posterior(u);
        assert!(v.is_finite());
        let h = 1e-5;
        for i in 0..u.len() {
            let mut up = u.to_vec();
            let mut dn = u.to_vec();
            up[i] += h;
            dn[i] -= h;
            let fd = (post.log_posterior(&up) - post.log_posterior(&dn)) / (2.0 * h);
            let err = relative_error(g[i], fd);
            assert!(err < 1e-5, "{:?} coordinate {i}: analytic {} numeric {fd} (err {err:e})", post.config().corr, g[i]);
        }
    }

    fn state_near(post: &Posterior, tt: &ThetaT, tw: &ThetaW, rng: &mut ChaCha8Rng, spread: f64) -> Vec<f64> {
        let l = post.layout();
        let base = l.unconstrain(tt, tw, &SpatialField::zeros(l.n_locations())).unwrap();
        loop {
            let u: Vec<f64> = base.iter().map(|b| b + rng.random_range(-spread..spread)).collect();
            if post.log_posterior(&u).is_finite() {
                return u;
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences_for_every_structure() {
        let data = sim_data(200, 4, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for corr in CorrStructure::ALL {
            for family in [DistributionFamily::Weibull, DistributionFamily::Lognormal] {
                let post = Posterior::new(&data, ModelConfig { corr, family, ..Default::default() }).unwrap();
                for _ in 0..3 {
                    let u = state_near(&post, &mixture_theta(), &spatial_theta(), &mut rng, 0.4);
                    check_gradient(&post, &u);
                }
            }
        }
    }

    #[test]
    fn all_censored_gradient() {
        let grid = Grid::square(3).unwrap();
        let records = (0..30)
            .map(|j| record(((j % 3) as u8, (j / 10) as u8), vec![(j % 2) as f64, 0.0], 1.0 + j as f64 * 0.1, EventType::Censored))
            .collect();
        let data = Dataset::new(grid, records).unwrap();
        let post = Posterior::new(&data, ModelConfig::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..5 {
            let u = state_near(&post, &mixture_theta(), &spatial_theta(), &mut rng, 0.4);
            check_gradient(&post, &u);
        }
    }

    #[test]
    fn mirrored_units_give_equal_coefficient_gradients() {
        let grid = Grid::square(2).unwrap();
        let records = vec![
            record((0, 0), vec![1.0, 0.0], 2.0, EventType::Mode1),
            record((0, 0), vec![0.0, 1.0], 2.0, EventType::Mode1),
            record((1, 1), vec![1.0, 0.0], 3.0, EventType::Mode2),
            record((1, 1), vec![0.0, 1.0], 3.0, EventType::Mode2),
        ];
        let data = Dataset::new(grid, records).unwrap();
        let post = Posterior::new(&data, ModelConfig::default()).unwrap();
        let mut tt = mixture_theta();
        tt.beta1 = vec![0.2, 0.2];
        tt.beta2 = vec![-0.1, -0.1];
        let l = post.layout();
        let u = l.unconstrain(&tt, &spatial_theta(), &crate::params::reconstruct_effects(&[0.1, -0.05], 2)).unwrap();
        let (_, g) = post.grad_log_posterior(&u);
        assert_relative_eq!(g[l.beta1().start], g[l.beta1().start + 1], max_relative = 1e-12);
        assert_relative_eq!(g[l.beta2().start], g[l.beta2().start + 1], max_relative = 1e-12);
    }

    #[test]
    fn intercept_effect_block_hessian_is_nonsingular() {
        let data = sim_data(300, 3, 11);
        let post = Posterior::new(&data, ModelConfig::default()).unwrap();
        let l = post.layout();
        let mut idx = vec![MU1, MU2];
        idx.extend(l.free_effects());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..3 {
            let u = state_near(&post, &mixture_theta(), &spatial_theta(), &mut rng, 0.2);
            let h = 1e-5;
            let k = idx.len();
            let mut hess = DMatrix::zeros(k, k);
            for (a, &i) in idx.iter().enumerate() {
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                let (_, gu) = post.grad_log_posterior(&up);
                let (_, gd) = post.grad_log_posterior(&dn);
                for (b, &j) in idx.iter().enumerate() {
                    hess[(b, a)] = (gu[j] - gd[j]) / (2.0 * h);
                }
            }
            let sym = (&hess + hess.transpose()) * 0.5;
            let eig = nalgebra::SymmetricEigen::new(sym).eigenvalues;
            let min = eig.iter().map(|v| v.abs()).fold(f64::INFINITY, f64::min);
            let max = eig.iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(min > 1e-6 * max, "near-singular block: {min} vs {max}");
        }
    }

    #[test]
    fn truth_state_is_finite_and_boundaries_are_guarded() {
        let sim = simulate(&SimConfig::new(1000, 4, 3)).unwrap();
        let truth = crate::simulation::SimTruth::table1();
        let post = Posterior::new(&sim.dataset, truth.model_config()).unwrap();
        let w = sim.effects_at_data_locations();
        let mut v = w.as_slice().to_vec();
        let n = w.n();
        for k in 0..2 {
            let mean = v[k * n..(k + 1) * n].iter().sum::<f64>() / n as f64;
            v[k * n..(k + 1) * n].iter_mut().for_each(|x| *x -= mean);
        }
        let centered = SpatialField::from_vec(v).unwrap();
        let u = post.layout().unconstrain(&truth.theta_t, &truth.theta_w, &centered).unwrap();
        assert!(post.log_posterior(&u).is_finite());

        let mix = Posterior::new(&sim.dataset, ModelConfig::default()).unwrap();
        let mut u = vec![0.0; mix.layout().dim()];
        let il = mix.layout().logit_lambda().unwrap();
        for edge in [f64::INFINITY, f64::NEG_INFINITY] {
            u[il] = edge;
            assert_eq!(mix.log_posterior(&u), f64::NEG_INFINITY);
        }
    }

    #[test]
    fn posterior_never_nan_approaching_non_pd_region() {
        let data = sim_data(400, 5, 2);
        let post = Posterior::new(&data, ModelConfig::default()).unwrap();
        let l = post.layout();
        let mut u = l.unconstrain(&mixture_theta(), &ThetaW { kappa: 1.999, ..spatial_theta() }, &SpatialField::zeros(l.n_locations())).unwrap();
        let iv = l.log_nu().unwrap();
        let mut saw_reject = false;
        for step in 0..60 {
            u[iv] = -2.0 + step as f64 * 0.1;
            let v = post.log_posterior(&u);
            assert!(!v.is_nan());
            saw_reject |= v == f64::NEG_INFINITY;
        }
        assert!(saw_reject);
        assert!(post.non_pd_count() > 0);
    }

    #[test]
    fn spatial_prior_target_gradient() {
        let t = SpatialPriorTarget { prior: PriorConfig { a: 5.0, b: 1.0, c: 2.0, d: 3.0 } };
        let x = [-0.7, 0.4];
        let mut g = [0.0; 2];
        t.log_density_grad(&x, &mut g);
        for i in 0..2 {
            let mut up = x;
            let mut dn = x;
            up[i] += 1e-6;
            dn[i] -= 1e-6;
            let fd = (t.log_density(&up) - t.log_density(&dn)) / 2e-6;
            assert_relative_eq!(g[i], fd, max_relative = 1e-6);
        }
    }
}
