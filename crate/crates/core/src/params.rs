//! Model configuration, constrained parameter containers and the mapping to
//! the unconstrained sampling space.
//!
//! Unconstrained layout (omitted blocks simply vanish):
//! `mu1, mu2, beta1[p], beta2[p], log xi1, log xi21, [log xi22, log eta,
//! logit lambda], [log sigma1, log sigma2, u_rho, [log nu, [logit kappa/2]]]`
//! followed by `n - 1` free mode-1 effects and `n - 1` free mode-2 effects.
//! `rho12 = 0.95 (2 sigmoid(u_rho) - 1)`.

use serde::{Deserialize, Serialize};

use crate::distributions::DistributionFamily;
use crate::error::{Error, Result};
use crate::spatial::CorrelationKind;
use crate::special::{logit, sigmoid};

/// Largest admissible `|ρ12|`.
pub const RHO_BOUND: f64 = 0.95;

/// Random-effect structure of a fitted model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrStructure {
    Pexp,
    Exp,
    Gau,
    /// Effects with cross-mode covariance `Σ_f` but `Ω = I`.
    Indep,
    /// No random effects.
    None,
}

impl CorrStructure {
    pub const ALL: [CorrStructure; 5] = [Self::Pexp, Self::Exp, Self::Gau, Self::Indep, Self::None];

    pub fn has_effects(self) -> bool {
        self != Self::None
    }

    pub fn kind(self) -> Option<CorrelationKind> {
        match self {
            Self::Pexp => Some(CorrelationKind::PowerExponential),
            Self::Exp => Some(CorrelationKind::Exponential),
            Self::Gau => Some(CorrelationKind::Gaussian),
            Self::Indep | Self::None => None,
        }
    }

    pub fn has_range(self) -> bool {
        self.kind().is_some()
    }

    pub fn has_free_kappa(self) -> bool {
        self == Self::Pexp
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Pexp => "pexp",
            Self::Exp => "exp",
            Self::Gau => "gau",
            Self::Indep => "indep",
            Self::None => "none",
        }
    }
}

impl std::str::FromStr for CorrStructure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown correlation structure `{s}`")))
    }
}

impl std::fmt::Display for CorrStructure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Hyperparameters: `ν ~ IG(a, b)` and `κ/2 ~ Beta(c, d)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub d: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { a: 5.0, b: 1.0, c: 1.0, d: 1.0 }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.a, self.b, self.c, self.d].iter().all(|v| *v > 0.0 && v.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config(format!("prior hyperparameters must be positive: {self:?}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub family: DistributionFamily,
    pub corr: CorrStructure,
    /// Two-component mixture for mode 2; a single component when false.
    pub mixture: bool,
    pub prior: PriorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            family: DistributionFamily::Weibull,
            corr: CorrStructure::Pexp,
            mixture: true,
            prior: PriorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn label(&self) -> String {
        format!("{:?}-{}", self.family, self.corr).to_lowercase()
    }
}

/// Event-time parameters. Without the mode-2 mixture only `xi21` is used and
/// `lambda` is 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ThetaT {
    pub mu1: f64,
    pub mu2: f64,
    pub beta1: Vec<f64>,
    pub beta2: Vec<f64>,
    pub xi1: f64,
    pub xi21: f64,
    pub xi22: f64,
    pub eta: f64,
    pub lambda: f64,
}

impl ThetaT {
    /// Location parameters for a unit with covariates `x` and effect `w_ik`:
    /// `μ_ij1` for mode 1, `(μ_ij21, μ_ij22)` for mode 2.
    pub fn location_params(&self, x: &[f64], w_ik: f64, mode: usize) -> (f64, Option<f64>) {
        match mode {
            1 => (self.mu1 + dot(x, &self.beta1) + w_ik, None),
            2 => {
                let m = self.mu2 + dot(x, &self.beta2) + w_ik;
                (m, Some(m + self.eta))
            }
            _ => panic!("failure mode must be 1 or 2"),
        }
    }
}

/// Spatial parameters. Unused entries (`nu`, `kappa` without a correlation
/// family) are NaN.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThetaW {
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho12: f64,
    pub nu: f64,
    pub kappa: f64,
}

/// Per-location effects in mode-major order `(w_11..w_n1, w_12..w_n2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpatialField {
    n: usize,
    w: Vec<f64>,
}

impl SpatialField {
    pub fn zeros(n: usize) -> Self {
        Self { n, w: vec![0.0; 2 * n] }
    }

    pub fn from_vec(w: Vec<f64>) -> Result<Self> {
        if w.len() % 2 != 0 {
            return Err(Error::Validation(format!("effect vector has odd length {}", w.len())));
        }
        Ok(Self { n: w.len() / 2, w })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.w
    }

    /// Effects of mode `k` (1 or 2).
    pub fn mode(&self, k: usize) -> &[f64] {
        &self.w[(k - 1) * self.n..k * self.n]
    }

    pub fn get(&self, location: usize, mode: usize) -> f64 {
        self.w[(mode - 1) * self.n + location]
    }
}

/// Rebuilds the full field from `n - 1` free effects per mode; the last effect
/// of each mode is minus the sum of the others.
pub fn reconstruct_effects(free: &[f64], n: usize) -> SpatialField {
    if n == 0 {
        return SpatialField::zeros(0);
    }
    assert_eq!(free.len(), 2 * (n - 1), "free effect vector length");
    let mut w = Vec::with_capacity(2 * n);
    for k in 0..2 {
        let block = &free[k * (n - 1)..(k + 1) * (n - 1)];
        w.extend_from_slice(block);
        w.push(-block.iter().sum::<f64>());
    }
    SpatialField { n, w }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Slots {
    xi22: Option<usize>,
    eta: Option<usize>,
    lambda: Option<usize>,
    sigma1: Option<usize>,
    sigma2: Option<usize>,
    rho: Option<usize>,
    nu: Option<usize>,
    kappa: Option<usize>,
    effects: usize,
    dim: usize,
}

/// Index bookkeeping for the unconstrained vector and its constrained image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    p: usize,
    n: usize,
    mixture: bool,
    corr: CorrStructure,
    slots: Slots,
}

pub const MU1: usize = 0;
pub const MU2: usize = 1;

impl ParamLayout {
    pub fn new(config: &ModelConfig, p: usize, n_locations: usize) -> Self {
        let mut next = 2 + 2 * p + 2;
        let mut take = |on: bool| {
            on.then(|| {
                next += 1;
                next - 1
            })
        };
        let mix = config.mixture;
        let fx = config.corr.has_effects();
        let xi22 = take(mix);
        let eta = take(mix);
        let lambda = take(mix);
        let sigma1 = take(fx);
        let sigma2 = take(fx);
        let rho = take(fx);
        let nu = take(config.corr.has_range());
        let kappa = take(config.corr.has_free_kappa());
        let effects = next;
        let n_free = if fx { 2 * n_locations.saturating_sub(1) } else { 0 };
        let slots = Slots { xi22, eta, lambda, sigma1, sigma2, rho, nu, kappa, effects, dim: effects + n_free };
        Self { p, n: if fx { n_locations } else { 0 }, mixture: mix, corr: config.corr, slots }
    }

    pub fn p(&self) -> usize {
        self.p
    }

    /// Number of locations carrying effects (0 without random effects).
    pub fn n_locations(&self) -> usize {
        self.n
    }

    pub fn mixture(&self) -> bool {
        self.mixture
    }

    pub fn corr(&self) -> CorrStructure {
        self.corr
    }

    /// Full unconstrained dimension.
    pub fn dim(&self) -> usize {
        self.slots.dim
    }

    /// Number of non-effect coordinates; they come first.
    pub fn n_theta(&self) -> usize {
        self.slots.effects
    }

    pub fn beta1(&self) -> std::ops::Range<usize> {
        2..2 + self.p
    }

    pub fn beta2(&self) -> std::ops::Range<usize> {
        2 + self.p..2 + 2 * self.p
    }

    pub fn log_xi1(&self) -> usize {
        2 + 2 * self.p
    }

    pub fn log_xi21(&self) -> usize {
        3 + 2 * self.p
    }

    pub fn log_xi22(&self) -> Option<usize> {
        self.slots.xi22
    }

    pub fn log_eta(&self) -> Option<usize> {
        self.slots.eta
    }

    pub fn logit_lambda(&self) -> Option<usize> {
        self.slots.lambda
    }

    pub fn log_sigma1(&self) -> Option<usize> {
        self.slots.sigma1
    }

    pub fn log_sigma2(&self) -> Option<usize> {
        self.slots.sigma2
    }

    pub fn rho(&self) -> Option<usize> {
        self.slots.rho
    }

    pub fn log_nu(&self) -> Option<usize> {
        self.slots.nu
    }

    pub fn logit_kappa(&self) -> Option<usize> {
        self.slots.kappa
    }

    pub fn free_effects(&self) -> std::ops::Range<usize> {
        self.slots.effects..self.slots.dim
    }

    /// Names of the non-effect parameters in layout order.
    pub fn theta_names(&self) -> Vec<String> {
        let mut names = vec!["mu1".to_string(), "mu2".to_string()];
        names.extend((1..=self.p).map(|j| format!("beta1[{j}]")));
        names.extend((1..=self.p).map(|j| format!("beta2[{j}]")));
        names.push("xi1".into());
        names.push(if self.mixture { "xi21" } else { "xi2" }.into());
        if self.mixture {
            names.extend(["xi22", "eta", "lambda"].map(String::from));
        }
        if self.corr.has_effects() {
            names.extend(["sigma1", "sigma2", "rho12"].map(String::from));
        }
        if self.corr.has_range() {
            names.push("nu".into());
        }
        if self.corr.has_free_kappa() {
            names.push("kappa".into());
        }
        names
    }

    /// Names of the constrained vector: parameters then all `2n` effects.
    pub fn constrained_names(&self) -> Vec<String> {
        let mut names = self.theta_names();
        names.extend((1..=self.n).map(|i| format!("w1[{i}]")));
        names.extend((1..=self.n).map(|i| format!("w2[{i}]")));
        names
    }

    pub fn constrained_len(&self) -> usize {
        self.n_theta() + 2 * self.n
    }

    fn kind(&self) -> Option<CorrelationKind> {
        self.corr.kind()
    }

    /// Maps the non-effect block of `u` to constrained parameters.
    pub fn constrain_theta(&self, u: &[f64]) -> (ThetaT, ThetaW) {
        let at = |i: Option<usize>| i.map(|i| u[i]);
        let tt = ThetaT {
            mu1: u[MU1],
            mu2: u[MU2],
            beta1: u[self.beta1()].to_vec(),
            beta2: u[self.beta2()].to_vec(),
            xi1: u[self.log_xi1()].exp(),
            xi21: u[self.log_xi21()].exp(),
            xi22: at(self.slots.xi22).map_or(f64::NAN, f64::exp),
            eta: at(self.slots.eta).map_or(f64::NAN, f64::exp),
            lambda: at(self.slots.lambda).map_or(1.0, sigmoid),
        };
        let kappa = match self.kind().and_then(CorrelationKind::fixed_kappa) {
            Some(k) => k,
            None => at(self.slots.kappa).map_or(f64::NAN, |v| 2.0 * sigmoid(v)),
        };
        let tw = ThetaW {
            sigma1: at(self.slots.sigma1).map_or(f64::NAN, f64::exp),
            sigma2: at(self.slots.sigma2).map_or(f64::NAN, f64::exp),
            rho12: at(self.slots.rho).map_or(f64::NAN, |v| RHO_BOUND * (2.0 * sigmoid(v) - 1.0)),
            nu: at(self.slots.nu).map_or(f64::NAN, f64::exp),
            kappa,
        };
        (tt, tw)
    }

    pub fn effects(&self, u: &[f64]) -> SpatialField {
        reconstruct_effects(&u[self.free_effects()], self.n)
    }

    /// Constrained image of a full unconstrained state.
    pub fn constrain(&self, u: &[f64]) -> (ThetaT, ThetaW, SpatialField) {
        let (tt, tw) = self.constrain_theta(u);
        (tt, tw, self.effects(u))
    }

    /// Flat constrained vector in [`Self::constrained_names`] order.
    pub fn constrained_vector(&self, u: &[f64]) -> Vec<f64> {
        let (tt, tw, w) = self.constrain(u);
        let mut out = self.theta_vector(&tt, &tw);
        out.extend_from_slice(w.as_slice());
        out
    }

    pub fn theta_vector(&self, tt: &ThetaT, tw: &ThetaW) -> Vec<f64> {
        let mut out = vec![tt.mu1, tt.mu2];
        out.extend(&tt.beta1);
        out.extend(&tt.beta2);
        out.push(tt.xi1);
        out.push(tt.xi21);
        if self.mixture {
            out.extend([tt.xi22, tt.eta, tt.lambda]);
        }
        if self.corr.has_effects() {
            out.extend([tw.sigma1, tw.sigma2, tw.rho12]);
        }
        if self.corr.has_range() {
            out.push(tw.nu);
        }
        if self.corr.has_free_kappa() {
            out.push(tw.kappa);
        }
        out
    }

    /// Inverse of [`Self::constrained_vector`].
    pub fn from_constrained(&self, v: &[f64]) -> Result<(ThetaT, ThetaW, SpatialField)> {
        if v.len() != self.constrained_len() {
            return Err(Error::Validation(format!(
                "expected {} constrained values, got {}",
                self.constrained_len(),
                v.len()
            )));
        }
        let p = self.p;
        let mut i = 2 + 2 * p;
        let mut next = || {
            i += 1;
            v[i - 1]
        };
        let xi1 = next();
        let xi21 = next();
        let (xi22, eta, lambda) = if self.mixture { (next(), next(), next()) } else { (f64::NAN, f64::NAN, 1.0) };
        let (sigma1, sigma2, rho12) =
            if self.corr.has_effects() { (next(), next(), next()) } else { (f64::NAN, f64::NAN, f64::NAN) };
        let nu = if self.corr.has_range() { next() } else { f64::NAN };
        let kappa = match self.kind() {
            Some(k) => k.fixed_kappa().unwrap_or_else(&mut next),
            None => f64::NAN,
        };
        let tt = ThetaT {
            mu1: v[0],
            mu2: v[1],
            beta1: v[2..2 + p].to_vec(),
            beta2: v[2 + p..2 + 2 * p].to_vec(),
            xi1,
            xi21,
            xi22,
            eta,
            lambda,
        };
        let tw = ThetaW { sigma1, sigma2, rho12, nu, kappa };
        let w = SpatialField::from_vec(v[self.n_theta()..].to_vec())?;
        Ok((tt, tw, w))
    }

    /// Unconstrained coordinates of constrained parameters; the effects must
    /// sum to zero per mode.
    pub fn unconstrain(&self, tt: &ThetaT, tw: &ThetaW, w: &SpatialField) -> Result<Vec<f64>> {
        if tt.beta1.len() != self.p || tt.beta2.len() != self.p {
            return Err(Error::Validation(format!("expected {} regression coefficients per mode", self.p)));
        }
        if w.n() != self.n {
            return Err(Error::Validation(format!("expected effects for {} locations, got {}", self.n, w.n())));
        }
        let mut u = vec![0.0; self.dim()];
        u[MU1] = tt.mu1;
        u[MU2] = tt.mu2;
        u[self.beta1()].copy_from_slice(&tt.beta1);
        u[self.beta2()].copy_from_slice(&tt.beta2);
        u[self.log_xi1()] = positive_log("xi1", tt.xi1)?;
        u[self.log_xi21()] = positive_log("xi21", tt.xi21)?;
        let mut set = |slot: Option<usize>, v: Result<f64>| -> Result<()> {
            if let Some(i) = slot {
                u[i] = v?;
            }
            Ok(())
        };
        if self.mixture {
            set(self.slots.xi22, positive_log("xi22", tt.xi22))?;
            set(self.slots.eta, positive_log("eta", tt.eta))?;
            set(self.slots.lambda, unit_logit("lambda", tt.lambda))?;
        }
        if self.corr.has_effects() {
            set(self.slots.sigma1, positive_log("sigma1", tw.sigma1))?;
            set(self.slots.sigma2, positive_log("sigma2", tw.sigma2))?;
            set(self.slots.rho, unit_logit("rho12", (tw.rho12 / RHO_BOUND + 1.0) / 2.0))?;
        }
        set(self.slots.nu, positive_log("nu", tw.nu))?;
        set(self.slots.kappa, unit_logit("kappa", tw.kappa / 2.0))?;
        for k in 1..=2 {
            let block = w.mode(k);
            let total: f64 = block.iter().sum();
            let scale = block.iter().map(|v| v.abs()).sum::<f64>().max(1.0);
            if total.abs() > 1e-9 * scale {
                return Err(Error::Validation(format!("mode-{k} effects sum to {total}, not zero")));
            }
            if self.n > 0 {
                let start = self.slots.effects + (k - 1) * (self.n - 1);
                u[start..start + self.n - 1].copy_from_slice(&block[..self.n - 1]);
            }
        }
        Ok(u)
    }
}

fn positive_log(name: &str, v: f64) -> Result<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v.ln())
    } else {
        Err(Error::Validation(format!("{name} must be positive, got {v}")))
    }
}

fn unit_logit(name: &str, s: f64) -> Result<f64> {
    if s > 0.0 && s < 1.0 {
        Ok(logit(s))
    } else {
        Err(Error::Validation(format!("{name} outside its open support")))
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
