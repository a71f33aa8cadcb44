//! Marginal failure-time correlations with the random effects integrated out
//! by Monte Carlo, evaluated at plug-in parameter values.
//!
//! Effects are drawn `n_l` times from their fitted normal law; `n_r` time
//! pairs are placed uniformly over a bounding box by a randomly shifted
//! lattice, and every moment is a self-normalized ratio of density-weighted
//! sums over those pairs.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Grid, Location};
use crate::distributions::{component_log_pdf, component_log_surv, mixture_log, DistributionFamily};
use crate::error::{Error, Result};
use crate::params::{CorrStructure, ParamLayout, ThetaT, ThetaW};
use crate::sampler::PosteriorDraws;
use crate::spatial::{correlation, distance, CorrelationFamily};

/// Largest marginal mass allowed outside the integration box.
pub const OUTSIDE_LIMIT: f64 = 0.001;

/// Monte Carlo sizes and the integration box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrelationSettings {
    /// Effect draws `n_l`.
    pub n_effects: usize,
    /// Uniform time draws `n_r`.
    pub n_times: usize,
    pub seed: u64,
    /// Marginal tail probability left outside the box on each side.
    pub tail: f64,
    /// Explicit `[lower, upper]` per coordinate instead of marginal quantiles.
    pub bounds: Option<[[f64; 2]; 2]>,
}

impl Default for CorrelationSettings {
    fn default() -> Self {
        Self { n_effects: 200, n_times: 100_000, seed: 1, tail: 0.0005, bounds: None }
    }
}

impl CorrelationSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n_effects == 0 || self.n_times < 2 {
            return Err(Error::Config("correlation needs at least one effect draw and two time draws".into()));
        }
        if !(self.tail > 0.0 && 2.0 * self.tail <= OUTSIDE_LIMIT) {
            return Err(Error::Config(format!(
                "tail probability must lie in (0, {}], got {}",
                OUTSIDE_LIMIT / 2.0,
                self.tail
            )));
        }
        if let Some(b) = self.bounds {
            if b.iter().any(|[lo, hi]| !(*lo > 0.0 && hi > lo && hi.is_finite())) {
                return Err(Error::Config("box bounds must satisfy 0 < lower < upper".into()));
            }
        }
        Ok(())
    }
}

/// Parameter values substituted into the correlation integrals.
#[derive(Debug, Clone, PartialEq)]
pub struct PlugIn {
    pub family: DistributionFamily,
    pub mixture: bool,
    pub corr: CorrStructure,
    pub theta_t: ThetaT,
    pub theta_w: ThetaW,
}

impl PlugIn {
    /// Posterior means of the constrained parameters.
    pub fn from_draws(layout: &ParamLayout, family: DistributionFamily, draws: &PosteriorDraws) -> Result<Self> {
        if draws.names != layout.constrained_names() {
            return Err(Error::Validation("draw columns do not match the requested model".into()));
        }
        if !layout.corr().has_effects() {
            return Err(Error::Validation("marginal correlations need a model with random effects".into()));
        }
        let (theta_t, theta_w, _) = layout.from_constrained(&draws.means())?;
        Ok(Self { family, mixture: layout.mixture(), corr: layout.corr(), theta_t, theta_w })
    }

    fn mode_log_pdf(&self, mode: usize, x: &[f64], w: f64, t: f64) -> f64 {
        let y = t.ln();
        let tt = &self.theta_t;
        let (m, m2) = tt.location_params(x, w, mode);
        if mode == 1 {
            return component_log_pdf(self.family, y, m, tt.xi1).value;
        }
        let first = component_log_pdf(self.family, y, m, tt.xi21).value;
        if !self.mixture {
            return first;
        }
        let second = component_log_pdf(self.family, y, m2.expect("mode 2"), tt.xi22).value;
        mixture_log(first, second, tt.lambda).0
    }

    fn mode_cdf(&self, mode: usize, x: &[f64], w: f64, t: f64) -> f64 {
        let y = t.ln();
        let tt = &self.theta_t;
        let (m, m2) = tt.location_params(x, w, mode);
        let log_s = if mode == 1 {
            component_log_surv(self.family, y, m, tt.xi1).value
        } else {
            let first = component_log_surv(self.family, y, m, tt.xi21).value;
            if self.mixture {
                let second = component_log_surv(self.family, y, m2.expect("mode 2"), tt.xi22).value;
                mixture_log(first, second, tt.lambda).0
            } else {
                first
            }
        };
        -log_s.exp_m1()
    }

    fn sigma(&self, mode: usize) -> f64 {
        if mode == 1 {
            self.theta_w.sigma1
        } else {
            self.theta_w.sigma2
        }
    }
}

/// Moments estimated by the ratio estimators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Moments {
    pub mean: [f64; 2],
    pub second: [f64; 2],
    pub cross: f64,
}

impl Moments {
    pub fn correlation(&self) -> f64 {
        let v1 = self.second[0] - self.mean[0] * self.mean[0];
        let v2 = self.second[1] - self.mean[1] * self.mean[1];
        (self.cross - self.mean[0] * self.mean[1]) / (v1.sqrt() * v2.sqrt())
    }
}

/// Self-normalized ratio estimators. For every uniform pair `r`, `joint[r]`
/// is the effect-averaged joint density and `marginal[k][r]` the
/// effect-averaged density of coordinate `k` at `times[r][k]`.
pub fn ratio_estimator(times: &[[f64; 2]], joint: &[f64], marginal: [&[f64]; 2]) -> Moments {
    let mut num = [0.0; 2];
    let mut num2 = [0.0; 2];
    let mut den = [0.0; 2];
    let mut cross = 0.0;
    let mut den_joint = 0.0;
    for (r, t) in times.iter().enumerate() {
        cross += t[0] * t[1] * joint[r];
        den_joint += joint[r];
        for k in 0..2 {
            let f = marginal[k][r];
            num[k] += t[k] * f;
            num2[k] += t[k] * t[k] * f;
            den[k] += f;
        }
    }
    Moments {
        mean: [num[0] / den[0], num[1] / den[1]],
        second: [num2[0] / den[0], num2[1] / den[1]],
        cross: cross / den_joint,
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// `n` points of a rank-1 lattice with generator near `n / φ`, shifted by a
/// uniform random vector modulo 1. Every point is uniform on the unit square
/// and each coordinate projection is an equispaced grid.
pub fn shifted_lattice(n: usize, rng: &mut impl Rng) -> Vec<[f64; 2]> {
    let phi = 0.5 * (1.0 + 5f64.sqrt());
    let mut g = ((n as f64 / phi).round() as usize).max(1);
    while gcd(g, n) != 1 {
        g += 1;
    }
    let shift: [f64; 2] = [rng.random(), rng.random()];
    (0..n)
        .map(|i| {
            let u = [i as f64 / n as f64, ((i * g) % n) as f64 / n as f64];
            [(u[0] + shift[0]).fract(), (u[1] + shift[1]).fract()]
        })
        .collect()
}

/// A pair of time variables sharing covariates, each with its own mode and
/// bivariate normal effect.
struct Pair<'a> {
    plug: &'a PlugIn,
    x: &'a [f64],
    modes: [usize; 2],
    sd: [f64; 2],
    corr: f64,
}

impl Pair<'_> {
    /// Antithetic effect draws rescaled so their sample mean and covariance
    /// equal the target law exactly.
    fn effects(&self, n: usize, rng: &mut ChaCha8Rng) -> Vec<[f64; 2]> {
        let half = n.div_ceil(2).max(2);
        let mut z: Vec<[f64; 2]> = (0..half).map(|_| [rng.sample(StandardNormal), rng.sample(StandardNormal)]).collect();
        z.extend(z.clone().iter().map(|v| [-v[0], -v[1]]));
        let m = z.len() as f64;
        let s11 = z.iter().map(|v| v[0] * v[0]).sum::<f64>() / m;
        let s12 = z.iter().map(|v| v[0] * v[1]).sum::<f64>() / m;
        let s22 = z.iter().map(|v| v[1] * v[1]).sum::<f64>() / m;
        let l11 = s11.sqrt();
        let l21 = s12 / l11;
        let l22 = (s22 - l21 * l21).sqrt();
        let c = (1.0 - self.corr * self.corr).max(0.0).sqrt();
        z.iter()
            .map(|v| {
                let a = v[0] / l11;
                let b = (v[1] - l21 * a) / l22;
                [self.sd[0] * a, self.sd[1] * (self.corr * a + c * b)]
            })
            .collect()
    }

    fn marginal_cdf(&self, k: usize, effects: &[[f64; 2]], t: f64) -> f64 {
        effects.iter().map(|w| self.plug.mode_cdf(self.modes[k], self.x, w[k], t)).sum::<f64>() / effects.len() as f64
    }

    /// Marginal quantile by bisection on `log t`.
    fn quantile(&self, k: usize, effects: &[[f64; 2]], p: f64) -> Result<f64> {
        let (mut lo, mut hi) = (-50.0f64, 50.0f64);
        if self.marginal_cdf(k, effects, lo.exp()) > p || self.marginal_cdf(k, effects, hi.exp()) < p {
            return Err(Error::Numerical(format!("marginal quantile {p} outside the search range")));
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.marginal_cdf(k, effects, mid.exp()) < p {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-12 {
                break;
            }
        }
        Ok((0.5 * (lo + hi)).exp())
    }

    fn outside_mass(&self, k: usize, effects: &[[f64; 2]], b: [f64; 2]) -> f64 {
        self.marginal_cdf(k, effects, b[0]) + 1.0 - self.marginal_cdf(k, effects, b[1])
    }

    /// Integration box, checked on an independent effect sample; widened once
    /// by half its log-width on each side if too much mass falls outside.
    fn bounds(&self, s: &CorrelationSettings, effects: &[[f64; 2]], check: &[[f64; 2]]) -> Result<[[f64; 2]; 2]> {
        let mut out = [[0.0; 2]; 2];
        for k in 0..2 {
            let mut b = match s.bounds {
                Some(b) => b[k],
                None => [self.quantile(k, effects, s.tail)?, self.quantile(k, effects, 1.0 - s.tail)?],
            };
            let limit = OUTSIDE_LIMIT * 1.1;
            if self.outside_mass(k, check, b) > limit {
                let half = 0.5 * (b[1] / b[0]).ln();
                b = [b[0] * (-half).exp(), b[1] * half.exp()];
                log::debug!("widened integration box for coordinate {} to [{}, {}]", k + 1, b[0], b[1]);
                let outside = self.outside_mass(k, check, b);
                if outside > limit {
                    return Err(Error::Numerical(format!(
                        "integration box for coordinate {} leaves {outside:.2e} of the mass outside after widening",
                        k + 1
                    )));
                }
            }
            out[k] = b;
        }
        Ok(out)
    }

    fn estimate(&self, s: &CorrelationSettings) -> Result<Moments> {
        s.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
        let effects = self.effects(s.n_effects, &mut rng);
        let check = self.effects(s.n_effects.max(1000), &mut rng);
        let b = self.bounds(s, &effects, &check)?;
        let times: Vec<[f64; 2]> = shifted_lattice(s.n_times, &mut rng)
            .into_iter()
            .map(|u| [b[0][0] + u[0] * (b[0][1] - b[0][0]), b[1][0] + u[1] * (b[1][1] - b[1][0])])
            .collect();
        let n_l = effects.len() as f64;
        let dens: Vec<(f64, f64, f64)> = times
            .par_iter()
            .map(|t| {
                let (mut joint, mut m1, mut m2) = (0.0, 0.0, 0.0);
                for w in &effects {
                    let f1 = self.plug.mode_log_pdf(self.modes[0], self.x, w[0], t[0]).exp();
                    let f2 = self.plug.mode_log_pdf(self.modes[1], self.x, w[1], t[1]).exp();
                    joint += f1 * f2;
                    m1 += f1;
                    m2 += f2;
                }
                (joint / n_l, m1 / n_l, m2 / n_l)
            })
            .collect();
        let joint: Vec<f64> = dens.iter().map(|d| d.0).collect();
        let f1: Vec<f64> = dens.iter().map(|d| d.1).collect();
        let f2: Vec<f64> = dens.iter().map(|d| d.2).collect();
        let m = ratio_estimator(&times, &joint, [&f1, &f2]);
        if !m.correlation().is_finite() {
            return Err(Error::Numerical("correlation estimate is not finite".into()));
        }
        Ok(m)
    }
}

/// `Cor(T_ij1, T_ij2)` for a unit with covariates `x`.
pub fn marginal_cross_mode_correlation(plug: &PlugIn, x: &[f64], settings: &CorrelationSettings) -> Result<f64> {
    check_covariates(plug, x)?;
    let tw = &plug.theta_w;
    let pair = Pair { plug, x, modes: [1, 2], sd: [tw.sigma1, tw.sigma2], corr: tw.rho12 };
    Ok(pair.estimate(settings)?.correlation())
}

/// `Cor(T_ijk, T_i*jk)` for two locations at distance `d`. At `d = 0` the two
/// variables coincide and the correlation is 1.
pub fn marginal_spatial_correlation_at(
    plug: &PlugIn,
    mode: usize,
    d: f64,
    x: &[f64],
    settings: &CorrelationSettings,
) -> Result<f64> {
    check_covariates(plug, x)?;
    if mode != 1 && mode != 2 {
        return Err(Error::Validation(format!("failure mode must be 1 or 2, got {mode}")));
    }
    if !(d >= 0.0 && d.is_finite()) {
        return Err(Error::Validation(format!("distance must be non-negative, got {d}")));
    }
    if d == 0.0 {
        return Ok(1.0);
    }
    let c = match plug.corr.kind() {
        Some(kind) => correlation(&CorrelationFamily::new(kind, plug.theta_w.nu, plug.theta_w.kappa)?, d),
        None => 0.0,
    };
    let sd = plug.sigma(mode);
    let pair = Pair { plug, x, modes: [mode, mode], sd: [sd, sd], corr: c };
    Ok(pair.estimate(settings)?.correlation())
}

/// Location-pair version of [`marginal_spatial_correlation_at`].
pub fn marginal_spatial_correlation(
    plug: &PlugIn,
    mode: usize,
    grid: &Grid,
    a: Location,
    b: Location,
    x: &[f64],
    settings: &CorrelationSettings,
) -> Result<f64> {
    if a == b {
        return Ok(1.0);
    }
    marginal_spatial_correlation_at(plug, mode, distance(grid, a, b)?, x, settings)
}

/// Spatial correlation over a distance grid, reusing the same random numbers
/// at every distance.
pub fn spatial_correlation_curve(
    plug: &PlugIn,
    mode: usize,
    distances: &[f64],
    x: &[f64],
    settings: &CorrelationSettings,
) -> Result<Vec<(f64, f64)>> {
    distances.iter().map(|&d| Ok((d, marginal_spatial_correlation_at(plug, mode, d, x, settings)?))).collect()
}

pub fn write_curve_csv<W: Write>(mode: usize, curve: &[(f64, f64)], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["mode", "distance", "correlation"])?;
    for (d, c) in curve {
        w.write_record([mode.to_string(), d.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

fn check_covariates(plug: &PlugIn, x: &[f64]) -> Result<()> {
    if x.len() != plug.theta_t.beta1.len() {
        return Err(Error::Validation(format!(
            "expected {} covariates, got {}",
            plug.theta_t.beta1.len(),
            x.len()
        )));
    }
    Ok(())
}
