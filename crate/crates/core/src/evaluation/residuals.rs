//! Cox–Snell type residuals `r = -log(1 - F̂(t))` and Weibull probability
//! plot coordinates.

use std::io::Write;

use crate::data::Dataset;
use crate::distributions::{component_log_surv, mixture_log, DistributionFamily};
use crate::error::{Error, Result};
use crate::params::{SpatialField, ThetaT};
use crate::posterior::Posterior;
use crate::sampler::PosteriorDraws;

use super::km::{kaplan_meier, KmCurve};

/// Log survival of mode `mode` at time `t` for a unit with covariates `x` and
/// effect `w_ik`.
pub fn mode_log_survival(
    family: DistributionFamily,
    mixture: bool,
    tt: &ThetaT,
    x: &[f64],
    w_ik: f64,
    mode: usize,
    t: f64,
) -> f64 {
    let y = t.ln();
    let (m, m2) = tt.location_params(x, w_ik, mode);
    if mode == 1 {
        return component_log_surv(family, y, m, tt.xi1).value;
    }
    let first = component_log_surv(family, y, m, tt.xi21).value;
    if !mixture {
        return first;
    }
    let second = component_log_surv(family, y, m2.expect("mode 2 has a second location"), tt.xi22).value;
    mixture_log(first, second, tt.lambda).0
}

/// Residuals of every unit under both modes. A unit's mode-`k` residual is an
/// observed event only when it failed by mode `k`; otherwise it is censored.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualSet {
    pub residuals: [Vec<f64>; 2],
    pub events: [Vec<bool>; 2],
}

/// One point of a Weibull probability plot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotPoint {
    pub mode: usize,
    /// `ln r`.
    pub x: f64,
    /// `ln(-ln(1 - p))` with `p` the midpoint plotting position.
    pub y: f64,
}

impl ResidualSet {
    pub fn compute(
        data: &Dataset,
        family: DistributionFamily,
        mixture: bool,
        tt: &ThetaT,
        w: &SpatialField,
    ) -> Result<Self> {
        let zeros;
        let w = if w.n() == 0 {
            zeros = SpatialField::zeros(data.n_locations());
            &zeros
        } else {
            w
        };
        if w.n() != data.n_locations() {
            return Err(Error::Validation(format!(
                "effects cover {} locations but the data has {}",
                w.n(),
                data.n_locations()
            )));
        }
        let mut residuals = [Vec::with_capacity(data.len()), Vec::with_capacity(data.len())];
        let mut events = [Vec::with_capacity(data.len()), Vec::with_capacity(data.len())];
        for (j, rec) in data.records().iter().enumerate() {
            let x = data.covariates(j);
            let loc = data.location_of(j);
            for k in 0..2 {
                let r = -mode_log_survival(family, mixture, tt, x, w.get(loc, k + 1), k + 1, rec.time);
                residuals[k].push(r.max(0.0));
                events[k].push(rec.event.indicator(k + 1));
            }
        }
        Ok(Self { residuals, events })
    }

    /// Residuals at posterior-mean parameters and effects.
    pub fn from_draws(post: &Posterior, draws: &PosteriorDraws) -> Result<Self> {
        if draws.names != post.layout().constrained_names() {
            return Err(Error::Validation(format!("draw columns do not match the {} model", post.config().label())));
        }
        let (tt, _, w) = post.layout().from_constrained(&draws.means())?;
        Self::compute(post.data(), post.family(), post.config().mixture, &tt, &w)
    }

    /// Kaplan–Meier curve of the mode-`mode` residuals; units with a zero
    /// residual are dropped.
    pub fn km(&self, mode: usize) -> Result<KmCurve> {
        let (r, e): (Vec<f64>, Vec<bool>) = self.residuals[mode - 1]
            .iter()
            .zip(&self.events[mode - 1])
            .filter(|(r, _)| **r > 0.0)
            .map(|(r, e)| (*r, *e))
            .unzip();
        kaplan_meier(&r, &e)
    }

    /// Probability plot coordinates at each distinct event residual. Under a
    /// correct model the points follow `y = x`.
    pub fn probability_plot(&self, mode: usize) -> Result<Vec<PlotPoint>> {
        let km = self.km(mode)?;
        Ok(km
            .times
            .iter()
            .filter_map(|&r| {
                let p = 1.0 - 0.5 * (km.survival_before(r) + km.survival_at(r));
                (p > 0.0 && p < 1.0).then(|| PlotPoint { mode, x: r.ln(), y: (-(-p).ln_1p()).ln() })
            })
            .collect())
    }

    /// Sup distance between the residual Kaplan–Meier CDF and the unit
    /// exponential, checked on both sides of every jump while at least
    /// `min_at_risk` of the units remain at risk.
    pub fn ks_distance(&self, mode: usize, min_at_risk: f64) -> Result<f64> {
        let km = self.km(mode)?;
        let n = self.residuals[mode - 1].len() as f64;
        let mut d: f64 = 0.0;
        for (&r, &risk) in km.times.iter().zip(&km.n_risk) {
            if (risk as f64) < min_at_risk * n {
                break;
            }
            let f = -(-r).exp_m1();
            d = d.max((1.0 - km.survival_at(r) - f).abs());
            d = d.max((1.0 - km.survival_before(r) - f).abs());
        }
        Ok(d)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "mode", "residual", "event"])?;
        for k in 0..2 {
            for (j, (r, e)) in self.residuals[k].iter().zip(&self.events[k]).enumerate() {
                w.write_record([j.to_string(), (k + 1).to_string(), r.to_string(), u8::from(*e).to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

pub fn write_plot_csv<W: Write>(points: &[PlotPoint], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["mode", "log_residual", "plotting_position"])?;
    for p in points {
        w.write_record([p.mode.to_string(), p.x.to_string(), p.y.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulation::{simulate, SimConfig};

    fn tt() -> ThetaT {
        ThetaT {
            mu1: 1.0,
            mu2: 1.2,
            beta1: vec![],
            beta2: vec![],
            xi1: 0.5,
            xi21: 0.3,
            xi22: 0.8,
            eta: 1.0,
            lambda: 0.6,
        }
    }

    #[test]
    fn residual_at_known_cdf_values() {
        let w = DistributionFamily::Weibull;
        // F = 1 - e^{-1} exactly at t = e^μ for the Weibull.
        let r = -mode_log_survival(w, false, &tt(), &[], 0.0, 1, 1f64.exp());
        assert!((r - 1.0).abs() < 1e-15);
        // F → 0 as t → 0.
        let r0 = -mode_log_survival(w, false, &tt(), &[], 0.0, 1, 1e-300);
        assert!(r0 >= 0.0 && r0 < 1e-200);
    }

    #[test]
    fn residual_is_monotone_in_time() {
        for family in [DistributionFamily::Weibull, DistributionFamily::Lognormal] {
            for mode in [1, 2] {
                let mut prev = 0.0;
                for i in 1..200 {
                    let t = i as f64 * 0.1;
                    let r = -mode_log_survival(family, true, &tt(), &[], 0.1, mode, t);
                    assert!(r >= prev, "{family:?} mode {mode} at t={t}");
                    prev = r;
                }
            }
        }
    }

    fn residuals_at_truth(cfg: &SimConfig) -> ResidualSet {
        let sim = simulate(cfg).unwrap();
        let w = sim.effects_at_data_locations();
        ResidualSet::compute(&sim.dataset, cfg.truth.family, false, &cfg.truth.theta_t, &w).unwrap()
    }

    #[test]
    fn censored_residuals_stay_within_greenwood_band() {
        let set = residuals_at_truth(&SimConfig::new(2000, 4, 11));
        for mode in [1, 2] {
            let km = set.km(mode).unwrap();
            let se = km.greenwood_se();
            for ((&r, &s), &e) in km.times.iter().zip(&km.surv).zip(&se) {
                if e > 0.0 && e.is_finite() {
                    let z = (s - (-r).exp()).abs() / e;
                    assert!(z < 3.5, "mode {mode}: residual {r} deviates by {z} standard errors");
                }
            }
            assert!(!set.probability_plot(mode).unwrap().is_empty());
        }
    }

    #[test]
    fn residuals_at_truth_are_unit_exponential() {
        let mut cfg = SimConfig::new(2000, 4, 12);
        cfg.end = chrono::NaiveDate::from_ymd_opt(2200, 1, 1).unwrap();
        let set = residuals_at_truth(&cfg);
        for mode in [1, 2] {
            let d = set.ks_distance(mode, 0.0).unwrap();
            assert!(d < 0.05, "mode {mode}: KS distance {d}");
        }
    }
}
