//! Product-limit survival estimates and binned failure-time mass.

use std::io::Write;

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Right-continuous step estimate of the survival function.
#[derive(Debug, Clone, PartialEq)]
pub struct KmCurve {
    /// Distinct failure times, increasing.
    pub times: Vec<f64>,
    /// `Ŝ(t)` just after each failure time.
    pub surv: Vec<f64>,
    pub n_risk: Vec<usize>,
    pub n_event: Vec<usize>,
}

impl KmCurve {
    /// `Ŝ(t)`, right-continuous.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s <= t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// `Ŝ(t-)`, the left limit.
    pub fn survival_before(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&s| s < t);
        if k == 0 {
            1.0
        } else {
            self.surv[k - 1]
        }
    }

    /// Greenwood standard errors of `Ŝ` at each failure time.
    pub fn greenwood_se(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.n_risk
            .iter()
            .zip(&self.n_event)
            .zip(&self.surv)
            .map(|((&n, &d), &s)| {
                let (n, d) = (n as f64, d as f64);
                acc += if n > d { d / (n * (n - d)) } else { f64::INFINITY };
                s * acc.sqrt()
            })
            .collect()
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let se = self.greenwood_se();
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time", "n_risk", "n_event", "survival", "std_err"])?;
        for i in 0..self.times.len() {
            w.write_record([
                self.times[i].to_string(),
                self.n_risk[i].to_string(),
                self.n_event[i].to_string(),
                self.surv[i].to_string(),
                se[i].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Product-limit estimator. Units censored at a failure time count as at
/// risk at that time.
pub fn kaplan_meier(times: &[f64], events: &[bool]) -> Result<KmCurve> {
    if times.len() != events.len() {
        return Err(Error::Validation(format!("{} times but {} event indicators", times.len(), events.len())));
    }
    if let Some(t) = times.iter().find(|t| !(t.is_finite() && **t > 0.0)) {
        return Err(Error::Validation(format!("times must be positive, got {t}")));
    }
    let mut order: Vec<usize> = (0..times.len()).collect();
    order.sort_by(|&a, &b| times[a].total_cmp(&times[b]));
    let mut curve = KmCurve { times: Vec::new(), surv: Vec::new(), n_risk: Vec::new(), n_event: Vec::new() };
    let mut at_risk = times.len();
    let mut s = 1.0;
    let mut k = 0;
    while k < order.len() {
        let t = times[order[k]];
        let mut d = 0;
        let mut m = 0;
        while k + m < order.len() && times[order[k + m]] == t {
            d += usize::from(events[order[k + m]]);
            m += 1;
        }
        if d > 0 {
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.surv.push(s);
            curve.n_risk.push(at_risk);
            curve.n_event.push(d);
        }
        at_risk -= m;
        k += m;
    }
    Ok(curve)
}

/// Per-mode Kaplan–Meier curve, treating the other mode's failures as
/// censored.
pub fn kaplan_meier_mode(data: &Dataset, mode: usize) -> Result<KmCurve> {
    let times: Vec<f64> = data.records().iter().map(|r| r.time).collect();
    let events: Vec<bool> = data.records().iter().map(|r| r.event.indicator(mode)).collect();
    kaplan_meier(&times, &events)
}

/// Probability mass of one bin `[lower, upper)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PmfBin {
    pub lower: f64,
    pub upper: f64,
    pub mass: f64,
}

/// Equal-width bins over `[0, upper)`; the mass of `[a, b)` is
/// `Ŝ(a-) - Ŝ(b-)` so a failure at `a` falls in the bin it starts.
pub fn binned_pmf(curve: &KmCurve, n_bins: usize, upper: f64) -> Result<Vec<PmfBin>> {
    if n_bins == 0 || !(upper > 0.0 && upper.is_finite()) {
        return Err(Error::Config("binned pmf needs a positive bin count and upper bound".into()));
    }
    let width = upper / n_bins as f64;
    Ok((0..n_bins)
        .map(|b| {
            let lower = b as f64 * width;
            let hi = if b + 1 == n_bins { upper } else { (b + 1) as f64 * width };
            PmfBin { lower, upper: hi, mass: curve.survival_before(lower) - curve.survival_before(hi) }
        })
        .collect())
}

pub fn write_pmf_csv<W: Write>(bins: &[PmfBin], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["lower", "upper", "mass"])?;
    for b in bins {
        w.write_record([b.lower.to_string(), b.upper.to_string(), b.mass.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
