//! Log-location-scale densities, survival functions and the two-component
//! mixture used for failure mode 2.
//!
//! Everything is evaluated on the log scale. The `*_term` functions also return
//! derivatives with respect to the location and the log of the scale, which the
//! posterior gradient is built from.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::special::{log_add_exp, log_ndtr, ndtr, ndtri, LN_SQRT_2PI};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistributionFamily {
    /// Smallest-extreme-value errors on log time.
    Weibull,
    /// Normal errors on log time.
    Lognormal,
}

impl DistributionFamily {
    /// Log of the standard density.
    pub fn log_phi(self, z: f64) -> f64 {
        match self {
            Self::Weibull => z - z.exp(),
            Self::Lognormal => -0.5 * z * z - LN_SQRT_2PI,
        }
    }

    fn dlog_phi(self, z: f64) -> f64 {
        match self {
            Self::Weibull => 1.0 - z.exp(),
            Self::Lognormal => -z,
        }
    }

    /// Log of the standard survival function `1 - Φ(z)`.
    pub fn log_surv(self, z: f64) -> f64 {
        match self {
            Self::Weibull => -z.exp(),
            Self::Lognormal => log_ndtr(-z),
        }
    }

    fn dlog_surv(self, z: f64) -> f64 {
        match self {
            Self::Weibull => -z.exp(),
            Self::Lognormal => -(self.log_phi(z) - log_ndtr(-z)).exp(),
        }
    }

    pub fn cdf(self, z: f64) -> f64 {
        match self {
            Self::Weibull => -(-z.exp()).exp_m1(),
            Self::Lognormal => ndtr(z),
        }
    }

    pub fn quantile(self, p: f64) -> f64 {
        match self {
            Self::Weibull => (-(-p).ln_1p()).ln(),
            Self::Lognormal => ndtri(p),
        }
    }
}

impl std::str::FromStr for DistributionFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "weibull" | "wb" => Ok(Self::Weibull),
            "lognormal" | "ln" => Ok(Self::Lognormal),
            other => Err(Error::Config(format!("unknown distribution family `{other}`"))),
        }
    }
}

/// A log-density or log-survival value with its partial derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Term {
    pub value: f64,
    /// Derivative with respect to the location `μ`.
    pub d_loc: f64,
    /// Derivative with respect to `log ξ`.
    pub d_log_scale: f64,
}

/// `log f(t)` for one location-scale component, given `y = log t`.
pub fn component_log_pdf(family: DistributionFamily, y: f64, loc: f64, scale: f64) -> Term {
    let z = (y - loc) / scale;
    let g = family.dlog_phi(z);
    Term {
        value: family.log_phi(z) - scale.ln() - y,
        d_loc: -g / scale,
        d_log_scale: -z * g - 1.0,
    }
}

/// `log S(t)` for one location-scale component, given `y = log t`.
pub fn component_log_surv(family: DistributionFamily, y: f64, loc: f64, scale: f64) -> Term {
    let z = (y - loc) / scale;
    let h = family.dlog_surv(z);
    Term { value: family.log_surv(z), d_loc: -h / scale, d_log_scale: -z * h }
}

/// Log of a λ-weighted two-component mixture of `exp(first.value)` and
/// `exp(second.value)`, plus the responsibility of the first component.
pub fn mixture_log(first: f64, second: f64, lambda: f64) -> (f64, f64) {
    let a = lambda.ln() + first;
    let b = (1.0 - lambda).ln() + second;
    let total = log_add_exp(a, b);
    let r1 = if total == f64::NEG_INFINITY { lambda } else { (a - total).exp() };
    (total, r1)
}

fn check_domain(t: f64, scales: &[f64]) -> Result<()> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Domain(format!("time must be positive, got {t}")));
    }
    if let Some(s) = scales.iter().find(|s| !(**s > 0.0 && s.is_finite())) {
        return Err(Error::Domain(format!("scale must be positive, got {s}")));
    }
    Ok(())
}

pub fn log_pdf_mode1(t: f64, mu: f64, xi: f64, family: DistributionFamily) -> Result<f64> {
    check_domain(t, &[xi])?;
    Ok(component_log_pdf(family, t.ln(), mu, xi).value)
}

pub fn log_survival_mode1(t: f64, mu: f64, xi: f64, family: DistributionFamily) -> Result<f64> {
    check_domain(t, &[xi])?;
    Ok(component_log_surv(family, t.ln(), mu, xi).value)
}

/// Mode-2 mixture component parameters at one unit.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureAt {
    pub mu1: f64,
    pub mu2: f64,
    pub xi1: f64,
    pub xi2: f64,
    pub lambda: f64,
}

impl MixtureAt {
    fn check(&self, t: f64) -> Result<()> {
        check_domain(t, &[self.xi1, self.xi2])?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::Domain(format!("mixture weight {} outside [0, 1]", self.lambda)));
        }
        Ok(())
    }
}

pub fn log_pdf_mode2(t: f64, m: &MixtureAt, family: DistributionFamily) -> Result<f64> {
    m.check(t)?;
    let y = t.ln();
    let a = component_log_pdf(family, y, m.mu1, m.xi1).value;
    let b = component_log_pdf(family, y, m.mu2, m.xi2).value;
    Ok(mixture_log(a, b, m.lambda).0)
}

pub fn log_survival_mode2(t: f64, m: &MixtureAt, family: DistributionFamily) -> Result<f64> {
    m.check(t)?;
    let y = t.ln();
    let a = component_log_surv(family, y, m.mu1, m.xi1).value;
    let b = component_log_surv(family, y, m.mu2, m.xi2).value;
    Ok(mixture_log(a, b, m.lambda).0)
}

/// Quantile of a single component on the time scale.
pub fn component_quantile(family: DistributionFamily, p: f64, loc: f64, scale: f64) -> f64 {
    (loc + scale * family.quantile(p)).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    const W: DistributionFamily = DistributionFamily::Weibull;
    const L: DistributionFamily = DistributionFamily::Lognormal;

    #[test]
    fn standard_values() {
        assert_relative_eq!(log_pdf_mode1(1.0, 0.0, 1.0, W).unwrap(), -1.0);
        assert_relative_eq!(log_pdf_mode1(1.0, 0.0, 1.0, L).unwrap(), -0.918_938_533_204_672_7, max_relative = 1e-15);
        assert_relative_eq!(log_survival_mode1(1.0, 0.0, 1.0, W).unwrap(), -1.0);
        assert_relative_eq!(log_survival_mode1(1.0, 0.0, 1.0, L).unwrap(), -std::f64::consts::LN_2, max_relative = 1e-15);
    }

    #[test]
    fn weibull_density_matches_high_precision_reference() {
        // z = (ln 2 - 0.3) / 0.2; log f = z - e^z - ln 0.2 - ln 2 (40-digit evaluation).
        let v = log_pdf_mode1(2.0, 0.3, 0.2, W).unwrap();
        assert_relative_eq!(v, -4.258_138_490_075_873, max_relative = 1e-14);
    }

    #[test]
    fn weibull_survival_far_tail_is_finite() {
        // z = 40 gives log S = -e^40.
        let t = 40.0f64.exp();
        let v = log_survival_mode1(t, 0.0, 1.0, W).unwrap();
        assert!(v.is_finite());
        assert_relative_eq!(v, -235_385_266_837_019_985.4, max_relative = 1e-13);
        let l = log_survival_mode1((12.0f64).exp(), 0.0, 0.25, L).unwrap();
        assert_relative_eq!(l, -1_156.790_573_101_945_3, max_relative = 1e-12);
    }

    #[test]
    fn mixture_degenerate_cases() {
        let m = MixtureAt { mu1: 1.0, mu2: 2.5, xi1: 0.3, xi2: 0.7, lambda: 1.0 };
        for t in [0.5, 2.0, 9.0] {
            assert_eq!(log_pdf_mode2(t, &m, W).unwrap(), log_pdf_mode1(t, 1.0, 0.3, W).unwrap());
        }
        let same = MixtureAt { mu1: 1.0, mu2: 1.0, xi1: 0.3, xi2: 0.3, lambda: 0.5 };
        for t in [0.5, 2.0, 9.0] {
            assert_relative_eq!(
                log_pdf_mode2(t, &same, L).unwrap(),
                log_pdf_mode1(t, 1.0, 0.3, L).unwrap(),
                max_relative = 1e-14
            );
        }
    }

    #[test]
    fn mixture_matches_extended_precision_sum() {
        // 40-digit direct summation of λ f1 + (1-λ) f2 (Weibull components).
        let m = MixtureAt { mu1: 1.2, mu2: 2.9, xi1: 0.14, xi2: 1.7, lambda: 0.6 };
        assert_relative_eq!(log_pdf_mode2(3.1, &m, W).unwrap(), -0.738_517_569_849_956_1, max_relative = 1e-10);
        assert_relative_eq!(log_survival_mode2(3.1, &m, W).unwrap(), -0.500_726_046_419_740_6, max_relative = 1e-10);
    }

    #[test]
    fn domain_errors() {
        assert!(log_pdf_mode1(0.0, 0.0, 1.0, W).is_err());
        assert!(log_pdf_mode1(1.0, 0.0, -1.0, W).is_err());
        let m = MixtureAt { mu1: 1.0, mu2: 2.0, xi1: 0.3, xi2: 0.0, lambda: 0.4 };
        assert!(log_pdf_mode2(1.0, &m, W).is_err());
    }

    fn simpson<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        s * h / 3.0
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn densities_integrate_to_one(mu in -1.0f64..2.0, xi in 0.1f64..1.5, mu2 in 0.0f64..3.0,
                                      xi2 in 0.1f64..1.5, lambda in 0.0f64..1.0, lognormal in any::<bool>()) {
            let fam = if lognormal { L } else { W };
            // integrate over y = log t: f(t) dt = f(e^y) e^y dy
            let lo = mu.min(mu2) - 40.0 * xi.max(xi2);
            let hi = mu.max(mu2) + 12.0 * xi.max(xi2);
            let one = simpson(|y| (log_pdf_mode1(y.exp(), mu, xi, fam).unwrap() + y).exp(), lo, hi, 20_000);
            prop_assert!((one - 1.0).abs() < 1e-6, "mode 1 integral {}", one);
            let m = MixtureAt { mu1: mu2, mu2: mu2 + 0.5, xi1: xi, xi2, lambda };
            let two = simpson(|y| (log_pdf_mode2(y.exp(), &m, fam).unwrap() + y).exp(), lo, hi, 20_000);
            prop_assert!((two - 1.0).abs() < 1e-6, "mode 2 integral {}", two);
        }

        #[test]
        fn hazard_identity(t in 0.2f64..8.0, mu in 0.0f64..2.0, xi in 0.15f64..1.2, lognormal in any::<bool>()) {
            let fam = if lognormal { L } else { W };
            let h = 1e-5 * t;
            let d = -(log_survival_mode1(t + h, mu, xi, fam).unwrap() - log_survival_mode1(t - h, mu, xi, fam).unwrap()) / (2.0 * h);
            let hazard = (log_pdf_mode1(t, mu, xi, fam).unwrap() - log_survival_mode1(t, mu, xi, fam).unwrap()).exp();
            prop_assert!((d - hazard).abs() < 1e-6 * hazard.max(1.0), "{} vs {}", d, hazard);
        }

        #[test]
        fn mixture_label_symmetry(t in 0.1f64..10.0, lambda in 0.01f64..0.99, mu1 in 0.0f64..2.0, mu2 in 0.0f64..3.0) {
            let a = MixtureAt { mu1, mu2, xi1: 0.3, xi2: 0.8, lambda };
            let b = MixtureAt { mu1: mu2, mu2: mu1, xi1: 0.8, xi2: 0.3, lambda: 1.0 - lambda };
            let fa = log_pdf_mode2(t, &a, W).unwrap();
            let fb = log_pdf_mode2(t, &b, W).unwrap();
            prop_assert!((fa - fb).abs() < 1e-12 * fa.abs().max(1.0));
        }

        #[test]
        fn term_derivatives_match_finite_differences(y in -1.0f64..2.5, loc in 0.0f64..2.0, ls in -1.5f64..0.5,
                                                     lognormal in any::<bool>(), surv in any::<bool>()) {
            let fam = if lognormal { L } else { W };
            let f = |loc: f64, ls: f64| if surv { component_log_surv(fam, y, loc, ls.exp()) } else { component_log_pdf(fam, y, loc, ls.exp()) };
            let t = f(loc, ls);
            let h = 1e-6;
            let dl = (f(loc + h, ls).value - f(loc - h, ls).value) / (2.0 * h);
            let ds = (f(loc, ls + h).value - f(loc, ls - h).value) / (2.0 * h);
            prop_assert!((dl - t.d_loc).abs() < 1e-5 * (1.0 + dl.abs()));
            prop_assert!((ds - t.d_log_scale).abs() < 1e-5 * (1.0 + ds.abs()));
        }
    }
}
