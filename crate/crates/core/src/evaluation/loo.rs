//! Pareto-smoothed importance-sampling leave-one-out cross-validation.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::params::{SpatialField, ThetaT};
use crate::posterior::Posterior;
use crate::sampler::PosteriorDraws;
use crate::special::log_sum_exp;

/// Pareto-k above which a unit's estimate is unreliable.
pub const K_THRESHOLD: f64 = 0.7;
/// Share of the largest raw weights replaced by the fitted Pareto tail.
pub const TAIL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct LooResult {
    pub pointwise: Vec<f64>,
    pub pareto_k: Vec<f64>,
    pub elpd_loo: f64,
    /// Standard error of `elpd_loo`.
    pub se: f64,
    /// Effective number of parameters.
    pub p_loo: f64,
    pub looic: f64,
}

impl LooResult {
    /// Units whose Pareto-k exceeds [`K_THRESHOLD`].
    pub fn flagged(&self) -> Vec<usize> {
        self.pareto_k.iter().enumerate().filter(|(_, k)| **k > K_THRESHOLD).map(|(i, _)| i).collect()
    }

    pub fn write_pointwise_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["unit", "elpd_loo", "pareto_k", "flagged"])?;
        for (i, (e, k)) in self.pointwise.iter().zip(&self.pareto_k).enumerate() {
            w.write_record([i.to_string(), e.to_string(), k.to_string(), u8::from(*k > K_THRESHOLD).to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["elpd_loo", "se", "p_loo", "looic", "n_flagged"])?;
        w.write_record([
            self.elpd_loo.to_string(),
            self.se.to_string(),
            self.p_loo.to_string(),
            self.looic.to_string(),
            self.flagged().len().to_string(),
        ])?;
        w.flush()?;
        Ok(())
    }
}

/// Generalized Pareto fit by the Zhang–Stephens profile method with the
/// weakly informative shrinkage of `k` towards 0.5. `x` must be sorted
/// ascending and positive. Returns `(k, sigma)`.
pub fn gpd_fit(x: &[f64]) -> (f64, f64) {
    let n = x.len();
    let m = 30 + (n as f64).sqrt().floor() as usize;
    let prior = 3.0;
    let xstar = x[((n as f64) / 4.0 + 0.5).floor() as usize - 1];
    let theta: Vec<f64> =
        (1..=m).map(|j| 1.0 / x[n - 1] + (1.0 - (m as f64 / (j as f64 - 0.5)).sqrt()) / prior / xstar).collect();
    let profile: Vec<f64> = theta
        .iter()
        .map(|&t| {
            let k = x.iter().map(|&xi| (-t * xi).ln_1p()).sum::<f64>() / n as f64;
            n as f64 * ((-t / k).ln() - k - 1.0)
        })
        .collect();
    let norm = log_sum_exp(&profile);
    let theta_hat: f64 = theta.iter().zip(&profile).map(|(t, l)| t * (l - norm).exp()).sum();
    let k = x.iter().map(|&xi| (-theta_hat * xi).ln_1p()).sum::<f64>() / n as f64;
    let sigma = -k / theta_hat;
    let a = 10.0;
    let k = k * n as f64 / (n as f64 + a) + a * 0.5 / (n as f64 + a);
    (k, sigma)
}

fn gpd_quantile(p: f64, k: f64, sigma: f64) -> f64 {
    if k.abs() < 1e-12 {
        -sigma * (-p).ln_1p()
    } else {
        sigma * (-k * (-p).ln_1p()).exp_m1() / k
    }
}

/// Smoothed, normalized log weights for one unit's raw log ratios, and the
/// fitted shape `k`.
pub fn psis(log_ratios: &[f64]) -> (Vec<f64>, f64) {
    let s = log_ratios.len();
    let max = log_ratios.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut lw: Vec<f64> = log_ratios.iter().map(|v| v - max).collect();
    let tail_len = ((TAIL_FRACTION * s as f64).ceil() as usize).min(s.saturating_sub(1));
    let mut k = 0.0;
    if tail_len >= 5 {
        let mut order: Vec<usize> = (0..s).collect();
        order.sort_by(|&a, &b| lw[a].total_cmp(&lw[b]));
        let cutoff = lw[order[s - tail_len - 1]];
        let tail = &order[s - tail_len..];
        let exp_cut = cutoff.exp();
        let x: Vec<f64> = tail.iter().map(|&i| lw[i].exp() - exp_cut).collect();
        if x[tail_len - 1] > 0.0 && x[0] >= 0.0 && x.iter().all(|v| v.is_finite()) {
            let positive_from = x.partition_point(|&v| v <= 0.0);
            let (kh, sigma) = if tail_len - positive_from >= 5 {
                gpd_fit(&x[positive_from..])
            } else {
                (f64::INFINITY, f64::NAN)
            };
            k = kh;
            if k.is_finite() {
                for (r, &i) in tail.iter().enumerate() {
                    let p = (r as f64 + 0.5) / tail_len as f64;
                    lw[i] = (gpd_quantile(p, k, sigma) + exp_cut).ln().min(0.0);
                }
            }
        }
    }
    let norm = log_sum_exp(&lw);
    lw.iter_mut().for_each(|v| *v -= norm);
    (lw, k)
}

/// PSIS-LOO from per-unit log-likelihood vectors, `log_lik[i][s]` for unit
/// `i` and draw `s`.
pub fn psis_loo(log_lik: &[Vec<f64>]) -> Result<LooResult> {
    if log_lik.is_empty() {
        return Err(Error::Validation("no units to cross-validate".into()));
    }
    let s = log_lik[0].len();
    if s < 2 || log_lik.iter().any(|v| v.len() != s) {
        return Err(Error::Validation("every unit needs the same number (at least 2) of draws".into()));
    }
    if log_lik.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite pointwise log likelihood".into()));
    }
    let per_unit: Vec<(f64, f64, f64)> = log_lik
        .par_iter()
        .map(|ll| {
            let ratios: Vec<f64> = ll.iter().map(|v| -v).collect();
            let (lw, k) = psis(&ratios);
            let summed: Vec<f64> = lw.iter().zip(ll).map(|(w, l)| w + l).collect();
            let lpd = log_sum_exp(ll) - (s as f64).ln();
            (log_sum_exp(&summed), k, lpd)
        })
        .collect();
    let n = per_unit.len() as f64;
    let pointwise: Vec<f64> = per_unit.iter().map(|u| u.0).collect();
    let pareto_k = per_unit.iter().map(|u| u.1).collect();
    let elpd_loo: f64 = pointwise.iter().sum();
    let lpd: f64 = per_unit.iter().map(|u| u.2).sum();
    let mean = elpd_loo / n;
    let var = pointwise.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    Ok(LooResult { pointwise, pareto_k, elpd_loo, se: (n * var).sqrt(), p_loo: lpd - elpd_loo, looic: -2.0 * elpd_loo })
}

/// Pointwise log likelihoods recomputed from stored draws, conditional on the
/// sampled effects.
pub fn pointwise_log_lik(post: &Posterior, draws: &PosteriorDraws) -> Result<Vec<Vec<f64>>> {
    let expected = post.layout().constrained_names();
    if draws.names != expected {
        return Err(Error::Validation(format!(
            "draw columns do not match the {} model ({} columns expected, {} found)",
            post.config().label(),
            expected.len(),
            draws.names.len()
        )));
    }
    let parsed: Vec<(ThetaT, SpatialField)> = draws
        .iter_draws()
        .map(|d| post.layout().from_constrained(d).map(|(tt, _, w)| (tt, w)))
        .collect::<Result<_>>()?;
    Ok((0..post.data().len())
        .into_par_iter()
        .map(|j| parsed.iter().map(|(tt, w)| post.unit_log_likelihood(j, tt, w)).collect())
        .collect())
}

pub fn loo(post: &Posterior, draws: &PosteriorDraws) -> Result<LooResult> {
    let result = psis_loo(&pointwise_log_lik(post, draws)?)?;
    let flagged = result.flagged().len();
    if flagged > 0 {
        log::warn!("{flagged} units have Pareto k > {K_THRESHOLD}; their LOO estimates are unreliable");
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    const PRIOR_VAR: f64 = 100.0;

    /// Posterior of `θ` for `y_i ~ N(θ, 1)`, `θ ~ N(0, PRIOR_VAR)`.
    fn posterior(y: &[f64]) -> (f64, f64) {
        let prec = 1.0 / PRIOR_VAR + y.len() as f64;
        (y.iter().sum::<f64>() / prec, 1.0 / prec)
    }

    fn log_normal_pdf(x: f64, m: f64, v: f64) -> f64 {
        -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v)
    }

    fn exact_loo(y: &[f64]) -> f64 {
        (0..y.len())
            .map(|i| {
                let rest: Vec<f64> = y.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v).collect();
                let (m, v) = posterior(&rest);
                log_normal_pdf(y[i], m, 1.0 + v)
            })
            .sum()
    }

    fn psis_for(y: &[f64], rng: &mut ChaCha8Rng) -> LooResult {
        let (m, v) = posterior(y);
        let draws: Vec<f64> = Normal::new(m, v.sqrt()).unwrap().sample_iter(rng).take(4000).collect();
        let ll: Vec<Vec<f64>> = y.iter().map(|&yi| draws.iter().map(|&t| log_normal_pdf(yi, t, 1.0)).collect()).collect();
        psis_loo(&ll).unwrap()
    }

    fn toy_data(rng: &mut ChaCha8Rng) -> Vec<f64> {
        Normal::new(1.5, 1.0).unwrap().sample_iter(rng).take(50).collect()
    }

    #[test]
    fn matches_exact_refit_loo() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut y = toy_data(&mut rng);
        y[0] = 5.0;
        let r = psis_for(&y, &mut rng);
        assert!(r.pareto_k.iter().all(|k| *k < K_THRESHOLD));
        assert!((r.elpd_loo - exact_loo(&y)).abs() < 0.5, "psis {} exact {}", r.elpd_loo, exact_loo(&y));
        assert!((r.pointwise.iter().sum::<f64>() - r.elpd_loo).abs() < 1e-9);
        assert!(r.looic.is_finite() && (r.looic + 2.0 * r.elpd_loo).abs() < 1e-12);
        assert!(r.p_loo > 0.5 && r.p_loo < 2.0, "p_loo {}", r.p_loo);
    }

    #[test]
    fn dropping_a_well_behaved_unit_moves_elpd_less_than_se() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let y = toy_data(&mut rng);
        let full = psis_for(&y, &mut rng);
        let j = full.pareto_k.iter().position(|k| *k < 0.5).unwrap();
        let rest: Vec<f64> = y.iter().enumerate().filter(|(i, _)| *i != j).map(|(_, v)| *v).collect();
        let reduced = psis_for(&rest, &mut rng);
        let change = (full.elpd_loo - full.pointwise[j] - reduced.elpd_loo).abs();
        assert!(change < full.se, "change {change} se {}", full.se);
    }

    #[test]
    fn degenerate_posterior_gives_uniform_weights() {
        let ll = vec![vec![-1.25; 100], vec![-0.5; 100], vec![-3.0; 100]];
        let r = psis_loo(&ll).unwrap();
        assert!((r.elpd_loo - (-4.75)).abs() < 1e-12);
        assert!(r.p_loo.abs() < 1e-12);
        let (lw, _) = psis(&vec![0.3; 100]);
        assert!(lw.iter().all(|w| (w + 100f64.ln()).abs() < 1e-12));
    }

    #[test]
    fn gpd_fit_recovers_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (k, sigma) = (0.4, 1.5);
        let mut x: Vec<f64> = (0..20000)
            .map(|_| gpd_quantile(rand::Rng::random::<f64>(&mut rng), k, sigma))
            .collect();
        x.sort_by(f64::total_cmp);
        let (kh, sh) = gpd_fit(&x);
        assert!((kh - k).abs() < 0.05 && (sh / sigma - 1.0).abs() < 0.05, "k {kh} sigma {sh}");
    }

    #[test]
    fn heavy_tail_is_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // Log ratios of a Pareto(k = 1.2) weight distribution.
        let ratios: Vec<f64> =
            (0..2000).map(|_| gpd_quantile(rand::Rng::random::<f64>(&mut rng), 1.2, 1.0).ln_1p()).collect();
        let (_, k) = psis(&ratios);
        assert!(k > K_THRESHOLD, "k {k}");
    }
}
