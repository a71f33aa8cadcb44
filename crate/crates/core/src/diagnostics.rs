//! Rank-normalized split R-hat and bulk/tail effective sample sizes.

use crate::special::ndtri;

/// Flag thresholds for the convergence report.
pub const RHAT_CUTOFF: f64 = 1.1;
pub const ESS_THRESHOLD: f64 = 400.0;

/// Order-independent sum: sorting first makes the result invariant to the
/// order in which chains are supplied.
pub(crate) fn stable_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let mut sorted = x.to_vec();
    let mean = stable_sum(&mut sorted) / n;
    let mut sq: Vec<f64> = x.iter().map(|v| (v - mean).powi(2)).collect();
    (mean, stable_sum(&mut sq) / (n - 1.0))
}

fn split(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let half = n / 2;
    chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[n - half..n].to_vec()])
        .collect()
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains.iter().flatten().next().copied();
    chains.iter().flatten().all(|v| Some(*v) == first)
}

fn valid_input(chains: &[Vec<f64>]) -> bool {
    chains.len() >= 2
        && chains.iter().all(|c| c.len() >= 4)
        && chains.iter().flatten().all(|v| v.is_finite())
        && !is_constant(chains)
}

/// Average ranks (1-based) of the pooled draws, mapped through the inverse
/// normal cdf at `(r - 3/8) / (S + 1/4)`.
pub fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    let s = pooled.len();
    let mut order: Vec<usize> = (0..s).collect();
    order.sort_by(|&a, &b| pooled[a].total_cmp(&pooled[b]));
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[order[j + 1]] == pooled[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[order[k]] = avg;
        }
        i = j + 1;
    }
    let z: Vec<f64> = ranks.iter().map(|r| ndtri((r - 0.375) / (s as f64 + 0.25))).collect();
    let mut out = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        out.push(z[offset..offset + c.len()].to_vec());
        offset += c.len();
    }
    out
}

fn rhat_basic(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let stats: Vec<(f64, f64)> = chains.iter().map(|c| mean_var(c)).collect();
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let mut vars: Vec<f64> = stats.iter().map(|s| s.1).collect();
    let (_, var_means) = mean_var(&means);
    let w = stable_sum(&mut vars) / chains.len() as f64;
    let var_plus = (n - 1.0) / n * w + var_means;
    (var_plus / w).sqrt()
}

/// Rank-normalized split R-hat: the larger of the bulk and folded-tail
/// versions. NaN for constant or too-short input.
pub fn rhat(chains: &[Vec<f64>]) -> f64 {
    if !valid_input(chains) {
        return f64::NAN;
    }
    let z = rank_normalize(&split(chains));
    let bulk = rhat_basic(&z);
    // Folding on the normal-score scale keeps the tail version invariant to
    // monotone transforms of the draws.
    let mut pooled: Vec<f64> = z.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let med = quantile_sorted(&pooled, 0.5);
    let folded: Vec<Vec<f64>> = z.iter().map(|c| c.iter().map(|v| (v - med).abs()).collect()).collect();
    let tail = if is_constant(&folded) { f64::NAN } else { rhat_basic(&rank_normalize(&folded)) };
    bulk.max(tail)
}

/// Autocovariance at `lag` with the biased `1/n` normalization.
fn autocov(x: &[f64], mean: f64, lag: usize) -> f64 {
    let n = x.len();
    let mut s = 0.0;
    for i in 0..n - lag {
        s += (x[i] - mean) * (x[i + lag] - mean);
    }
    s / n as f64
}

/// Effective sample size with Geyer's initial monotone sequence; the
/// autocorrelations are summed directly and only up to the truncation lag.
pub fn ess_raw(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    if m == 0 || n < 4 || is_constant(chains) {
        return f64::NAN;
    }
    let chains: Vec<&[f64]> = chains.iter().map(|c| &c[..n]).collect();
    let means: Vec<f64> = chains.iter().map(|c| mean_var(c).0).collect();
    let acov_mean = |lag: usize| {
        let mut v: Vec<f64> = chains.iter().zip(&means).map(|(c, &mu)| autocov(c, mu, lag)).collect();
        stable_sum(&mut v) / m as f64
    };
    let nf = n as f64;
    let mean_var_w = acov_mean(0) * nf / (nf - 1.0);
    let var_plus = if m > 1 { mean_var_w * (nf - 1.0) / nf + mean_var(&means).1 } else { mean_var_w * (nf - 1.0) / nf };
    if !(var_plus > 0.0) {
        return f64::NAN;
    }
    let rho = |lag: usize| 1.0 - (mean_var_w - acov_mean(lag)) / var_plus;

    let mut rho_hat = vec![0.0; n];
    rho_hat[0] = 1.0;
    let mut even = 1.0;
    let mut odd = rho(1);
    rho_hat[1] = odd;
    let mut s = 1;
    while s + 4 < n && even + odd > 0.0 {
        even = rho(s + 1);
        odd = rho(s + 2);
        if even + odd >= 0.0 {
            rho_hat[s + 1] = even;
            rho_hat[s + 2] = odd;
        }
        s += 2;
    }
    let max_s = s;
    if even > 0.0 {
        rho_hat[max_s + 1] = even;
    }
    let mut s = 1;
    while s + 3 <= max_s {
        let prev = rho_hat[s - 1] + rho_hat[s];
        if rho_hat[s + 1] + rho_hat[s + 2] > prev {
            rho_hat[s + 1] = prev / 2.0;
            rho_hat[s + 2] = prev / 2.0;
        }
        s += 2;
    }
    let total = (m * n) as f64;
    let mut head = rho_hat[..max_s].to_vec();
    let tau = (-1.0 + 2.0 * stable_sum(&mut head) + rho_hat[max_s + 1]).max(1.0 / total.log10());
    total / tau
}

/// Bulk ESS: [`ess_raw`] of the rank-normalized split chains.
pub fn ess_bulk(chains: &[Vec<f64>]) -> f64 {
    if !valid_input(chains) {
        return f64::NAN;
    }
    ess_raw(&rank_normalize(&split(chains)))
}

/// Tail ESS: the smaller ESS of the 5% and 95% quantile indicators.
pub fn ess_tail(chains: &[Vec<f64>]) -> f64 {
    if !valid_input(chains) {
        return f64::NAN;
    }
    let halves = split(chains);
    let mut pooled: Vec<f64> = halves.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let mut out = f64::INFINITY;
    for p in [0.05, 0.95] {
        let q = quantile_sorted(&pooled, p);
        let ind: Vec<Vec<f64>> =
            halves.iter().map(|c| c.iter().map(|&v| if v <= q { 1.0 } else { 0.0 }).collect()).collect();
        out = out.min(ess_raw(&ind));
    }
    out
}

/// Linear-interpolation quantile of sorted data (`(N - 1) p` positions).
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
}

impl ParamDiagnostics {
    pub fn compute(name: &str, chains: &[Vec<f64>]) -> Self {
        Self { name: name.to_string(), rhat: rhat(chains), ess_bulk: ess_bulk(chains), ess_tail: ess_tail(chains) }
    }

    /// R-hat above the cutoff or undefined.
    pub fn rhat_flag(&self) -> bool {
        !(self.rhat <= RHAT_CUTOFF)
    }

    pub fn ess_flag(&self) -> bool {
        !(self.ess_bulk >= ESS_THRESHOLD && self.ess_tail >= ESS_THRESHOLD)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceReport {
    pub params: Vec<ParamDiagnostics>,
}

impl ConvergenceReport {
    pub fn max_rhat(&self) -> f64 {
        self.params.iter().map(|p| p.rhat).filter(|r| r.is_finite()).fold(f64::NAN, f64::max)
    }

    /// All defined R-hat values below the cutoff.
    pub fn converged(&self) -> bool {
        self.params.iter().all(|p| !p.rhat.is_finite() || p.rhat < RHAT_CUTOFF)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamDiagnostics> {
        self.params.iter().filter(|p| p.rhat_flag() || p.ess_flag())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn iid(m: usize, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..m).map(|_| (0..n).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    fn ar1(m: usize, n: usize, phi: f64, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (1.0 - phi * phi).sqrt();
        (0..m)
            .map(|_| {
                let mut x: f64 = rng.sample(StandardNormal);
                (0..n)
                    .map(|_| {
                        let z: f64 = rng.sample(StandardNormal);
                        x = phi * x + sd * z;
                        x
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn iid_chains_converge() {
        let c = iid(4, 1000, 1);
        assert!(rhat(&c) < 1.01);
        let e = ess_bulk(&c);
        assert!((3600.0..=4400.0).contains(&e), "bulk ESS {e}");
        let t = ess_tail(&c);
        assert!(t > 2500.0, "tail ESS {t}");
    }

    #[test]
    fn shifted_chain_is_detected() {
        let mut c = iid(2, 1000, 2);
        c[1].iter_mut().for_each(|v| *v += 3.0);
        assert!(rhat(&c) > 1.5);
    }

    #[test]
    fn duplicated_chains() {
        let one = iid(1, 1000, 3).remove(0);
        let c = vec![one.clone(), one];
        assert!(rhat(&c) <= 1.005);
    }

    #[test]
    fn ar1_ess_matches_analytic() {
        let phi = 0.9;
        let c = ar1(4, 2000, phi, 4);
        let expected = 8000.0 * (1.0 - phi) / (1.0 + phi);
        let e = ess_bulk(&c);
        assert!((e / expected - 1.0).abs() < 0.25, "{e} vs {expected}");
    }

    #[test]
    fn constant_draws_are_nan() {
        let c = vec![vec![1.0; 100]; 4];
        assert!(rhat(&c).is_nan());
        assert!(ess_bulk(&c).is_nan());
        assert!(ess_tail(&c).is_nan());
        assert!(ParamDiagnostics::compute("x", &c).rhat_flag());
    }

    #[test]
    fn monotone_transform_invariance() {
        let c = ar1(4, 500, 0.5, 5);
        let exp: Vec<Vec<f64>> = c.iter().map(|x| x.iter().map(|v| v.exp()).collect()).collect();
        let cube: Vec<Vec<f64>> = c.iter().map(|x| x.iter().map(|v| v.powi(3)).collect()).collect();
        for t in [&exp, &cube] {
            assert!((rhat(&c) - rhat(t)).abs() < 1e-12);
            assert!((ess_bulk(&c) - ess_bulk(t)).abs() < 1e-9);
            assert!((ess_tail(&c) - ess_tail(t)).abs() < 1e-9);
        }
    }

    #[test]
    fn chain_permutation_invariance() {
        let c = ar1(4, 300, 0.3, 6);
        let mut p = c.clone();
        p.reverse();
        p.swap(0, 2);
        assert_eq!(rhat(&c), rhat(&p));
        assert_eq!(ess_bulk(&c), ess_bulk(&p));
        assert_eq!(ess_tail(&c), ess_tail(&p));
    }

    #[test]
    fn type7_quantile() {
        let v: Vec<f64> = (1..=1000).map(f64::from).collect();
        assert!((quantile_sorted(&v, 0.025) - 25.975).abs() < 1e-12);
        assert_eq!(quantile_sorted(&v, 0.0), 1.0);
        assert_eq!(quantile_sorted(&v, 1.0), 1000.0);
    }
}
