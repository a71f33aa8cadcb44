use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use spatial_risk::data::EventType;
use spatial_risk::distributions::{log_pdf_mode1, log_survival_mode1, DistributionFamily};
use spatial_risk::params::ThetaT;
use spatial_risk::simulation::{simulate, SimConfig};
use spatial_risk::special::gamma_q;

const W: DistributionFamily = DistributionFamily::Weibull;

/// Censoring time bounds in years for the default window.
fn censor_range(cfg: &SimConfig) -> (f64, f64) {
    let lo = (cfg.end - cfg.start_to).num_days() as f64 / 365.25;
    let hi = (cfg.end - cfg.start_from).num_days() as f64 / 365.25;
    (lo, hi)
}

/// `P(T_k < T_other, T_k < C)` for one covariate vector and effect pair, with
/// `C` uniform on `[lo, hi]`, by composite Simpson integration.
fn mode_probability(tt: &ThetaT, x: &[f64], w: [f64; 2], mode: usize, lo: f64, hi: f64) -> f64 {
    let m1 = tt.mu1 + tt.beta1.iter().zip(x).map(|(b, v)| b * v).sum::<f64>() + w[0];
    let m2 = tt.mu2 + tt.beta2.iter().zip(x).map(|(b, v)| b * v).sum::<f64>() + w[1];
    let (mk, xk, mo, xo) = if mode == 1 { (m1, tt.xi1, m2, tt.xi21) } else { (m2, tt.xi21, m1, tt.xi1) };
    let p_cens_after = |t: f64| if t <= lo { 1.0 } else { (hi - t) / (hi - lo) };
    let g = |t: f64| {
        (log_pdf_mode1(t, mk, xk, W).unwrap() + log_survival_mode1(t, mo, xo, W).unwrap()).exp() * p_cens_after(t)
    };
    let n = 20_000;
    let h = hi / n as f64;
    let mut s = 0.0;
    for i in 1..n {
        s += if i % 2 == 1 { 4.0 } else { 2.0 } * g(i as f64 * h);
    }
    (s + g(hi)) * h / 3.0
}

const COVARIATE_PATTERNS: [[f64; 2]; 4] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];

#[test]
fn mode1_share_among_failures_matches_integration() {
    let cfg = SimConfig::new(20_000, 4, 21);
    let sim = simulate(&cfg).unwrap();
    let (lo, hi) = censor_range(&cfg);
    let tt = &cfg.truth.theta_t;
    let cells = sim.effects.n();
    let (mut p1, mut p2) = (0.0, 0.0);
    for c in 0..cells {
        let w = [sim.effects.get(c, 1), sim.effects.get(c, 2)];
        for x in &COVARIATE_PATTERNS {
            p1 += mode_probability(tt, x, w, 1, lo, hi);
            p2 += mode_probability(tt, x, w, 2, lo, hi);
        }
    }
    let expected = p1 / (p1 + p2);
    let (n1, n2, _) = sim.dataset.event_counts();
    let failures = (n1 + n2) as f64;
    let observed = n1 as f64 / failures;
    let se = (expected * (1.0 - expected) / failures).sqrt();
    assert!((observed - expected).abs() < 3.0 * se, "observed {observed} expected {expected} se {se}");
}

/// Kolmogorov distance of a sample against Uniform(0, 1).
fn ks_uniform(mut u: Vec<f64>) -> f64 {
    u.sort_by(f64::total_cmp);
    let n = u.len() as f64;
    u.iter()
        .enumerate()
        .map(|(i, &v)| ((i as f64 + 1.0) / n - v).max(v - i as f64 / n))
        .fold(0.0, f64::max)
}

#[test]
fn latent_times_follow_the_conditional_weibull_per_cell() {
    let cfg = SimConfig::new(6000, 5, 22);
    let sim = simulate(&cfg).unwrap();
    let tt = &cfg.truth.theta_t;
    let data = &sim.dataset;
    let mut passed = 0;
    let mut tested = 0;
    for loc in 0..data.n_locations() {
        let units: Vec<usize> = (0..data.len()).filter(|&j| data.location_of(j) == loc).collect();
        if units.len() < 20 {
            continue;
        }
        let cell = data.locations()[loc];
        let cell = cell.row as usize * sim.grid.cols + cell.col as usize;
        for mode in [1usize, 2] {
            let xi = if mode == 1 { tt.xi1 } else { tt.xi21 };
            let u: Vec<f64> = units
                .iter()
                .map(|&j| {
                    let (m, _) = tt.location_params(data.covariates(j), sim.effects.get(cell, mode), mode);
                    -log_survival_mode1(sim.latent[j][mode - 1], m, xi, W).unwrap().exp_m1()
                })
                .collect();
            let n = u.len() as f64;
            // Stephens' finite-sample scaling of the 1% critical value.
            let stat = ks_uniform(u) * (n.sqrt() + 0.12 + 0.11 / n.sqrt());
            tested += 1;
            passed += usize::from(stat < 1.628);
        }
    }
    assert!(tested >= 40);
    assert!(passed as f64 >= 0.95 * tested as f64, "{passed} of {tested} cells passed");
}

#[test]
fn without_effects_failure_proportions_are_homogeneous() {
    let mut cfg = SimConfig::new(8000, 4, 23);
    cfg.truth.theta_w.sigma1 = 0.0;
    cfg.truth.theta_w.sigma2 = 0.0;
    let sim = simulate(&cfg).unwrap();
    let data = &sim.dataset;
    for mode in [EventType::Mode1, EventType::Mode2] {
        let cells = data.n_locations();
        let mut n = vec![0.0; cells];
        let mut f = vec![0.0; cells];
        for (j, r) in data.records().iter().enumerate() {
            n[data.location_of(j)] += 1.0;
            f[data.location_of(j)] += f64::from(u8::from(r.event == mode));
        }
        let p = f.iter().sum::<f64>() / n.iter().sum::<f64>();
        let chi2: f64 = (0..cells).map(|i| (f[i] - n[i] * p).powi(2) / (n[i] * p * (1.0 - p))).sum();
        let p_value = gamma_q((cells - 1) as f64 / 2.0, chi2 / 2.0);
        assert!(p_value > 0.001, "{mode:?}: chi-square {chi2} on {} df, p = {p_value}", cells - 1);
    }
}

#[test]
fn marginal_failure_proportions_match_integrated_model() {
    let cfg = SimConfig::new(7000, 7, 24);
    let sim = simulate(&cfg).unwrap();
    let (lo, hi) = censor_range(&cfg);
    let tt = &cfg.truth.theta_t;
    let tw = &cfg.truth.theta_w;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws = 400;
    let mut per_draw = [Vec::new(), Vec::new()];
    for _ in 0..draws {
        let z1: f64 = StandardNormal.sample(&mut rng);
        let z2: f64 = StandardNormal.sample(&mut rng);
        let w = [tw.sigma1 * z1, tw.sigma2 * (tw.rho12 * z1 + (1.0 - tw.rho12 * tw.rho12).sqrt() * z2)];
        for mode in [1, 2] {
            let p: f64 =
                COVARIATE_PATTERNS.iter().map(|x| mode_probability(tt, x, w, mode, lo, hi)).sum::<f64>() / 4.0;
            per_draw[mode - 1].push(p);
        }
    }
    let (n1, n2, _) = sim.dataset.event_counts();
    let n = sim.dataset.len() as f64;
    for (k, observed) in [n1 as f64 / n, n2 as f64 / n].into_iter().enumerate() {
        let mean = per_draw[k].iter().sum::<f64>() / draws as f64;
        let var_effect = per_draw[k].iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        // Treat all cells as sharing one effect: the widest plausible band.
        let sd = (mean * (1.0 - mean) / n + var_effect).sqrt();
        assert!((observed - mean).abs() < 3.0 * sd, "mode {}: observed {observed}, model {mean} ± {sd}", k + 1);
    }
}
