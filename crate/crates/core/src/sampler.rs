//! No-U-turn Hamiltonian Monte Carlo with multinomial trajectory sampling,
//! dual-averaging step size and a windowed diagonal metric.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ess_bulk, ess_tail, quantile_sorted, rhat, stable_sum};
use crate::error::{Error, Result};
use crate::posterior::{LogDensity, Posterior};
use crate::special::log_add_exp;

/// Energy error beyond which a trajectory is declared divergent.
pub const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub chains: usize,
    pub warmup: usize,
    pub samples: usize,
    pub seed: u64,
    pub max_tree_depth: usize,
    pub target_accept: f64,
    /// Initial values are uniform on `(-init_radius, init_radius)`.
    pub init_radius: f64,
    pub max_init_tries: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            chains: 4,
            warmup: 6000,
            samples: 2000,
            seed: 1,
            max_tree_depth: 10,
            target_accept: 0.8,
            init_radius: 2.0,
            max_init_tries: 100,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.chains == 0 || self.samples == 0 || self.max_tree_depth == 0 || self.max_init_tries == 0 {
            return Err(Error::Config("chains, samples, max_tree_depth and max_init_tries must be positive".into()));
        }
        if !(self.target_accept > 0.0 && self.target_accept < 1.0) {
            return Err(Error::Config(format!("target_accept must lie in (0, 1), got {}", self.target_accept)));
        }
        if !(self.init_radius > 0.0) {
            return Err(Error::Config("init_radius must be positive".into()));
        }
        Ok(())
    }
}

/// Per-iteration sampler statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterStats {
    pub accept_stat: f64,
    pub tree_depth: usize,
    pub n_leapfrog: usize,
    pub divergent: bool,
    pub energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChainDraws {
    /// One stored vector per post-warmup iteration.
    pub draws: Vec<Vec<f64>>,
    pub lp: Vec<f64>,
    /// Empty when the draws were loaded from a file.
    pub stats: Vec<IterStats>,
    pub step_size: f64,
    pub inv_metric: Vec<f64>,
}

/// Post-warmup draws of every chain on the constrained scale.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

#[derive(Clone)]
struct Point {
    q: Vec<f64>,
    p: Vec<f64>,
    grad: Vec<f64>,
    lp: f64,
}

struct TreeStats {
    n_leapfrog: usize,
    sum_metro_prob: f64,
    divergent: bool,
}

struct Nuts<'a, T: LogDensity + ?Sized> {
    target: &'a T,
    inv_metric: Vec<f64>,
    step: f64,
    max_depth: usize,
    rng: ChaCha8Rng,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_into(acc: &mut [f64], v: &[f64]) {
    acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
}

impl<T: LogDensity + ?Sized> Nuts<'_, T> {
    fn kinetic(&self, p: &[f64]) -> f64 {
        0.5 * p.iter().zip(&self.inv_metric).map(|(p, m)| p * p * m).sum::<f64>()
    }

    fn hamiltonian(&self, z: &Point) -> f64 {
        let h = -z.lp + self.kinetic(&z.p);
        if h.is_nan() || !z.lp.is_finite() {
            f64::INFINITY
        } else {
            h
        }
    }

    fn p_sharp(&self, p: &[f64]) -> Vec<f64> {
        p.iter().zip(&self.inv_metric).map(|(p, m)| p * m).collect()
    }

    fn sample_momentum(&mut self, z: &mut Point) {
        for (p, m) in z.p.iter_mut().zip(&self.inv_metric) {
            let n: f64 = self.rng.sample(StandardNormal);
            *p = n / m.sqrt();
        }
    }

    fn leapfrog(&self, z: &mut Point, eps: f64) {
        for (p, g) in z.p.iter_mut().zip(&z.grad) {
            *p += 0.5 * eps * g;
        }
        for ((q, p), m) in z.q.iter_mut().zip(&z.p).zip(&self.inv_metric) {
            *q += eps * m * p;
        }
        z.lp = self.target.log_density_grad(&z.q, &mut z.grad);
        if z.lp.is_finite() {
            for (p, g) in z.p.iter_mut().zip(&z.grad) {
                *p += 0.5 * eps * g;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn build_tree(
        &mut self,
        depth: usize,
        z: &mut Point,
        z_propose: &mut Point,
        p_sharp_beg: &mut Vec<f64>,
        p_sharp_end: &mut Vec<f64>,
        rho: &mut [f64],
        p_beg: &mut Vec<f64>,
        p_end: &mut Vec<f64>,
        h0: f64,
        sign: f64,
        log_sum_weight: &mut f64,
        st: &mut TreeStats,
    ) -> bool {
        if depth == 0 {
            self.leapfrog(z, sign * self.step);
            st.n_leapfrog += 1;
            let h = self.hamiltonian(z);
            if h - h0 > DIVERGENCE_THRESHOLD {
                st.divergent = true;
            }
            *log_sum_weight = log_add_exp(*log_sum_weight, h0 - h);
            st.sum_metro_prob += if h0 - h > 0.0 { 1.0 } else { (h0 - h).exp() };
            *z_propose = z.clone();
            *p_sharp_beg = self.p_sharp(&z.p);
            *p_sharp_end = p_sharp_beg.clone();
            add_into(rho, &z.p);
            *p_beg = z.p.clone();
            *p_end = z.p.clone();
            return !st.divergent;
        }
        let dim = z.q.len();

        let mut lsw_init = f64::NEG_INFINITY;
        let mut p_init_end = vec![0.0; dim];
        let mut p_sharp_init_end = vec![0.0; dim];
        let mut rho_init = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            z_propose,
            p_sharp_beg,
            &mut p_sharp_init_end,
            &mut rho_init,
            p_beg,
            &mut p_init_end,
            h0,
            sign,
            &mut lsw_init,
            st,
        ) {
            return false;
        }

        let mut z_propose_final = z.clone();
        let mut lsw_final = f64::NEG_INFINITY;
        let mut p_final_beg = vec![0.0; dim];
        let mut p_sharp_final_beg = vec![0.0; dim];
        let mut rho_final = vec![0.0; dim];
        if !self.build_tree(
            depth - 1,
            z,
            &mut z_propose_final,
            &mut p_sharp_final_beg,
            p_sharp_end,
            &mut rho_final,
            &mut p_final_beg,
            p_end,
            h0,
            sign,
            &mut lsw_final,
            st,
        ) {
            return false;
        }

        let lsw_subtree = log_add_exp(lsw_init, lsw_final);
        *log_sum_weight = log_add_exp(*log_sum_weight, lsw_subtree);
        if lsw_final > lsw_subtree || self.rng.random::<f64>() < (lsw_final - lsw_subtree).exp() {
            *z_propose = z_propose_final;
        }

        let rho_subtree: Vec<f64> = rho_init.iter().zip(&rho_final).map(|(a, b)| a + b).collect();
        add_into(rho, &rho_subtree);
        let mut persist = criterion(p_sharp_beg, p_sharp_end, &rho_subtree);
        let ext: Vec<f64> = rho_init.iter().zip(&p_final_beg).map(|(a, b)| a + b).collect();
        persist &= criterion(p_sharp_beg, &p_sharp_final_beg, &ext);
        let ext: Vec<f64> = rho_final.iter().zip(&p_init_end).map(|(a, b)| a + b).collect();
        persist &= criterion(&p_sharp_init_end, p_sharp_end, &ext);
        persist
    }

    fn transition(&mut self, current: &Point) -> (Point, IterStats) {
        let dim = current.q.len();
        let mut z = current.clone();
        self.sample_momentum(&mut z);
        let h0 = self.hamiltonian(&z);

        let mut z_fwd = z.clone();
        let mut z_bck = z.clone();
        let mut z_sample = z.clone();
        let mut z_propose = z.clone();

        let ps = self.p_sharp(&z.p);
        let (mut p_fwd_fwd, mut p_fwd_bck, mut p_bck_fwd, mut p_bck_bck) =
            (z.p.clone(), z.p.clone(), z.p.clone(), z.p.clone());
        let (mut ps_fwd_fwd, mut ps_fwd_bck, mut ps_bck_fwd, mut ps_bck_bck) = (ps.clone(), ps.clone(), ps.clone(), ps);
        let mut rho = z.p.clone();
        let mut log_sum_weight = 0.0;
        let mut st = TreeStats { n_leapfrog: 0, sum_metro_prob: 0.0, divergent: false };
        let mut depth = 0;

        while depth < self.max_depth {
            let mut rho_fwd = vec![0.0; dim];
            let mut rho_bck = vec![0.0; dim];
            let mut lsw_subtree = f64::NEG_INFINITY;
            let valid = if self.rng.random::<f64>() > 0.5 {
                rho_bck.copy_from_slice(&rho);
                p_bck_fwd.clone_from(&p_fwd_bck);
                ps_bck_fwd.clone_from(&ps_fwd_bck);
                let ok = self.build_tree(
                    depth,
                    &mut z_fwd,
                    &mut z_propose,
                    &mut ps_fwd_bck,
                    &mut ps_fwd_fwd,
                    &mut rho_fwd,
                    &mut p_fwd_bck,
                    &mut p_fwd_fwd,
                    h0,
                    1.0,
                    &mut lsw_subtree,
                    &mut st,
                );
                ok
            } else {
                rho_fwd.copy_from_slice(&rho);
                p_fwd_bck.clone_from(&p_bck_fwd);
                ps_fwd_bck.clone_from(&ps_bck_fwd);
                self.build_tree(
                    depth,
                    &mut z_bck,
                    &mut z_propose,
                    &mut ps_bck_fwd,
                    &mut ps_bck_bck,
                    &mut rho_bck,
                    &mut p_bck_fwd,
                    &mut p_bck_bck,
                    h0,
                    -1.0,
                    &mut lsw_subtree,
                    &mut st,
                )
            };
            if !valid {
                break;
            }
            depth += 1;
            if lsw_subtree > log_sum_weight || self.rng.random::<f64>() < (lsw_subtree - log_sum_weight).exp() {
                z_sample = z_propose.clone();
            }
            log_sum_weight = log_add_exp(log_sum_weight, lsw_subtree);
            rho = rho_bck.iter().zip(&rho_fwd).map(|(a, b)| a + b).collect();
            let mut persist = criterion(&ps_bck_bck, &ps_fwd_fwd, &rho);
            let ext: Vec<f64> = rho_bck.iter().zip(&p_fwd_bck).map(|(a, b)| a + b).collect();
            persist &= criterion(&ps_bck_bck, &ps_fwd_bck, &ext);
            let ext: Vec<f64> = rho_fwd.iter().zip(&p_bck_fwd).map(|(a, b)| a + b).collect();
            persist &= criterion(&ps_bck_fwd, &ps_fwd_fwd, &ext);
            if !persist {
                break;
            }
        }
        let accept_stat = if st.n_leapfrog > 0 { st.sum_metro_prob / st.n_leapfrog as f64 } else { 0.0 };
        let energy = self.hamiltonian(&z_sample);
        let stats = IterStats { accept_stat, tree_depth: depth, n_leapfrog: st.n_leapfrog, divergent: st.divergent, energy };
        (z_sample, stats)
    }

    /// Doubles or halves the step size until a single leapfrog step crosses
    /// an acceptance probability of 0.8.
    fn init_step_size(&mut self, current: &Point) {
        let target = 0.8f64.ln();
        let mut direction = 0.0;
        for _ in 0..100 {
            let mut z = current.clone();
            self.sample_momentum(&mut z);
            let h0 = self.hamiltonian(&z);
            self.leapfrog(&mut z, self.step);
            let delta = h0 - self.hamiltonian(&z);
            if direction == 0.0 {
                direction = if delta > target { 1.0 } else { -1.0 };
            } else if (direction > 0.0 && !(delta > target)) || (direction < 0.0 && !(delta < target)) {
                break;
            }
            self.step = if direction > 0.0 { self.step * 2.0 } else { self.step * 0.5 };
            if !(self.step > 1e-12 && self.step < 1e7) {
                self.step = self.step.clamp(1e-12, 1e7);
                break;
            }
        }
    }
}

fn criterion(p_sharp_minus: &[f64], p_sharp_plus: &[f64], rho: &[f64]) -> bool {
    dot(p_sharp_plus, rho) > 0.0 && dot(p_sharp_minus, rho) > 0.0
}

struct DualAveraging {
    mu: f64,
    s_bar: f64,
    x_bar: f64,
    counter: f64,
    delta: f64,
}

impl DualAveraging {
    const GAMMA: f64 = 0.05;
    const T0: f64 = 10.0;
    const KAPPA: f64 = 0.75;

    fn new(step: f64, delta: f64) -> Self {
        Self { mu: (10.0 * step).ln(), s_bar: 0.0, x_bar: 0.0, counter: 0.0, delta }
    }

    fn update(&mut self, accept: f64) -> f64 {
        self.counter += 1.0;
        let accept = accept.min(1.0);
        let eta = 1.0 / (self.counter + Self::T0);
        self.s_bar = (1.0 - eta) * self.s_bar + eta * (self.delta - accept);
        let x = self.mu - self.s_bar * self.counter.sqrt() / Self::GAMMA;
        let x_eta = self.counter.powf(-Self::KAPPA);
        self.x_bar = (1.0 - x_eta) * self.x_bar + x_eta * x;
        x.exp()
    }

    fn final_step(&self) -> f64 {
        self.x_bar.exp()
    }
}

/// Ends of the metric adaptation windows: 15% initial step-size buffer,
/// doubling windows over the next 75%, 10% terminal buffer.
fn window_ends(warmup: usize) -> Vec<usize> {
    if warmup < 20 {
        return Vec::new();
    }
    let init = (0.15 * warmup as f64) as usize;
    let term = (0.10 * warmup as f64) as usize;
    let slow_end = warmup - term;
    let mut ends = Vec::new();
    let mut size = 25.min((slow_end - init).max(1));
    let mut start = init;
    loop {
        let mut end = start + size;
        // the last window absorbs whatever would not fit a doubled window
        if end + 2 * size >= slow_end || end >= slow_end {
            end = slow_end;
        }
        ends.push(end);
        if end == slow_end {
            break;
        }
        start = end;
        size *= 2;
    }
    ends
}

#[derive(Default)]
struct Welford {
    n: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Welford {
    fn add(&mut self, x: &[f64]) {
        if self.mean.is_empty() {
            self.mean = vec![0.0; x.len()];
            self.m2 = vec![0.0; x.len()];
        }
        self.n += 1.0;
        for i in 0..x.len() {
            let d = x[i] - self.mean[i];
            self.mean[i] += d / self.n;
            self.m2[i] += d * (x[i] - self.mean[i]);
        }
    }

    /// Sample variance shrunk towards `1e-3`.
    fn regularized(&self) -> Vec<f64> {
        let n = self.n;
        self.m2.iter().map(|m| (n / (n + 5.0)) * (m / (n - 1.0)) + 1e-3 * (5.0 / (n + 5.0))).collect()
    }
}

fn initialize<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig, rng: &mut ChaCha8Rng) -> Result<Point> {
    let dim = target.dim();
    let mut last = Vec::new();
    for _ in 0..cfg.max_init_tries {
        let q: Vec<f64> = (0..dim).map(|_| rng.random_range(-cfg.init_radius..cfg.init_radius)).collect();
        let mut grad = vec![0.0; dim];
        let lp = target.log_density_grad(&q, &mut grad);
        if lp.is_finite() && grad.iter().all(|g| g.is_finite()) {
            return Ok(Point { q, p: vec![0.0; dim], grad, lp });
        }
        last = q;
    }
    Err(Error::Initialization(format!(
        "no finite log density after {} draws: {}",
        cfg.max_init_tries,
        target.describe_non_finite(&last)
    )))
}

/// Draws an initial state uniformly on `(-r, r)^dim`, retrying until the log
/// density is finite.
pub fn initial_state<T: LogDensity + ?Sized>(target: &T, cfg: &SamplerConfig, seed: u64) -> Result<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    initialize(target, cfg, &mut rng).map(|p| p.q)
}

fn chain_rng(seed: u64, chain: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chain as u64 + 1);
    rng
}

fn run_chain<T, F>(target: &T, cfg: &SamplerConfig, chain: usize, transform: &F) -> Result<ChainDraws>
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    let mut rng = chain_rng(cfg.seed, chain);
    let mut current = initialize(target, cfg, &mut rng)?;
    let dim = target.dim();
    let mut nuts = Nuts { target, inv_metric: vec![1.0; dim], step: 1.0, max_depth: cfg.max_tree_depth, rng };
    nuts.init_step_size(&current);
    let mut da = DualAveraging::new(nuts.step, cfg.target_accept);
    let ends = window_ends(cfg.warmup);
    let slow_start = if ends.is_empty() { usize::MAX } else { (0.15 * cfg.warmup as f64) as usize };
    let mut window = Welford::default();

    for it in 0..cfg.warmup {
        let (next, stats) = nuts.transition(&current);
        current = next;
        nuts.step = da.update(stats.accept_stat);
        if it >= slow_start && ends.last().is_some_and(|&e| it < e) {
            window.add(&current.q);
            if ends.contains(&(it + 1)) {
                nuts.inv_metric = window.regularized();
                window = Welford::default();
                nuts.init_step_size(&current);
                da = DualAveraging::new(nuts.step, cfg.target_accept);
            }
        }
    }
    if cfg.warmup > 0 {
        nuts.step = da.final_step();
    }

    let mut out = ChainDraws {
        draws: Vec::with_capacity(cfg.samples),
        lp: Vec::with_capacity(cfg.samples),
        stats: Vec::with_capacity(cfg.samples),
        step_size: nuts.step,
        inv_metric: nuts.inv_metric.clone(),
    };
    for _ in 0..cfg.samples {
        let (next, stats) = nuts.transition(&current);
        current = next;
        out.draws.push(transform(&current.q));
        out.lp.push(current.lp);
        out.stats.push(stats);
    }
    Ok(out)
}

/// Runs independent chains in parallel. Each chain owns an RNG stream derived
/// from the seed and its index, so results do not depend on thread count.
pub fn run_chains<T, F>(target: &T, cfg: &SamplerConfig, names: Vec<String>, transform: F) -> Result<PosteriorDraws>
where
    T: LogDensity + ?Sized,
    F: Fn(&[f64]) -> Vec<f64> + Sync,
{
    cfg.validate()?;
    let chains = (0..cfg.chains)
        .into_par_iter()
        .map(|c| run_chain(target, cfg, c, &transform))
        .collect::<Result<Vec<_>>>()?;
    let draws = PosteriorDraws { names, chains };
    let rate = draws.divergence_rate();
    if rate > 0.1 {
        log::warn!("{:.1}% of post-warmup transitions diverged", 100.0 * rate);
    }
    Ok(draws)
}

/// Samples a model posterior and stores constrained parameters and effects.
pub fn sample_posterior(post: &Posterior, cfg: &SamplerConfig) -> Result<PosteriorDraws> {
    let layout = post.layout().clone();
    run_chains(post, cfg, layout.constrained_names(), move |u| layout.constrained_vector(u))
}

impl PosteriorDraws {
    pub fn n_chains(&self) -> usize {
        self.chains.len()
    }

    pub fn n_iter(&self) -> usize {
        self.chains.first().map_or(0, |c| c.draws.len())
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Per-chain sequences of one parameter.
    pub fn column(&self, k: usize) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.draws.iter().map(|d| d[k]).collect()).collect()
    }

    pub fn lp_chains(&self) -> Vec<Vec<f64>> {
        self.chains.iter().map(|c| c.lp.clone()).collect()
    }

    /// All draws, chain by chain.
    pub fn iter_draws(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.chains.iter().flat_map(|c| c.draws.iter())
    }

    pub fn divergence_rate(&self) -> f64 {
        let (div, total) = self.chains.iter().flat_map(|c| &c.stats).fold((0usize, 0usize), |(d, t), s| {
            (d + usize::from(s.divergent), t + 1)
        });
        if total == 0 {
            0.0
        } else {
            div as f64 / total as f64
        }
    }

    /// Posterior mean of every stored quantity.
    pub fn means(&self) -> Vec<f64> {
        (0..self.names.len())
            .map(|k| {
                let mut v: Vec<f64> = self.iter_draws().map(|d| d[k]).collect();
                let n = v.len() as f64;
                stable_sum(&mut v) / n
            })
            .collect()
    }

    /// CSV with header `chain,iter,<names>,lp__`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["chain".to_string(), "iter".to_string()];
        header.extend(self.names.iter().cloned());
        header.push("lp__".into());
        w.write_record(&header)?;
        for (c, chain) in self.chains.iter().enumerate() {
            for (i, (d, lp)) in chain.draws.iter().zip(&chain.lp).enumerate() {
                let mut row = vec![(c + 1).to_string(), (i + 1).to_string()];
                row.extend(d.iter().map(|v| v.to_string()));
                row.push(lp.to_string());
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        if header.len() < 3 || header[0] != "chain" || header[1] != "iter" || header.last().map(String::as_str) != Some("lp__") {
            return Err(Error::Parse { line: 1, message: "draws header must be chain,iter,<params...>,lp__".into() });
        }
        let names = header[2..header.len() - 1].to_vec();
        let mut chains: Vec<ChainDraws> = Vec::new();
        for (i, rec) in rdr.records().enumerate() {
            let line = i + 2;
            let rec = rec?;
            if rec.len() != header.len() {
                return Err(Error::Parse { line, message: format!("expected {} fields, got {}", header.len(), rec.len()) });
            }
            let parse = |s: &str| s.trim().parse::<f64>().map_err(|e| Error::Parse { line, message: format!("`{s}`: {e}") });
            let chain: usize = rec[0].trim().parse().map_err(|e| Error::Parse { line, message: format!("chain: {e}") })?;
            if chain == 0 || chain > chains.len() + 1 {
                return Err(Error::Parse { line, message: format!("chain index {chain} out of sequence") });
            }
            if chain > chains.len() {
                chains.push(ChainDraws { draws: Vec::new(), lp: Vec::new(), stats: Vec::new(), step_size: f64::NAN, inv_metric: Vec::new() });
            }
            let values = (2..rec.len() - 1).map(|k| parse(&rec[k])).collect::<Result<Vec<_>>>()?;
            chains[chain - 1].draws.push(values);
            chains[chain - 1].lp.push(parse(&rec[rec.len() - 1])?);
        }
        Ok(Self { names, chains })
    }

    pub fn read_csv_path(path: &Path) -> Result<Self> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// One row of the posterior summary table.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub q025: f64,
    pub q975: f64,
    pub rhat: f64,
    pub ess_bulk: f64,
    pub ess_tail: f64,
}

fn summarize_column(name: &str, chains: Vec<Vec<f64>>) -> SummaryRow {
    let mut pooled: Vec<f64> = chains.iter().flatten().copied().collect();
    pooled.sort_by(f64::total_cmp);
    let n = pooled.len() as f64;
    let mean = pooled.iter().sum::<f64>() / n;
    let mut sq: Vec<f64> = pooled.iter().map(|v| (v - mean).powi(2)).collect();
    let sd = if pooled.len() > 1 { (stable_sum(&mut sq) / (n - 1.0)).sqrt() } else { 0.0 };
    SummaryRow {
        name: name.to_string(),
        mean,
        sd,
        q025: quantile_sorted(&pooled, 0.025),
        q975: quantile_sorted(&pooled, 0.975),
        rhat: rhat(&chains),
        ess_bulk: ess_bulk(&chains),
        ess_tail: ess_tail(&chains),
    }
}

/// Mean, sd, equal-tail 95% interval and convergence diagnostics for every
/// stored quantity.
pub fn summarize(draws: &PosteriorDraws) -> Vec<SummaryRow> {
    (0..draws.names.len())
        .into_par_iter()
        .map(|k| summarize_column(&draws.names[k], draws.column(k)))
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["param", "mean", "sd", "q025", "q975", "rhat", "ess_bulk", "ess_tail"])?;
    for r in rows {
        w.write_record([
            r.name.clone(),
            r.mean.to_string(),
            r.sd.to_string(),
            r.q025.to_string(),
            r.q975.to_string(),
            r.rhat.to_string(),
            r.ess_bulk.to_string(),
            r.ess_tail.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
