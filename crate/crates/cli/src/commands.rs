//! Subcommand implementations.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use spatial_risk::data::{check_propriety, encode_position, ingest_csv, ColumnRelabelMap, Dataset, Grid, Position};
use spatial_risk::diagnostics::ParamDiagnostics;
use spatial_risk::evaluation::km::write_pmf_csv;
use spatial_risk::evaluation::residuals::write_plot_csv;
use spatial_risk::evaluation::{
    binned_pmf, failure_proportion_map, kaplan_meier_mode, loo, marginal_cross_mode_correlation,
    spatial_correlation_curve, svg, PlugIn, ResidualSet,
};
use spatial_risk::mcem::run_mcem;
use spatial_risk::params::{ModelConfig, ParamLayout};
use spatial_risk::posterior::Posterior;
use spatial_risk::sampler::{sample_posterior, summarize, write_summary_csv, PosteriorDraws};
use spatial_risk::simulation::{run_recovery_study, simulate, write_truth_csv, SimConfig, SimTruth};
use spatial_risk::spatial::{all_locations, linspace, min_eigenvalue_map, write_eigen_map, DistanceMatrix};
use spatial_risk::Error;

use crate::config::RunConfig;
use crate::manifest::Outputs;
use crate::{CliError, Command};

/// Model recorded next to a draws file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrawsSidecar {
    pub model: ModelConfig,
    pub n_covariates: usize,
    pub n_locations: usize,
}

pub fn sidecar_path(draws: &Path) -> PathBuf {
    draws.with_extension("model.toml")
}

pub fn dispatch(command: &Command, mut cfg: RunConfig, config_path: Option<&Path>) -> Result<(), CliError> {
    let name = command_name(command);
    let seed = match command {
        Command::Ingest { data, model } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            None
        }
        Command::Simulate { n_units, side, seed } => {
            let s = &mut cfg.simulation;
            s.n_units = n_units.unwrap_or(s.n_units);
            s.side = side.unwrap_or(s.side);
            s.seed = seed.unwrap_or(s.seed);
            Some(s.seed)
        }
        Command::Fit { data, model, sampler, seed } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            sampler.apply(&mut cfg.sampler);
            cfg.sampler.seed = seed.unwrap_or(cfg.sampler.seed);
            Some(cfg.sampler.seed)
        }
        Command::FitEm { data, model, max_iters, seed } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            cfg.mcem.max_iters = max_iters.unwrap_or(cfg.mcem.max_iters);
            cfg.mcem.seed = seed.unwrap_or(cfg.mcem.seed);
            Some(cfg.mcem.seed)
        }
        Command::Diagnose { draws } => {
            draws.apply(&mut cfg);
            None
        }
        Command::Loo { data, model, draws } | Command::Residuals { data, model, draws } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            draws.apply(&mut cfg);
            None
        }
        Command::Km { data, bins, upper } => {
            data.apply(&mut cfg);
            cfg.km.bins = bins.unwrap_or(cfg.km.bins);
            if upper.is_some() {
                cfg.km.upper = *upper;
            }
            None
        }
        Command::Heatmap { data } => {
            data.apply(&mut cfg);
            None
        }
        Command::Correlate { data, model, draws, covariates, position, distances, n_effects, n_times, seed } => {
            data.apply(&mut cfg);
            model.apply(&mut cfg);
            draws.apply(&mut cfg);
            let c = &mut cfg.correlate;
            if let Some(x) = covariates {
                c.covariates = Some(x.clone());
                c.position = None;
            }
            if let Some(p) = position {
                let p: [u8; 3] = p
                    .as_slice()
                    .try_into()
                    .map_err(|_| CliError::Usage("--position takes cage,slot,node".into()))?;
                c.position = Some(p);
                c.covariates = None;
            }
            if let Some(d) = distances {
                c.distances = d.clone();
            }
            c.settings.n_effects = n_effects.unwrap_or(c.settings.n_effects);
            c.settings.n_times = n_times.unwrap_or(c.settings.n_times);
            c.settings.seed = seed.unwrap_or(c.settings.seed);
            Some(c.settings.seed)
        }
        Command::Eigmap { grid, resolution, nu_max } => {
            if let Some(g) = grid {
                cfg.data.grid = *g;
            }
            cfg.eigmap.resolution = resolution.unwrap_or(cfg.eigmap.resolution);
            cfg.eigmap.nu_max = nu_max.unwrap_or(cfg.eigmap.nu_max);
            None
        }
        Command::Study { sizes, sides, replicates, seed, sampler } => {
            let s = &mut cfg.study;
            if let Some(v) = sizes {
                s.sizes = v.clone();
            }
            if let Some(v) = sides {
                s.sides = v.clone();
            }
            s.replicates = replicates.unwrap_or(s.replicates);
            s.seed = seed.unwrap_or(s.seed);
            sampler.apply(&mut s.sampler);
            Some(s.seed)
        }
    };

    let mut out = Outputs::new(&cfg.output.dir)?;
    if let Some(p) = config_path {
        out.input(p);
    }
    match command {
        Command::Ingest { .. } => ingest(&cfg, &mut out)?,
        Command::Simulate { .. } => simulate_cmd(&cfg, &mut out)?,
        Command::Fit { .. } => fit(&cfg, &mut out)?,
        Command::FitEm { .. } => fit_em(&cfg, &mut out)?,
        Command::Diagnose { .. } => diagnose(&cfg, &mut out)?,
        Command::Loo { .. } => loo_cmd(&cfg, &mut out)?,
        Command::Residuals { .. } => residuals(&cfg, &mut out)?,
        Command::Km { .. } => km(&cfg, &mut out)?,
        Command::Heatmap { .. } => heatmap(&cfg, &mut out)?,
        Command::Correlate { .. } => correlate(&cfg, &mut out)?,
        Command::Eigmap { .. } => eigmap(&cfg, &mut out)?,
        Command::Study { .. } => study(&cfg, &mut out)?,
    }
    let manifest = out.finish(name, &cfg.to_toml(), seed)?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

fn command_name(command: &Command) -> &'static str {
    match command {
        Command::Ingest { .. } => "ingest",
        Command::Simulate { .. } => "simulate",
        Command::Fit { .. } => "fit",
        Command::FitEm { .. } => "fit-em",
        Command::Diagnose { .. } => "diagnose",
        Command::Loo { .. } => "loo",
        Command::Residuals { .. } => "residuals",
        Command::Km { .. } => "km",
        Command::Heatmap { .. } => "heatmap",
        Command::Correlate { .. } => "correlate",
        Command::Eigmap { .. } => "eigmap",
        Command::Study { .. } => "study",
    }
}

fn grid(cfg: &RunConfig) -> Result<Grid, CliError> {
    Ok(Grid::new(cfg.data.grid[0], cfg.data.grid[1])?)
}

fn load_data(cfg: &RunConfig, out: &mut Outputs) -> Result<Dataset, CliError> {
    let path = cfg.data.path.as_deref().ok_or_else(|| CliError::Usage("no data file given (use --data)".into()))?;
    out.input(path);
    let relabel = match &cfg.data.relabel {
        Some(p) => {
            out.input(p);
            Some(ColumnRelabelMap::from_csv(p)?)
        }
        None => None,
    };
    let data = ingest_csv(path, grid(cfg)?, relabel.as_ref())?;
    log::info!("read {} units at {} locations from {}", data.len(), data.n_locations(), path.display());
    Ok(data)
}

fn draws_path(cfg: &RunConfig, out: &Outputs) -> PathBuf {
    cfg.data.draws.clone().unwrap_or_else(|| out.dir().join("draws.csv"))
}

/// Reads the draws and checks them against the requested model, both via
/// the sidecar written by `fit` and via the column names.
fn load_draws(cfg: &RunConfig, data: Option<&Dataset>, out: &mut Outputs) -> Result<PosteriorDraws, CliError> {
    let path = draws_path(cfg, out);
    out.input(&path);
    let draws = PosteriorDraws::read_csv_path(&path)?;
    let Some(data) = data else { return Ok(draws) };
    let sidecar = sidecar_path(&path);
    if sidecar.exists() {
        out.input(&sidecar);
        let text = std::fs::read_to_string(&sidecar).map_err(|e| CliError::io(&sidecar, e))?;
        let recorded: DrawsSidecar = toml::from_str(&text)
            .map_err(|e| Error::Validation(format!("{}: invalid model record: {e}", sidecar.display())))?;
        let model = cfg.model;
        if recorded.model != model {
            return Err(Error::Validation(format!(
                "model mismatch: {} was fitted with {} (mixture {}) but {} (mixture {}) was requested",
                path.display(),
                recorded.model.label(),
                recorded.model.mixture,
                model.label(),
                model.mixture
            ))
            .into());
        }
        if recorded.n_covariates != data.n_covariates() || recorded.n_locations != data.n_locations() {
            return Err(Error::Validation(format!(
                "data mismatch: {} was fitted to {} covariates at {} locations, the data have {} and {}",
                path.display(),
                recorded.n_covariates,
                recorded.n_locations,
                data.n_covariates(),
                data.n_locations()
            ))
            .into());
        }
    }
    let layout = ParamLayout::new(&cfg.model, data.n_covariates(), data.n_locations());
    if draws.names != layout.constrained_names() {
        return Err(Error::Validation(format!(
            "model mismatch: the columns of {} do not match the {} model (mixture {})",
            path.display(),
            cfg.model.label(),
            cfg.model.mixture
        ))
        .into());
    }
    Ok(draws)
}

fn ingest(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    let (n1, n2, nc) = data.event_counts();
    println!("units {}  locations {}  covariates {}", data.len(), data.n_locations(), data.n_covariates());
    println!("mode-1 failures {n1}  mode-2 failures {n2}  censored {nc}");
    let report = check_propriety(&data, cfg.model.family);
    for w in report.warnings() {
        log::warn!("{w}");
    }
    out.write("ingested.csv", |w| data.write_csv(w))?;
    Ok(())
}

fn simulate_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let s = &cfg.simulation;
    let sim = simulate(&SimConfig::new(s.n_units, s.side, s.seed))?;
    let (n1, n2, nc) = sim.dataset.event_counts();
    println!("simulated {} units on a {}x{} grid (use --grid {}x{})", sim.dataset.len(), s.side, s.side, s.side, s.side);
    println!("mode-1 failures {n1}  mode-2 failures {n2}  censored {nc}  regenerations {}", sim.regenerations);
    out.write("data.csv", |w| sim.dataset.write_csv(w))?;
    out.write("truth.csv", |w| write_truth_csv(&SimTruth::table1(), &sim.effects, w))?;
    Ok(())
}

fn fit(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    for w in check_propriety(&data, cfg.model.family).warnings() {
        log::warn!("{w}");
    }
    let post = Posterior::new(&data, cfg.model)?;
    let draws = sample_posterior(&post, &cfg.sampler)?;
    let summary = summarize(&draws);
    let max_rhat = summary.iter().map(|r| r.rhat).filter(|r| r.is_finite()).fold(f64::NAN, f64::max);
    println!(
        "{} chains x {} draws; max R-hat {max_rhat:.3}; divergent transitions {:.2}%",
        draws.n_chains(),
        draws.n_iter(),
        100.0 * draws.divergence_rate()
    );
    let path = out.write("draws.csv", |w| draws.write_csv(w))?;
    out.write("summary.csv", |w| write_summary_csv(&summary, w))?;
    let sidecar =
        DrawsSidecar { model: cfg.model, n_covariates: data.n_covariates(), n_locations: data.n_locations() };
    let name = sidecar_path(&path);
    let name = name.file_name().and_then(|n| n.to_str()).expect("utf-8 file name");
    out.text(name, &toml::to_string(&sidecar).expect("sidecar serializes"))?;
    Ok(())
}

fn fit_em(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    let result = run_mcem(&data, cfg.model, cfg.mcem)?;
    println!(
        "{} iterations; converged {}; final acceptance {:.3}",
        result.trajectory.len(),
        result.converged,
        result.acceptance
    );
    out.write("mcem_trajectory.csv", |w| result.write_trajectory_csv(w))?;
    out.write("mcem_estimates.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["param", "estimate"])?;
        for name in &result.names {
            let v = result.estimate(name).unwrap_or(f64::NAN);
            c.write_record([name.clone(), v.to_string()])?;
        }
        c.flush()?;
        Ok(())
    })?;
    Ok(())
}

fn diagnose(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let draws = load_draws(cfg, None, out)?;
    let diags: Vec<ParamDiagnostics> =
        draws.names.iter().enumerate().map(|(k, name)| ParamDiagnostics::compute(name, &draws.column(k))).collect();
    let flagged = diags.iter().filter(|d| d.rhat_flag() || d.ess_flag()).count();
    println!("{} parameters; {flagged} flagged (R-hat > 1.1 or ESS < 400)", diags.len());
    out.write("diagnostics.csv", |w| {
        let mut c = csv::Writer::from_writer(w);
        c.write_record(["param", "rhat", "ess_bulk", "ess_tail", "rhat_flag", "ess_flag"])?;
        for d in &diags {
            c.write_record([
                d.name.clone(),
                d.rhat.to_string(),
                d.ess_bulk.to_string(),
                d.ess_tail.to_string(),
                u8::from(d.rhat_flag()).to_string(),
                u8::from(d.ess_flag()).to_string(),
            ])?;
        }
        c.flush()?;
        Ok(())
    })?;
    Ok(())
}

fn loo_cmd(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    let draws = load_draws(cfg, Some(&data), out)?;
    let post = Posterior::new(&data, cfg.model)?;
    let result = loo(&post, &draws)?;
    println!(
        "elpd_loo {:.2} (se {:.2}); p_loo {:.2}; looic {:.2}; {} units with k > 0.7",
        result.elpd_loo,
        result.se,
        result.p_loo,
        result.looic,
        result.flagged().len()
    );
    out.write("loo_summary.csv", |w| result.write_summary_csv(w))?;
    out.write("loo_pointwise.csv", |w| result.write_pointwise_csv(w))?;
    Ok(())
}

fn residuals(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    let draws = load_draws(cfg, Some(&data), out)?;
    let post = Posterior::new(&data, cfg.model)?;
    let set = ResidualSet::from_draws(&post, &draws)?;
    out.write("residuals.csv", |w| set.write_csv(w))?;
    let mut all = Vec::new();
    for mode in [1, 2] {
        let points = set.probability_plot(mode)?;
        let xy: Vec<(f64, f64)> = points.iter().map(|p| (p.x, p.y)).collect();
        let title = format!("Mode {mode} Cox-Snell residuals");
        out.text(&format!("residuals_mode{mode}.svg"), &svg::xy_plot(&xy, &title, "log residual", "log(-log(1-p))", false, true))?;
        all.extend(points);
    }
    out.write("residual_plot.csv", |w| write_plot_csv(&all, w))?;
    Ok(())
}

fn km(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    let upper = match cfg.km.upper {
        Some(u) => u,
        None => data.records().iter().map(|r| r.time).fold(0.0, f64::max),
    };
    for mode in [1, 2] {
        let curve = kaplan_meier_mode(&data, mode)?;
        out.write(&format!("km_mode{mode}.csv"), |w| curve.write_csv(w))?;
        let bins = binned_pmf(&curve, cfg.km.bins, upper)?;
        out.write(&format!("pmf_mode{mode}.csv"), |w| write_pmf_csv(&bins, w))?;
        let mut steps = vec![(0.0, 1.0)];
        for (t, s) in curve.times.iter().zip(&curve.surv) {
            steps.push((*t, steps.last().expect("nonempty").1));
            steps.push((*t, *s));
        }
        steps.push((upper, steps.last().expect("nonempty").1));
        let title = format!("Mode {mode} Kaplan-Meier");
        out.text(&format!("km_mode{mode}.svg"), &svg::xy_plot(&steps, &title, "time (years)", "survival", true, false))?;
    }
    Ok(())
}

fn heatmap(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    let map = failure_proportion_map(&data);
    out.write("failure_map.csv", |w| map.write_csv(w))?;
    out.write("failure_marginals.csv", |w| map.write_marginals_csv(w))?;
    for mode in [1, 2] {
        let title = format!("Mode {mode} failure proportion");
        out.text(
            &format!("failure_map_mode{mode}.svg"),
            &svg::heatmap(map.grid.rows, map.grid.cols, &map.proportion[mode - 1], &title),
        )?;
    }
    Ok(())
}

fn correlate(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let data = load_data(cfg, out)?;
    let draws = load_draws(cfg, Some(&data), out)?;
    let c = &cfg.correlate;
    c.settings.validate()?;
    let x: Vec<f64> = match (&c.covariates, c.position) {
        (Some(x), _) => x.clone(),
        (None, Some([cage, slot, node])) => {
            let pos = Position { cage, slot, node };
            pos.validate()?;
            encode_position(&pos).to_vec()
        }
        (None, None) => {
            let p = data.n_covariates();
            let mut mean = vec![0.0; p];
            for j in 0..data.len() {
                for (m, v) in mean.iter_mut().zip(data.covariates(j)) {
                    *m += v / data.len() as f64;
                }
            }
            log::info!("no covariates given; using the sample mean covariate vector");
            mean
        }
    };
    let layout = ParamLayout::new(&cfg.model, data.n_covariates(), data.n_locations());
    let plug = PlugIn::from_draws(&layout, cfg.model.family, &draws)?;
    let cross = marginal_cross_mode_correlation(&plug, &x, &c.settings)?;
    println!("cross-mode correlation {cross:.4}");
    out.write("correlation_cross.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["covariates", "correlation"])?;
        let xs: Vec<String> = x.iter().map(f64::to_string).collect();
        csv.write_record([xs.join(";"), cross.to_string()])?;
        csv.flush()?;
        Ok(())
    })?;
    let mut curves = Vec::new();
    for mode in [1, 2] {
        let curve = spatial_correlation_curve(&plug, mode, &c.distances, &x, &c.settings)?;
        let title = format!("Mode {mode} spatial correlation");
        out.text(&format!("correlation_mode{mode}.svg"), &svg::xy_plot(&curve, &title, "distance", "correlation", true, false))?;
        curves.push((mode, curve));
    }
    out.write("correlation_spatial.csv", |w| {
        let mut csv = csv::Writer::from_writer(w);
        csv.write_record(["mode", "distance", "correlation"])?;
        for (mode, curve) in &curves {
            for (d, r) in curve {
                csv.write_record([mode.to_string(), d.to_string(), r.to_string()])?;
            }
        }
        csv.flush()?;
        Ok(())
    })?;
    Ok(())
}

fn eigmap(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let g = grid(cfg)?;
    let e = &cfg.eigmap;
    if e.resolution < 2 || !(e.nu_max > 0.0) {
        return Err(Error::Config("eigmap needs resolution >= 2 and a positive nu_max".into()).into());
    }
    let r = e.resolution;
    let nu = linspace(e.nu_max / r as f64, e.nu_max, r);
    let kappa = linspace(2.0 / r as f64, 2.0, r);
    let dist = DistanceMatrix::new(&g, &all_locations(&g))?;
    let points = min_eigenvalue_map(&nu, &kappa, &dist)?;
    let negative = points.iter().filter(|p| p.min_eig <= 0.0).count();
    println!("{negative} of {} (nu, kappa) points are not positive definite", points.len());
    out.write("eigmap.csv", |w| write_eigen_map(&points, w))?;
    let values: Vec<Option<f64>> = points.iter().map(|p| Some(p.min_eig)).collect();
    out.text("eigmap.svg", &svg::heatmap(r, r, &values, "Smallest eigenvalue (rows nu, columns kappa)"))?;
    Ok(())
}

fn study(cfg: &RunConfig, out: &mut Outputs) -> Result<(), CliError> {
    let result = run_recovery_study(&cfg.study, &SimTruth::table1())?;
    let converged = result.fits.iter().filter(|f| f.converged).count();
    println!("{} replicate fits, {converged} converged", result.fits.len());
    out.write("study_metrics.csv", |w| result.write_metrics_csv(w))?;
    out.write("study_fits.csv", |w| result.write_fits_csv(w))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_sits_next_to_draws() {
        assert_eq!(sidecar_path(Path::new("out/draws.csv")), PathBuf::from("out/draws.model.toml"));
    }

    #[test]
    fn sidecar_round_trips() {
        let s = DrawsSidecar { model: ModelConfig::default(), n_covariates: 2, n_locations: 9 };
        assert_eq!(toml::from_str::<DrawsSidecar>(&toml::to_string(&s).unwrap()).unwrap(), s);
    }
}
