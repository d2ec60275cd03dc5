//! The static inverse-problem runs and the sequential Lorenz-63 runs, each
//! writing CSV tables and a JSON summary into the configured directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{Cholesky, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use steinflow_core::diagnostics::{
    count_modes, kde_1d, kde_1d_bounded, linspace, silverman_bandwidth, trapezoid, DensityEstimate, KdeBandwidth, Modes,
};
use steinflow_core::filters::{initial_ensemble, run_sequential_observed, simulate_truth, SequentialExperiment, Truth};
use steinflow_core::kernel::Gram;
use steinflow_core::mapping::map_to_posterior_observed;
use steinflow_core::obsgrad::{operator_gradients, EnsembleEvaluations};
use steinflow_core::rng::{stream, tag};
use steinflow_core::{Ensemble, GradientBackend, MappingDiagnostics, PriorSpec};

use crate::config::{ExperimentConfig, ExperimentKind, KdeBandwidthConfig};

/// Column-schema version written into every summary.
pub const SCHEMA_VERSION: u32 = 1;

fn num(v: f64) -> String {
    format!("{v}")
}

fn csv_writer(dir: &Path, name: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let path = dir.join(name);
    let file = File::create(&path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    let path = dir.join(name);
    let mut w = BufWriter::new(File::create(&path).with_context(|| format!("cannot create {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn state_headers(prefix: &str, dim: usize) -> Vec<String> {
    (0..dim).map(|i| format!("{prefix}_{i}")).collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalSummary {
    pub component: usize,
    pub bandwidth: f64,
    pub modes: Modes,
}

#[derive(Debug, Clone, Serialize)]
pub struct StaticSummary {
    pub schema_version: u32,
    pub experiment: &'static str,
    pub backend: &'static str,
    pub n_particles: usize,
    pub truth: Vec<f64>,
    pub observation: Vec<f64>,
    pub mapping: MappingDiagnostics,
    pub posterior_mean: Vec<f64>,
    pub posterior_variance: Vec<f64>,
    /// Share of final particles with a positive coordinate, per component.
    pub positive_fraction: Vec<f64>,
    pub marginals: Vec<MarginalSummary>,
    /// Modes of the quadrature posterior (1-D problems only).
    pub analytic_modes: Option<Modes>,
    pub analytic_integral: Option<f64>,
    /// Particle coordinates found outside the prior support over all iterations.
    pub support_violations: usize,
}

/// Quadrature posterior of a 1-D problem, normalized on `grid`.
pub fn analytic_posterior(
    prior: &PriorSpec,
    model: &steinflow_core::ObservationModel,
    y: &DVector<f64>,
    grid: &[f64],
) -> Result<Vec<f64>> {
    let log_p: Vec<f64> = grid
        .iter()
        .map(|&x| Ok(prior.log_density(&[x])? + model.log_likelihood(&[x], y)?))
        .collect::<steinflow_core::Result<_>>()?;
    let top = log_p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        bail!("posterior has no mass on the quadrature grid");
    }
    let unnorm: Vec<f64> = log_p.iter().map(|l| (l - top).exp()).collect();
    let z = trapezoid(grid, &unnorm);
    Ok(unnorm.into_iter().map(|p| p / z).collect())
}

fn static_grid(prior: &PriorSpec, component: usize, samples: &[f64], pad: f64, n: usize) -> Vec<f64> {
    let lo_s = samples.iter().cloned().fold(f64::INFINITY, f64::min) - pad;
    let hi_s = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + pad;
    let (lo, hi) = match prior {
        PriorSpec::Gaussian(g) => {
            let m = g.mean()[component];
            let sd = g.covariance()[(component, component)].sqrt();
            ((m - 8.0 * sd).min(lo_s), (m + 8.0 * sd).max(hi_s))
        }
        PriorSpec::Uniform(u) => {
            let (l, h) = (u.lower()[component], u.upper()[component]);
            let margin = 0.1 * (h - l);
            (l - margin, h + margin)
        }
    };
    linspace(lo, hi, n)
}

fn kde_bandwidth(cfg: &ExperimentConfig, mapping_gamma: f64) -> KdeBandwidth {
    match cfg.kde.bandwidth {
        KdeBandwidthConfig::Mapping => KdeBandwidth::Fixed(mapping_gamma),
        KdeBandwidthConfig::Silverman => KdeBandwidth::Silverman,
        KdeBandwidthConfig::Fixed(h) => KdeBandwidth::Fixed(h),
    }
}

fn static_observation(cfg: &ExperimentConfig, model: &steinflow_core::ObservationModel) -> Result<DVector<f64>> {
    if let Some(y) = &cfg.observation {
        return Ok(DVector::from_column_slice(y));
    }
    let chol = Cholesky::new(model.noise_cov().clone()).context("observation covariance is not positive definite")?;
    let mut rng = stream(cfg.seeds.truth, &[tag::OBSERVATION]);
    let z = DVector::from_fn(model.obs_dim(), |_, _| StandardNormal.sample(&mut rng));
    Ok(model.apply_operator(&cfg.truth)? + chol.l() * z)
}

fn write_gradients(
    dir: &Path,
    cfg: &ExperimentConfig,
    ensemble: &Ensemble,
    model: &steinflow_core::ObservationModel,
    y: &DVector<f64>,
) -> Result<()> {
    let evals = EnsembleEvaluations::evaluate(ensemble, model)?;
    let policy = cfg.mapping.obs_kernel.unwrap_or(cfg.mapping.kernel);
    let gram = Gram::new(ensemble, &policy.resolve(ensemble)?);
    let (dim, obs_dim) = (ensemble.dim(), model.obs_dim());

    let mut header = vec!["particle_id".to_string()];
    header.extend(state_headers("x", dim));
    let mut per_backend = Vec::new();
    for b in GradientBackend::ALL {
        for r in 0..obs_dim {
            for c in 0..dim {
                header.push(format!("dh_{}_{r}_{c}", b.name()));
            }
        }
        header.extend(state_headers(&format!("dll_{}", b.name()), dim));
        per_backend.push(operator_gradients(
            &model.with_backend(b),
            &evals,
            Some(&gram),
            cfg.mapping.pinv_rtol,
        )?);
    }

    let mut w = csv_writer(dir, "gradients.csv")?;
    w.write_record(&header)?;
    for (j, p) in ensemble.particles().enumerate() {
        let mut row = vec![j.to_string()];
        row.extend(p.iter().map(|v| num(*v)));
        for grads in &per_backend {
            let gh = &grads[j];
            for r in 0..obs_dim {
                for c in 0..dim {
                    row.push(num(gh[(r, c)]));
                }
            }
            let dll = model.grad_log_likelihood(gh, p, y)?;
            row.extend(dll.iter().map(|v| num(*v)));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Maps a prior sample to the posterior of a single observation.
pub fn run_static(cfg: &ExperimentConfig) -> Result<StaticSummary> {
    if cfg.experiment != ExperimentKind::Static {
        bail!("run_static needs a static experiment configuration");
    }
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;

    let prior = cfg.prior_spec()?;
    let model = cfg.observation_model()?;
    let backend = model.backend();
    let y = static_observation(cfg, &model)?;
    let start = prior.sample(cfg.n_particles, &mut stream(cfg.seeds.filter, &[tag::INITIAL]))?;
    let dim = start.dim();

    write_gradients(dir, cfg, &start, &model, &y)?;

    let bounds = match &prior {
        PriorSpec::Uniform(u) => Some((u.lower().clone(), u.upper().clone())),
        PriorSpec::Gaussian(_) => None,
    };
    let mut traj = csv_writer(dir, "trajectories.csv")?;
    let mut header = vec!["iteration".to_string(), "particle_id".to_string()];
    header.extend(state_headers("x", dim));
    traj.write_record(&header)?;
    let mut write_err: Option<csv::Error> = None;
    let mut violations = 0usize;
    let (posterior, diag) = map_to_posterior_observed(&start, &prior, &model, &y, &cfg.mapping, &mut |it, e| {
        for (j, p) in e.particles().enumerate() {
            if let Some((lo, hi)) = &bounds {
                violations += p
                    .iter()
                    .enumerate()
                    .filter(|(i, v)| !(lo[*i] <= **v && **v <= hi[*i]))
                    .count();
            }
            if write_err.is_some() {
                continue;
            }
            let mut row = vec![it.to_string(), j.to_string()];
            row.extend(p.iter().map(|v| num(*v)));
            if let Err(e) = traj.write_record(&row) {
                write_err = Some(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    traj.flush()?;

    let mean = posterior.mean();
    let mut marginals = Vec::with_capacity(dim);
    let mut positive_fraction = Vec::with_capacity(dim);
    let mut posterior_variance = Vec::with_capacity(dim);
    let mut analytic_modes = None;
    let mut analytic_integral = None;
    let mut kde_w = csv_writer(dir, "posterior_kde.csv")?;
    kde_w.write_record(["component", "grid", "kde", "analytic"])?;
    for k in 0..dim {
        let xs = posterior.component(k);
        let bw = kde_bandwidth(cfg, diag.gamma);
        let h = match bw {
            KdeBandwidth::Fixed(h) => h,
            KdeBandwidth::Silverman => silverman_bandwidth(&xs)?,
        };
        let grid = static_grid(&prior, k, &xs, 4.0 * h, cfg.kde.grid_points);
        let est = match &bounds {
            Some((lo, hi)) => kde_1d_bounded(&xs, &grid, KdeBandwidth::Fixed(h), lo[k], hi[k])?,
            None => kde_1d(&xs, &grid, KdeBandwidth::Fixed(h))?,
        };
        let analytic = if dim == 1 {
            let a = analytic_posterior(&prior, &model, &y, &grid)?;
            analytic_integral = Some(trapezoid(&grid, &a));
            analytic_modes = Some(count_modes(
                &DensityEstimate {
                    grid: grid.clone(),
                    density: a.clone(),
                    bandwidth: h,
                },
                cfg.kde.prominence,
            ));
            Some(a)
        } else {
            None
        };
        for (i, g) in grid.iter().enumerate() {
            let a = analytic.as_ref().map(|a| num(a[i])).unwrap_or_default();
            kde_w.write_record([k.to_string(), num(*g), num(est.density[i]), a])?;
        }
        marginals.push(MarginalSummary {
            component: k,
            bandwidth: h,
            modes: count_modes(&est, cfg.kde.prominence),
        });
        positive_fraction.push(xs.iter().filter(|v| **v > 0.0).count() as f64 / xs.len() as f64);
        let m = mean[k];
        posterior_variance.push(xs.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (xs.len() as f64 - 1.0));
    }
    kde_w.flush()?;

    let summary = StaticSummary {
        schema_version: SCHEMA_VERSION,
        experiment: "static",
        backend: backend.name(),
        n_particles: cfg.n_particles,
        truth: cfg.truth.clone(),
        observation: y.iter().cloned().collect(),
        mapping: diag,
        posterior_mean: mean.iter().cloned().collect(),
        posterior_variance,
        positive_fraction,
        marginals,
        analytic_modes,
        analytic_integral,
        support_violations: violations,
    };
    write_json(dir, "summary.json", &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Serialize)]
pub struct CycleMarginals {
    pub cycle: usize,
    pub truth: Vec<f64>,
    pub post_transition: bool,
    pub marginals: Vec<MarginalSummary>,
}

#[derive(Debug, Clone, Serialize)]
pub struct L63Summary {
    pub schema_version: u32,
    pub experiment: &'static str,
    pub filter: String,
    pub n_particles: usize,
    pub n_cycles: usize,
    pub mean_rmse: f64,
    pub converged_fraction: Option<f64>,
    pub median_iterations: Option<f64>,
    /// First cycle whose truth `x` has the opposite sign to the initial truth.
    pub first_transition_cycle: Option<usize>,
    pub flagged_cycle: Option<usize>,
    pub kde: Vec<CycleMarginals>,
}

pub fn first_transition(truth: &Truth, initial: &[f64]) -> Option<usize> {
    let s0 = initial[0].signum();
    truth.states.iter().position(|s| s[0].signum() != s0).map(|i| i + 1)
}

/// Last cycle after the first wing change whose truth `|x|` is at least
/// `min_abs_x`, so the two mirror-image modes are well separated.
pub fn flagged_cycle(truth: &Truth, initial: &[f64], min_abs_x: f64) -> Option<usize> {
    let first = first_transition(truth, initial)?;
    (first..=truth.states.len())
        .rev()
        .find(|&c| truth.states[c - 1][0].abs() >= min_abs_x)
}

fn median(mut v: Vec<f64>) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

fn filter_name(cfg: &ExperimentConfig) -> String {
    match cfg.backend() {
        Some(b) => format!("vmpf_{}", b.name()),
        None => "sir".into(),
    }
}

pub fn sequential_experiment(cfg: &ExperimentConfig) -> Result<SequentialExperiment> {
    Ok(SequentialExperiment {
        dynamics: cfg.dynamics,
        obs_model: cfg.observation_model()?,
        n_cycles: cfg.n_cycles,
        n_particles: cfg.n_particles,
        initial_prior: cfg.prior_spec()?,
        truth_initial: DVector::from_column_slice(&cfg.truth),
        truth_seed: cfg.seeds.truth,
        filter_seed: cfg.seeds.filter,
        mapping: cfg.mapping,
        forecast_prior: cfg.forecast_prior,
        snapshot_every: 0,
    })
}

/// Runs the configured filter on the Lorenz-63 twin experiment.
pub fn run_l63(cfg: &ExperimentConfig) -> Result<L63Summary> {
    if cfg.experiment != ExperimentKind::Lorenz63 {
        bail!("run_l63 needs a lorenz63 experiment configuration");
    }
    cfg.validate()?;
    let dir = cfg.output_dir.as_path();
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))?;

    let exp = sequential_experiment(cfg)?;
    let truth = simulate_truth(&exp)?;
    let first = first_transition(&truth, &cfg.truth);
    let flagged = flagged_cycle(&truth, &cfg.truth, cfg.flag_min_abs_x);
    let mut kde_cycles: Vec<usize> = cfg
        .kde_cycles
        .iter()
        .cloned()
        .chain(flagged)
        .chain([cfg.n_cycles])
        .collect();
    kde_cycles.sort_unstable();
    kde_cycles.dedup();

    let dim = 3;
    let mut traj = csv_writer(dir, "trajectories.csv")?;
    let mut header = vec!["cycle".to_string(), "particle_id".to_string()];
    header.extend(state_headers("x", dim));
    traj.write_record(&header)?;
    let keep = cfg.snapshot_particles.min(cfg.n_particles);
    let write_snapshot = |w: &mut csv::Writer<BufWriter<File>>, cycle: usize, e: &Ensemble| -> csv::Result<()> {
        for (j, p) in e.particles().take(keep).enumerate() {
            let mut row = vec![cycle.to_string(), j.to_string()];
            row.extend(p.iter().map(|v| num(*v)));
            w.write_record(&row)?;
        }
        Ok(())
    };
    if cfg.snapshot_every > 0 {
        write_snapshot(&mut traj, 0, &initial_ensemble(&exp)?)?;
    }
    let mut write_err = None;
    let mut kept: Vec<(usize, Ensemble)> = Vec::new();
    let records = run_sequential_observed(&exp, cfg.filter.into(), &mut |cycle, e| {
        if cfg.snapshot_every > 0 && cycle % cfg.snapshot_every == 0 && write_err.is_none() {
            if let Err(err) = write_snapshot(&mut traj, cycle, e) {
                write_err = Some(err);
            }
        }
        if kde_cycles.binary_search(&cycle).is_ok() {
            kept.push((cycle, e.clone()));
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    traj.flush()?;

    let mut cw = csv_writer(dir, "cycles.csv")?;
    let mut header = vec!["cycle".to_string()];
    header.extend(state_headers("truth", dim));
    header.extend(state_headers("obs", records.truth.observations[0].len()));
    header.extend(state_headers("mean", dim));
    header.extend(["rmse", "spread", "iterations", "converged"].map(String::from));
    cw.write_record(&header)?;
    for rec in &records.cycles {
        let c = rec.cycle;
        let mut row = vec![c.to_string()];
        row.extend(records.truth.states[c - 1].iter().map(|v| num(*v)));
        row.extend(records.truth.observations[c - 1].iter().map(|v| num(*v)));
        row.extend(rec.mean.iter().map(|v| num(*v)));
        row.push(num(rec.rmse));
        row.push(num(rec.spread));
        match &rec.mapping {
            Some(d) => {
                row.push(d.iterations_run.to_string());
                row.push(d.converged.to_string());
            }
            None => row.extend([String::new(), String::new()]),
        }
        cw.write_record(&row)?;
    }
    cw.flush()?;

    let mut kw = csv_writer(dir, "posterior_kde.csv")?;
    kw.write_record(["cycle", "component", "grid", "kde"])?;
    let mut kde = Vec::with_capacity(kept.len());
    for (cycle, e) in &kept {
        let mut marginals = Vec::with_capacity(dim);
        for k in 0..dim {
            let xs = e.component(k);
            let h = match cfg.kde.bandwidth {
                KdeBandwidthConfig::Fixed(h) => h,
                KdeBandwidthConfig::Silverman => silverman_bandwidth(&xs)?,
                KdeBandwidthConfig::Mapping => match cfg.mapping.kernel {
                    steinflow_core::BandwidthPolicy::Fixed { gamma } => gamma,
                    policy => policy.resolve(e)?.gamma(),
                },
            };
            let lo = xs.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * h;
            let hi = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
            let grid = linspace(lo, hi, cfg.kde.grid_points);
            let est = kde_1d(&xs, &grid, KdeBandwidth::Fixed(h))?;
            for (g, d) in grid.iter().zip(&est.density) {
                kw.write_record([cycle.to_string(), k.to_string(), num(*g), num(*d)])?;
            }
            marginals.push(MarginalSummary {
                component: k,
                bandwidth: h,
                modes: count_modes(&est, cfg.kde.prominence),
            });
        }
        kde.push(CycleMarginals {
            cycle: *cycle,
            truth: records.truth.states[cycle - 1].iter().cloned().collect(),
            post_transition: first.is_some_and(|f| *cycle >= f),
            marginals,
        });
    }
    kw.flush()?;

    let iterations: Vec<f64> = records
        .cycles
        .iter()
        .filter_map(|c| c.mapping.as_ref().map(|d| d.iterations_run as f64))
        .collect();
    let summary = L63Summary {
        schema_version: SCHEMA_VERSION,
        experiment: "lorenz63",
        filter: filter_name(cfg),
        n_particles: cfg.n_particles,
        n_cycles: cfg.n_cycles,
        mean_rmse: records.cycles.iter().map(|c| c.rmse).sum::<f64>() / records.cycles.len() as f64,
        converged_fraction: records.converged_fraction(),
        median_iterations: median(iterations),
        first_transition_cycle: first,
        flagged_cycle: flagged,
        kde,
    };
    write_json(dir, "summary.json", &summary)?;
    Ok(summary)
}

/// Dispatches on the configured experiment kind.
pub fn run(cfg: &ExperimentConfig) -> Result<()> {
    match cfg.experiment {
        ExperimentKind::Static => run_static(cfg).map(|_| ()),
        ExperimentKind::Lorenz63 => run_l63(cfg).map(|_| ()),
    }
}
