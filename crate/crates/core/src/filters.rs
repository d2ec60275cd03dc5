//! Sequential drivers: the variational mapping particle filter (VMPF) and
//! the bootstrap SIR particle filter used as a baseline.

use log::warn;
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diagnostics::{ensemble_stats, rmse};
use crate::dynamics::{Lorenz63Config, Transition};
use crate::ensemble::Ensemble;
use crate::error::{check_dim, invalid, Error, Result};
use crate::kernel::covariance_trace;
use crate::mapping::{map_to_posterior, MappingConfig, MappingDiagnostics};
use crate::models::{GradientBackend, LogPrior, ObservationModel, PriorSpec};
use crate::rng::{stream, tag};

/// Ridge added to the fitted forecast covariance.
pub const FORECAST_COV_RIDGE: f64 = 1e-6;

/// How the VMPF represents the forecast density when it needs
/// `grad log p(x)` of a propagated sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastPrior {
    /// Gaussian fitted to the forecast ensemble.
    #[default]
    Gaussian,
    /// Equal-weight Gaussian mixture centred on the forecast particles,
    /// using the flow-kernel bandwidth.
    KernelMixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Filter {
    Vmpf(GradientBackend),
    Sir,
}

#[derive(Debug, Clone)]
pub struct SequentialExperiment<D: Transition = Lorenz63Config> {
    pub dynamics: D,
    pub obs_model: ObservationModel,
    pub n_cycles: usize,
    pub n_particles: usize,
    pub initial_prior: PriorSpec,
    pub truth_initial: DVector<f64>,
    pub truth_seed: u64,
    pub filter_seed: u64,
    pub mapping: MappingConfig,
    pub forecast_prior: ForecastPrior,
    /// Keep every `snapshot_every`-th posterior ensemble; 0 keeps none.
    pub snapshot_every: usize,
}

impl<D: Transition> SequentialExperiment<D> {
    pub fn validate(&self) -> Result<()> {
        if self.n_cycles == 0 {
            return Err(invalid("n_cycles", "must be at least 1"));
        }
        if self.n_particles < 2 {
            return Err(invalid("n_particles", "must be at least 2"));
        }
        check_dim(self.dynamics.dim(), self.truth_initial.len())?;
        check_dim(self.dynamics.dim(), self.initial_prior.dim())?;
        self.mapping.validate()
    }
}

/// A Gaussian mixture with one isotropic component per forecast particle.
#[derive(Debug, Clone)]
pub struct KernelMixturePrior {
    centers: Ensemble,
    bandwidth: f64,
}

impl KernelMixturePrior {
    pub fn new(centers: Ensemble, bandwidth: f64) -> Result<Self> {
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(invalid("bandwidth", format!("must be positive, got {bandwidth}")));
        }
        Ok(Self { centers, bandwidth })
    }
}

impl LogPrior for KernelMixturePrior {
    fn dim(&self) -> usize {
        self.centers.dim()
    }

    fn grad_log_prior(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        let h2 = self.bandwidth * self.bandwidth;
        let log_w: Vec<f64> = self
            .centers
            .particles()
            .map(|c| -crate::kernel::sq_dist(x, c) / (2.0 * h2))
            .collect();
        let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut grad = DVector::zeros(x.len());
        for (c, lw) in self.centers.particles().zip(&log_w) {
            let w = (lw - top).exp();
            total += w;
            for (g, (ci, xi)) in grad.iter_mut().zip(c.iter().zip(x)) {
                *g += w * (ci - xi) / h2;
            }
        }
        Ok(grad / total)
    }
}

/// Gaussian fitted to an ensemble, with a small ridge on the covariance.
pub fn fit_gaussian(ensemble: &Ensemble) -> Result<PriorSpec> {
    let stats = ensemble_stats(ensemble)?;
    let dim = ensemble.dim();
    PriorSpec::gaussian(
        stats.mean,
        stats.covariance + DMatrix::identity(dim, dim) * FORECAST_COV_RIDGE,
    )
}

/// Hidden trajectory and its noisy observations, cycles `1..=n_cycles`.
#[derive(Debug, Clone, PartialEq)]
pub struct Truth {
    pub states: Vec<DVector<f64>>,
    pub observations: Vec<DVector<f64>>,
}

pub fn simulate_truth<D: Transition>(exp: &SequentialExperiment<D>) -> Result<Truth> {
    exp.validate()?;
    let model = &exp.obs_model;
    let noise_chol = nalgebra::Cholesky::new(model.noise_cov().clone())
        .ok_or_else(|| invalid("R", "matrix must be positive definite"))?;
    let mut state = exp.truth_initial.clone();
    let mut states = Vec::with_capacity(exp.n_cycles);
    let mut observations = Vec::with_capacity(exp.n_cycles);
    for cycle in 1..=exp.n_cycles as u64 {
        state = exp
            .dynamics
            .propagate(state.as_slice(), &mut stream(exp.truth_seed, &[tag::TRUTH, cycle]))?;
        let mut rng = stream(exp.truth_seed, &[tag::OBSERVATION, cycle]);
        let z = DVector::from_fn(model.obs_dim(), |_, _| StandardNormal.sample(&mut rng));
        observations.push(model.apply_operator(state.as_slice())? + noise_chol.l() * z);
        states.push(state.clone());
    }
    Ok(Truth { states, observations })
}

pub fn initial_ensemble<D: Transition>(exp: &SequentialExperiment<D>) -> Result<Ensemble> {
    exp.initial_prior
        .sample(exp.n_particles, &mut stream(exp.filter_seed, &[tag::INITIAL]))
}

/// Propagates every particle with its own `(seed, cycle, particle)` stream.
pub fn forecast<D: Transition>(ensemble: &Ensemble, dynamics: &D, seed: u64, cycle: usize) -> Result<Ensemble> {
    let columns: Vec<DVector<f64>> = (0..ensemble.n_particles())
        .into_par_iter()
        .map(|j| {
            let mut rng = stream(seed, &[tag::FORECAST, cycle as u64, j as u64]);
            dynamics.propagate(ensemble.particle(j), &mut rng)
        })
        .collect::<Result<_>>()?;
    Ensemble::from_particles(&columns)
}

/// One VMPF assimilation cycle: forecast, then map the forecast sample to
/// the posterior given `y`. Without an observation the forecast is returned.
pub fn vmpf_cycle<D: Transition>(
    ensemble: &Ensemble,
    y: Option<&DVector<f64>>,
    exp: &SequentialExperiment<D>,
    cycle: usize,
) -> Result<(Ensemble, Option<MappingDiagnostics>)> {
    let fc = forecast(ensemble, &exp.dynamics, exp.filter_seed, cycle)?;
    let Some(y) = y else {
        return Ok((fc, None));
    };
    let (post, diag) = match exp.forecast_prior {
        ForecastPrior::Gaussian => {
            let prior = fit_gaussian(&fc)?;
            map_to_posterior(&fc, &prior, &exp.obs_model, y, &exp.mapping)?
        }
        ForecastPrior::KernelMixture => {
            let h = exp.mapping.kernel.resolve(&fc)?.gamma();
            let prior = KernelMixturePrior::new(fc.clone(), h)?;
            map_to_posterior(&fc, &prior, &exp.obs_model, y, &exp.mapping)?
        }
    };
    Ok((post, Some(diag)))
}

/// Systematic resampling with offset `u0 ∈ [0, 1)`. `weights` need not be
/// normalized. Returns the parent index of each offspring.
pub fn systematic_resample(weights: &[f64], u0: f64) -> Vec<usize> {
    let n = weights.len();
    let total: f64 = weights.iter().sum();
    let scale = n as f64 / total;
    let mut out = Vec::with_capacity(n);
    let mut j = 0;
    let mut upper = weights[0] * scale;
    for k in 0..n {
        let pos = k as f64 + u0;
        while pos >= upper && j + 1 < n {
            j += 1;
            upper += weights[j] * scale;
        }
        out.push(j);
    }
    out
}

/// Likelihood weights relative to the best particle, falling back to
/// uniform weights if they all underflow.
pub fn likelihood_weights(ensemble: &Ensemble, model: &ObservationModel, y: &DVector<f64>) -> Result<Vec<f64>> {
    let log_w: Vec<f64> = ensemble
        .particles()
        .map(|p| model.log_likelihood(p, y))
        .collect::<Result<_>>()?;
    let top = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = log_w.iter().map(|lw| (lw - top).exp()).collect();
    let total: f64 = w.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        warn!("all SIR weights vanished; falling back to uniform weights");
        return Ok(vec![1.0; w.len()]);
    }
    Ok(w)
}

/// One bootstrap SIR cycle: forecast, weight by the likelihood, resample.
pub fn sir_cycle<D: Transition>(
    ensemble: &Ensemble,
    y: Option<&DVector<f64>>,
    exp: &SequentialExperiment<D>,
    cycle: usize,
) -> Result<Ensemble> {
    let fc = forecast(ensemble, &exp.dynamics, exp.filter_seed, cycle)?;
    let Some(y) = y else {
        return Ok(fc);
    };
    let w = likelihood_weights(&fc, &exp.obs_model, y)?;
    let u0: f64 = stream(exp.filter_seed, &[tag::RESAMPLE, cycle as u64]).random();
    let parents = systematic_resample(&w, u0);
    let states = DMatrix::from_fn(fc.dim(), parents.len(), |i, k| fc.particle(parents[k])[i]);
    Ensemble::from_columns(states)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CycleRecord {
    pub cycle: usize,
    pub mean: Vec<f64>,
    pub rmse: f64,
    pub spread: f64,
    pub mapping: Option<MappingDiagnostics>,
}

#[derive(Debug, Clone)]
pub struct CycleRecords {
    pub truth: Truth,
    pub cycles: Vec<CycleRecord>,
    /// Thinned posterior ensembles as `(cycle, ensemble)`.
    pub snapshots: Vec<(usize, Ensemble)>,
}

impl CycleRecords {
    pub fn converged_fraction(&self) -> Option<f64> {
        let diags: Vec<_> = self.cycles.iter().filter_map(|c| c.mapping.as_ref()).collect();
        if diags.is_empty() {
            return None;
        }
        Some(diags.iter().filter(|d| d.converged).count() as f64 / diags.len() as f64)
    }
}

pub fn run_sequential<D: Transition + Clone>(exp: &SequentialExperiment<D>, filter: Filter) -> Result<CycleRecords> {
    run_sequential_observed(exp, filter, &mut |_, _| {})
}

/// As [`run_sequential`], calling `observer(cycle, posterior)` after every cycle.
pub fn run_sequential_observed<D: Transition + Clone>(
    exp: &SequentialExperiment<D>,
    filter: Filter,
    observer: &mut dyn FnMut(usize, &Ensemble),
) -> Result<CycleRecords> {
    exp.validate()?;
    let truth = simulate_truth(exp)?;
    let exp = match filter {
        Filter::Vmpf(backend) => SequentialExperiment {
            obs_model: exp.obs_model.with_backend(backend),
            ..exp.clone()
        },
        Filter::Sir => exp.clone(),
    };
    let mut ensemble = initial_ensemble(&exp)?;
    let mut cycles = Vec::with_capacity(exp.n_cycles);
    let mut snapshots = Vec::new();
    for cycle in 1..=exp.n_cycles {
        let y = &truth.observations[cycle - 1];
        let mapping = match filter {
            Filter::Vmpf(_) => {
                let (post, diag) = vmpf_cycle(&ensemble, Some(y), &exp, cycle)?;
                ensemble = post;
                diag
            }
            Filter::Sir => {
                ensemble = sir_cycle(&ensemble, Some(y), &exp, cycle)?;
                None
            }
        };
        let mean = ensemble.mean();
        let spread = (covariance_trace(&ensemble) / ensemble.dim() as f64).sqrt();
        cycles.push(CycleRecord {
            cycle,
            rmse: rmse(&mean, truth.states[cycle - 1].as_slice())?,
            mean: mean.iter().cloned().collect(),
            spread,
            mapping,
        });
        if exp.snapshot_every > 0 && cycle % exp.snapshot_every == 0 {
            snapshots.push((cycle, ensemble.clone()));
        }
        observer(cycle, &ensemble);
    }
    if let Some(bad) = cycles.iter().find(|c| !c.rmse.is_finite()) {
        return Err(Error::NonFinite(format!("ensemble mean at cycle {}", bad.cycle)));
    }
    Ok(CycleRecords {
        truth,
        cycles,
        snapshots,
    })
}
