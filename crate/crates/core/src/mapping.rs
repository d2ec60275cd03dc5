//! The variational mapping: particles follow the kernelized steepest
//! descent of the KL divergence to the posterior, integrated in pseudo-time
//! with ADAM.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

pub use crate::ensemble::Ensemble;
use crate::error::{check_dim, invalid, Error, Result};
use crate::kernel::{BandwidthPolicy, Gram, KernelConfig};
use crate::models::{GradientBackend, LogPrior, ObservationModel};
use crate::obsgrad::{operator_gradients, EnsembleEvaluations, DEFAULT_PINV_RTOL};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MappingConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Absolute threshold on the mean per-particle KL-gradient norm.
    pub grad_tol: f64,
    pub max_iters: usize,
    /// Bandwidth of the flow kernel, resolved once per mapping from the
    /// starting ensemble.
    pub kernel: BandwidthPolicy,
    /// Bandwidth of the observation-embedding kernel; `None` reuses `kernel`.
    pub obs_kernel: Option<BandwidthPolicy>,
    pub pinv_rtol: f64,
}

impl Default for MappingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.03,
            beta1: 0.9,
            beta2: 0.99,
            adam_epsilon: 1e-8,
            grad_tol: 1e-2,
            max_iters: 200,
            kernel: BandwidthPolicy::default(),
            obs_kernel: None,
            pinv_rtol: DEFAULT_PINV_RTOL,
        }
    }
}

impl MappingConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &'static str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(invalid(name, format!("must be positive, got {v}")))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("adam_epsilon", self.adam_epsilon)?;
        positive("grad_tol", self.grad_tol)?;
        positive("pinv_rtol", self.pinv_rtol)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(invalid(name, format!("must lie in [0, 1), got {b}")));
            }
        }
        if self.max_iters == 0 {
            return Err(invalid("max_iters", "must be at least 1"));
        }
        self.kernel.validate()?;
        if let Some(k) = &self.obs_kernel {
            k.validate()?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MappingDiagnostics {
    pub iterations_run: usize,
    pub grad_norm_history: Vec<f64>,
    pub converged: bool,
    /// Flow-kernel bandwidth used for this mapping.
    pub gamma: f64,
}

/// ADAM first/second moment accumulators and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub t: usize,
}

impl AdamState {
    pub fn zeros(nrows: usize, ncols: usize) -> Self {
        Self {
            m: DMatrix::zeros(nrows, ncols),
            v: DMatrix::zeros(nrows, ncols),
            t: 0,
        }
    }
}

/// One bias-corrected ADAM step descending `grads`. Returns the additive
/// update and the advanced accumulators.
pub fn adam_step(grads: &DMatrix<f64>, state: &AdamState, cfg: &MappingConfig) -> (DMatrix<f64>, AdamState) {
    let t = state.t + 1;
    let m = cfg.beta1 * &state.m + (1.0 - cfg.beta1) * grads;
    let v = cfg.beta2 * &state.v + (1.0 - cfg.beta2) * grads.component_mul(grads);
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    let update = m.zip_map(&v, |mi, vi| {
        -cfg.learning_rate * (mi / c1) / ((vi / c2).sqrt() + cfg.adam_epsilon)
    });
    (update, AdamState { m, v, t })
}

/// Monte Carlo KL gradient at every particle:
/// `-(1/N) sum_l [K(x^l, x) g_l + grad_{x^l} K(x^l, x)]`.
///
/// `log_post_grads` is `dim × N` with column `l` holding `grad log p(x^l | y)`.
/// The flow velocity is the negative of the result.
pub fn kl_gradient(ensemble: &Ensemble, log_post_grads: &DMatrix<f64>, cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    check_dim(ensemble.dim(), log_post_grads.nrows())?;
    check_dim(ensemble.n_particles(), log_post_grads.ncols())?;
    Ok(kl_gradient_with_gram(&Gram::new(ensemble, cfg), log_post_grads))
}

pub(crate) fn kl_gradient_with_gram(gram: &Gram, log_post_grads: &DMatrix<f64>) -> DMatrix<f64> {
    let n = gram.n();
    let dim = gram.dim();
    let mut out = DMatrix::zeros(dim, n);
    for i in 0..n {
        let mut col = out.column_mut(i);
        for l in 0..n {
            let k = gram.value(l, i);
            let rep = gram.grad(l, i);
            for d in 0..dim {
                col[d] += k * log_post_grads[(d, l)] + rep[d];
            }
        }
        col *= -1.0 / n as f64;
    }
    out
}

/// Folds `x` into `[lower, upper]` by mirror reflection at the walls,
/// repeating for overshoots wider than the domain.
pub fn reflect(x: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lower.iter().zip(upper))
        .map(|(&v, (&l, &u))| reflect_scalar(v, l, u))
        .collect()
}

fn reflect_scalar(v: f64, l: f64, u: f64) -> f64 {
    if (l..=u).contains(&v) {
        return v;
    }
    let w = u - l;
    let t = (v - l).rem_euclid(2.0 * w);
    let folded = if t > w { 2.0 * w - t } else { t };
    (l + folded).clamp(l, u)
}

fn mean_column_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.norm()).sum::<f64>() / m.ncols() as f64
}

/// Maps a prior sample to an approximate posterior sample.
pub fn map_to_posterior(
    ensemble: &Ensemble,
    prior: &dyn LogPrior,
    model: &ObservationModel,
    y: &DVector<f64>,
    cfg: &MappingConfig,
) -> Result<(Ensemble, MappingDiagnostics)> {
    map_to_posterior_observed(ensemble, prior, model, y, cfg, &mut |_, _| {})
}

/// As [`map_to_posterior`], calling `observer(iteration, ensemble)` with the
/// starting ensemble (iteration 0) and after every update.
pub fn map_to_posterior_observed(
    ensemble: &Ensemble,
    prior: &dyn LogPrior,
    model: &ObservationModel,
    y: &DVector<f64>,
    cfg: &MappingConfig,
    observer: &mut dyn FnMut(usize, &Ensemble),
) -> Result<(Ensemble, MappingDiagnostics)> {
    cfg.validate()?;
    check_dim(prior.dim(), ensemble.dim())?;
    check_dim(model.obs_dim(), y.len())?;
    ensemble.ensure_finite()?;
    if let Some((lower, upper)) = prior.bounds() {
        for p in ensemble.particles() {
            for (i, &v) in p.iter().enumerate() {
                if !(lower[i] <= v && v <= upper[i]) {
                    return Err(Error::OutsideSupport {
                        index: i,
                        value: v,
                        lower: lower[i],
                        upper: upper[i],
                    });
                }
            }
        }
    }

    // Every ensemble-wide sum runs over the particles in a value-determined
    // order, so relabelling the input cannot change a single bit of the output.
    let order = canonical_order(ensemble);
    let restore = |e: &Ensemble| match &order {
        Some(order) => {
            let mut states = DMatrix::zeros(e.dim(), e.n_particles());
            for (k, &j) in order.iter().enumerate() {
                states.set_column(j, &e.states().column(k));
            }
            Ensemble::from_columns(states)
        }
        None => Ok(e.clone()),
    };
    let mut current = match &order {
        Some(order) => Ensemble::from_columns(ensemble.states().select_columns(order.iter()))?,
        None => ensemble.clone(),
    };

    let kernel = cfg.kernel.resolve(&current)?;
    let obs_kernel = match (&cfg.obs_kernel, model.backend()) {
        (Some(policy), GradientBackend::Rkhs | GradientBackend::RkhsNormalized) => Some(policy.resolve(&current)?),
        _ => None,
    };

    let mut adam = AdamState::zeros(current.dim(), current.n_particles());
    let mut history = Vec::new();
    let mut converged = false;
    observer(0, ensemble);

    for iteration in 1..=cfg.max_iters {
        let evals = EnsembleEvaluations::evaluate(&current, model)?;
        let gram = Gram::new(&current, &kernel);
        let separate_obs_gram = obs_kernel.map(|k| Gram::new(&current, &k));
        let obs_gram = separate_obs_gram.as_ref().unwrap_or(&gram);
        let grads_h = operator_gradients(model, &evals, Some(obs_gram), cfg.pinv_rtol)?;

        let mut log_post = DMatrix::zeros(current.dim(), current.n_particles());
        for (l, p) in current.particles().enumerate() {
            let g = prior.grad_log_prior(p)? + model.grad_log_likelihood(&grads_h[l], p, y)?;
            log_post.set_column(l, &g);
        }

        let kl = kl_gradient_with_gram(&gram, &log_post);
        let norm = mean_column_norm(&kl);
        if !norm.is_finite() {
            return Err(Error::NonFinite(format!(
                "KL gradient at mapping iteration {iteration}"
            )));
        }
        history.push(norm);
        if norm < cfg.grad_tol {
            converged = true;
            break;
        }

        let (update, next) = adam_step(&kl, &adam, cfg);
        adam = next;
        let mut states = current.states() + update;
        if let Some((lower, upper)) = prior.bounds() {
            for mut col in states.column_iter_mut() {
                let folded = reflect(col.as_slice(), lower.as_slice(), upper.as_slice());
                col.copy_from_slice(&folded);
            }
        }
        current = Ensemble::from_columns(states)
            .map_err(|e| Error::NonFinite(format!("state after mapping iteration {iteration}: {e}")))?;
        if order.is_some() {
            observer(iteration, &restore(&current)?);
        } else {
            observer(iteration, &current);
        }
    }

    let diagnostics = MappingDiagnostics {
        iterations_run: history.len(),
        grad_norm_history: history,
        converged,
        gamma: kernel.gamma(),
    };
    Ok((restore(&current)?, diagnostics))
}

/// Lexicographic order of the particles, or `None` when already sorted.
fn canonical_order(ensemble: &Ensemble) -> Option<Vec<usize>> {
    let cmp = |a: usize, b: usize| {
        let (pa, pb) = (ensemble.particle(a), ensemble.particle(b));
        pa.iter()
            .zip(pb)
            .map(|(u, v)| u.total_cmp(v))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    };
    let n = ensemble.n_particles();
    if (1..n).all(|j| cmp(j - 1, j).is_le()) {
        return None;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| cmp(a, b));
    Some(order)
}
