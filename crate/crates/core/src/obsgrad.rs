//! Adjoint-free estimates of the observation-operator Jacobian built only
//! from operator evaluations at the particles.
//!
//! * kernel embedding: `grad H(x) ~ 1/N sum_j H(x^j) (x) grad_x K(x, x^j)`,
//!   optionally from the normalized (Nadaraya-Watson) embedding;
//! * ensemble space: `H ~ Y X^+`, one matrix shared by every particle.

use nalgebra::{DMatrix, DVector};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, Error, Result};
use crate::kernel::{Gram, KernelConfig};
use crate::models::{GradientBackend, ObservationModel};

/// Default relative singular-value cutoff for the ensemble pseudoinverse.
pub const DEFAULT_PINV_RTOL: f64 = 1e-10;

/// Particle states together with the operator evaluated at each of them.
#[derive(Debug, Clone)]
pub struct EnsembleEvaluations {
    ensemble: Ensemble,
    obs: DMatrix<f64>,
}

impl EnsembleEvaluations {
    /// `obs` is `obs_dim × n_particles`, column `j` holding `H(x^j)`.
    pub fn new(ensemble: Ensemble, obs: DMatrix<f64>) -> Result<Self> {
        check_dim(ensemble.n_particles(), obs.ncols())?;
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("operator evaluation".into()));
        }
        Ok(Self { ensemble, obs })
    }

    /// Evaluates `model`'s operator once per particle.
    pub fn evaluate(ensemble: &Ensemble, model: &ObservationModel) -> Result<Self> {
        let mut obs = DMatrix::zeros(model.obs_dim(), ensemble.n_particles());
        for (j, p) in ensemble.particles().enumerate() {
            obs.set_column(j, &model.apply_operator(p)?);
        }
        Self::new(ensemble.clone(), obs)
    }

    pub fn ensemble(&self) -> &Ensemble {
        &self.ensemble
    }

    pub fn obs(&self) -> &DMatrix<f64> {
        &self.obs
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.nrows()
    }

    fn obs_at(&self, j: usize) -> &[f64] {
        let d = self.obs_dim();
        &self.obs.as_slice()[j * d..(j + 1) * d]
    }
}

/// Accumulates `out += w * a (x) b` for an `a.len() × b.len()` matrix.
#[inline]
fn add_outer(out: &mut DMatrix<f64>, w: f64, a: &[f64], b: &[f64]) {
    for (c, bc) in b.iter().enumerate() {
        for (r, ar) in a.iter().enumerate() {
            out[(r, c)] += w * ar * bc;
        }
    }
}

/// Unnormalized kernel-embedding estimate of `grad H` at `x`.
pub fn rkhs_grad_h(evals: &EnsembleEvaluations, x: &[f64], cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    let e = evals.ensemble();
    check_dim(e.dim(), x.len())?;
    let n = e.n_particles();
    let g2 = cfg.gamma() * cfg.gamma();
    let mut grad = vec![0.0; x.len()];
    let mut out = DMatrix::zeros(evals.obs_dim(), x.len());
    for j in 0..n {
        let xj = e.particle(j);
        let k = cfg.eval_slices(x, xj);
        for (g, (a, b)) in grad.iter_mut().zip(x.iter().zip(xj)) {
            *g = -(a - b) / g2 * k;
        }
        add_outer(&mut out, 1.0, evals.obs_at(j), &grad);
    }
    Ok(out / n as f64)
}

/// Gradient of the normalized embedding
/// `H(x) ~ sum_j H(x^j) K(x, x^j) / sum_l K(x, x^l)`, by the quotient rule.
pub fn rkhs_grad_h_normalized(evals: &EnsembleEvaluations, x: &[f64], cfg: &KernelConfig) -> Result<DMatrix<f64>> {
    let e = evals.ensemble();
    check_dim(e.dim(), x.len())?;
    let g2 = cfg.gamma() * cfg.gamma();
    let mut acc = NormalizedAccumulator::new(evals.obs_dim(), x.len());
    let mut grad = vec![0.0; x.len()];
    for j in 0..e.n_particles() {
        let xj = e.particle(j);
        let k = cfg.eval_slices(x, xj);
        for (g, (a, b)) in grad.iter_mut().zip(x.iter().zip(xj)) {
            *g = -(a - b) / g2 * k;
        }
        acc.push(evals.obs_at(j), k, &grad);
    }
    acc.finish()
}

struct NormalizedAccumulator {
    weighted_grad: DMatrix<f64>,
    weighted_obs: Vec<f64>,
    k_sum: f64,
    grad_sum: Vec<f64>,
}

impl NormalizedAccumulator {
    fn new(obs_dim: usize, dim: usize) -> Self {
        Self {
            weighted_grad: DMatrix::zeros(obs_dim, dim),
            weighted_obs: vec![0.0; obs_dim],
            k_sum: 0.0,
            grad_sum: vec![0.0; dim],
        }
    }

    fn push(&mut self, h: &[f64], k: f64, grad: &[f64]) {
        add_outer(&mut self.weighted_grad, 1.0, h, grad);
        for (w, v) in self.weighted_obs.iter_mut().zip(h) {
            *w += v * k;
        }
        self.k_sum += k;
        for (s, g) in self.grad_sum.iter_mut().zip(grad) {
            *s += g;
        }
    }

    fn finish(mut self) -> Result<DMatrix<f64>> {
        let s = self.k_sum;
        if !(s > 0.0) {
            return Err(Error::DegenerateEnsemble(
                "kernel weights underflow to zero at the query point".into(),
            ));
        }
        self.weighted_grad /= s;
        add_outer(
            &mut self.weighted_grad,
            -1.0 / (s * s),
            &self.weighted_obs,
            &self.grad_sum,
        );
        Ok(self.weighted_grad)
    }
}

/// Kernel-embedding Jacobian estimates at every particle, reusing a Gram
/// built on the same ensemble.
pub fn rkhs_grads_at_particles(
    evals: &EnsembleEvaluations,
    gram: &Gram,
    normalized: bool,
) -> Result<Vec<DMatrix<f64>>> {
    let e = evals.ensemble();
    check_dim(e.n_particles(), gram.n())?;
    check_dim(e.dim(), gram.dim())?;
    let n = gram.n();
    (0..n)
        .map(|l| {
            if normalized {
                let mut acc = NormalizedAccumulator::new(evals.obs_dim(), e.dim());
                for j in 0..n {
                    acc.push(evals.obs_at(j), gram.value(l, j), gram.grad(l, j));
                }
                acc.finish()
            } else {
                let mut out = DMatrix::zeros(evals.obs_dim(), e.dim());
                for j in 0..n {
                    add_outer(&mut out, 1.0, evals.obs_at(j), gram.grad(l, j));
                }
                Ok(out / n as f64)
            }
        })
        .collect()
}

/// State and observation perturbation matrices (member minus mean, scaled
/// by `1/sqrt(N - 1)`), shaped `dim × N` and `obs_dim × N`.
pub fn perturbation_matrices(evals: &EnsembleEvaluations) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let e = evals.ensemble();
    let n = e.n_particles();
    if n < 2 {
        return Err(Error::TooFewParticles { required: 2, found: n });
    }
    let scale = 1.0 / ((n - 1) as f64).sqrt();
    let center = |m: &DMatrix<f64>| {
        let mean: DVector<f64> = m.column_sum() / m.ncols() as f64;
        let mut out = m.clone();
        for mut col in out.column_iter_mut() {
            col -= &mean;
            col *= scale;
        }
        out
    };
    Ok((center(e.states()), center(evals.obs())))
}

/// Ensemble-space tangent-linear operator `Y X^+`, with the pseudoinverse
/// truncated at `pinv_rtol` times the largest singular value of `X`.
pub fn ensemble_tangent(evals: &EnsembleEvaluations, pinv_rtol: f64) -> Result<DMatrix<f64>> {
    let (x, y) = perturbation_matrices(evals)?;
    let svd = x.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let scale = evals.ensemble().states().amax().max(1.0);
    if !(smax > 1e-12 * scale) {
        return Err(Error::DegenerateEnsemble(
            "state perturbations have no singular value above tolerance".into(),
        ));
    }
    let cutoff = pinv_rtol * smax;
    let u = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    // X^+ = V S^+ U^T
    let mut pinv = DMatrix::zeros(x.ncols(), x.nrows());
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            pinv += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    Ok(y * pinv)
}

/// Per-particle Jacobian estimates for the model's configured backend.
///
/// `obs_gram` must be built on `evals.ensemble()` with the observation
/// kernel; it is only read by the kernel-embedding backends.
pub fn operator_gradients(
    model: &ObservationModel,
    evals: &EnsembleEvaluations,
    obs_gram: Option<&Gram>,
    pinv_rtol: f64,
) -> Result<Vec<DMatrix<f64>>> {
    let e = evals.ensemble();
    match model.backend() {
        GradientBackend::Exact => e.particles().map(|p| model.exact_grad_operator(p)).collect(),
        GradientBackend::Rkhs | GradientBackend::RkhsNormalized => {
            let gram = obs_gram.ok_or_else(|| Error::InvalidParameter {
                name: "obs_gram",
                reason: "kernel backends need a Gram matrix".into(),
            })?;
            rkhs_grads_at_particles(evals, gram, model.backend() == GradientBackend::RkhsNormalized)
        }
        GradientBackend::EnsembleSpace => {
            let tangent = ensemble_tangent(evals, pinv_rtol)?;
            Ok(vec![tangent; e.n_particles()])
        }
    }
}
