//! Priors, observation operators and the analytic pieces of the
//! log-posterior gradient.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, invalid, Error, Result};

/// Anything that can supply `grad log p(x)` to the particle flow.
pub trait LogPrior {
    fn dim(&self) -> usize;

    fn grad_log_prior(&self, x: &[f64]) -> Result<DVector<f64>>;

    /// Box constraints enforced by wall reflection, if any.
    fn bounds(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        None
    }
}

#[derive(Debug, Clone)]
pub struct GaussianPrior {
    mean: DVector<f64>,
    covariance: DMatrix<f64>,
    precision: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

impl GaussianPrior {
    pub fn new(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        let n = mean.len();
        if n == 0 {
            return Err(invalid("mean", "empty mean vector"));
        }
        if covariance.nrows() != n || covariance.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: covariance.nrows().max(covariance.ncols()),
            });
        }
        if mean.iter().chain(covariance.iter()).any(|v| !v.is_finite()) {
            return Err(invalid("covariance", "entries must be finite"));
        }
        let chol = spd_cholesky(&covariance, "covariance")?;
        let precision = chol.inverse();
        Ok(Self {
            mean,
            covariance,
            precision,
            chol,
        })
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn precision(&self) -> &DMatrix<f64> {
        &self.precision
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UniformPrior {
    lower: DVector<f64>,
    upper: DVector<f64>,
}

impl UniformPrior {
    pub fn new(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        check_dim(lower.len(), upper.len())?;
        if lower.is_empty() {
            return Err(invalid("lower", "empty bounds"));
        }
        for (l, u) in lower.iter().zip(upper.iter()) {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(invalid("lower", format!("need finite lower < upper, got [{l}, {u}]")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn lower(&self) -> &DVector<f64> {
        &self.lower
    }

    pub fn upper(&self) -> &DVector<f64> {
        &self.upper
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter()
            .zip(self.lower.iter().zip(self.upper.iter()))
            .all(|(v, (l, u))| *l <= *v && *v <= *u)
    }
}

#[derive(Debug, Clone)]
pub enum PriorSpec {
    Gaussian(GaussianPrior),
    Uniform(UniformPrior),
}

impl PriorSpec {
    pub fn gaussian(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        GaussianPrior::new(mean, covariance).map(PriorSpec::Gaussian)
    }

    /// Scalar normal prior `N(mean, variance)`.
    pub fn normal_1d(mean: f64, variance: f64) -> Result<Self> {
        Self::gaussian(DVector::from_element(1, mean), DMatrix::from_element(1, 1, variance))
    }

    pub fn uniform(lower: DVector<f64>, upper: DVector<f64>) -> Result<Self> {
        UniformPrior::new(lower, upper).map(PriorSpec::Uniform)
    }

    pub fn uniform_1d(lower: f64, upper: f64) -> Result<Self> {
        Self::uniform(DVector::from_element(1, lower), DVector::from_element(1, upper))
    }

    /// Log density up to an additive constant; `-inf` outside a uniform support.
    pub fn log_density(&self, x: &[f64]) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        Ok(match self {
            PriorSpec::Gaussian(g) => {
                let d = DVector::from_column_slice(x) - &g.mean;
                -0.5 * d.dot(&(&g.precision * &d))
            }
            PriorSpec::Uniform(u) => {
                if u.contains(x) {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
        })
    }

    /// Draws an iid sample of `n` particles.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Ensemble> {
        let dim = self.dim();
        let mut states = DMatrix::zeros(dim, n);
        for j in 0..n {
            match self {
                PriorSpec::Gaussian(g) => {
                    let z = DVector::from_fn(dim, |_, _| StandardNormal.sample(rng));
                    let x = &g.mean + g.chol.l() * z;
                    states.set_column(j, &x);
                }
                PriorSpec::Uniform(u) => {
                    for i in 0..dim {
                        states[(i, j)] = rng.random_range(u.lower[i]..u.upper[i]);
                    }
                }
            }
        }
        Ensemble::from_columns(states)
    }
}

impl LogPrior for PriorSpec {
    fn dim(&self) -> usize {
        match self {
            PriorSpec::Gaussian(g) => g.mean.len(),
            PriorSpec::Uniform(u) => u.lower.len(),
        }
    }

    /// Gaussian: `-Sigma^{-1} (x - mu)`. Uniform: zero in the interior; the
    /// walls are enforced by reflection in the mapping, not by this gradient.
    fn grad_log_prior(&self, x: &[f64]) -> Result<DVector<f64>> {
        check_dim(self.dim(), x.len())?;
        match self {
            PriorSpec::Gaussian(g) => {
                let d = DVector::from_column_slice(x) - &g.mean;
                Ok(-(&g.precision * d))
            }
            PriorSpec::Uniform(u) => {
                for (index, &value) in x.iter().enumerate() {
                    let (lower, upper) = (u.lower[index], u.upper[index]);
                    if !(lower <= value && value <= upper) {
                        return Err(Error::OutsideSupport {
                            index,
                            value,
                            lower,
                            upper,
                        });
                    }
                }
                Ok(DVector::zeros(x.len()))
            }
        }
    }

    fn bounds(&self) -> Option<(&DVector<f64>, &DVector<f64>)> {
        match self {
            PriorSpec::Gaussian(_) => None,
            PriorSpec::Uniform(u) => Some((&u.lower, &u.upper)),
        }
    }
}

/// Observation operator `H`.
#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Linear(DMatrix<f64>),
    /// Componentwise `x^2`.
    Quadratic,
    /// Componentwise `|x|`.
    Absolute,
}

/// Which route supplies `grad H` inside the log-likelihood gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradientBackend {
    /// Analytic tangent-linear operator.
    Exact,
    /// Kernel-embedded estimate from particle evaluations.
    Rkhs,
    /// Kernel-embedded estimate with normalized kernel weights.
    RkhsNormalized,
    /// Ensemble-space regression of observation on state perturbations.
    EnsembleSpace,
}

impl GradientBackend {
    pub const ALL: [GradientBackend; 4] = [
        GradientBackend::Exact,
        GradientBackend::Rkhs,
        GradientBackend::RkhsNormalized,
        GradientBackend::EnsembleSpace,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            GradientBackend::Exact => "exact",
            GradientBackend::Rkhs => "rkhs",
            GradientBackend::RkhsNormalized => "rkhs_normalized",
            GradientBackend::EnsembleSpace => "ensemble_space",
        }
    }
}

impl std::str::FromStr for GradientBackend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GradientBackend::ALL.into_iter().find(|b| b.name() == s).ok_or_else(|| {
            let names: Vec<_> = GradientBackend::ALL.iter().map(|b| b.name()).collect();
            invalid(
                "backend",
                format!("unknown backend `{s}`; expected one of: {}", names.join(", ")),
            )
        })
    }
}

#[derive(Debug, Clone)]
pub struct ObservationModel {
    operator: Operator,
    noise_cov: DMatrix<f64>,
    noise_precision: DMatrix<f64>,
    backend: GradientBackend,
}

impl ObservationModel {
    pub fn new(operator: Operator, noise_cov: DMatrix<f64>, backend: GradientBackend) -> Result<Self> {
        if noise_cov.nrows() != noise_cov.ncols() || noise_cov.nrows() == 0 {
            return Err(invalid(
                "R",
                "observation-error covariance must be square and non-empty",
            ));
        }
        if let Operator::Linear(a) = &operator {
            check_dim(noise_cov.nrows(), a.nrows())?;
        }
        let noise_precision = spd_cholesky(&noise_cov, "R")?.inverse();
        Ok(Self {
            operator,
            noise_cov,
            noise_precision,
            backend,
        })
    }

    /// Same operator and noise with a different gradient backend.
    pub fn with_backend(&self, backend: GradientBackend) -> Self {
        Self {
            backend,
            ..self.clone()
        }
    }

    pub fn operator(&self) -> &Operator {
        &self.operator
    }

    pub fn backend(&self) -> GradientBackend {
        self.backend
    }

    pub fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    pub fn noise_precision(&self) -> &DMatrix<f64> {
        &self.noise_precision
    }

    pub fn obs_dim(&self) -> usize {
        self.noise_cov.nrows()
    }

    fn check_state(&self, x: &[f64]) -> Result<()> {
        match &self.operator {
            Operator::Linear(a) => check_dim(a.ncols(), x.len()),
            _ => check_dim(self.obs_dim(), x.len()),
        }
    }

    pub fn apply_operator(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_state(x)?;
        Ok(match &self.operator {
            Operator::Linear(a) => a * DVector::from_column_slice(x),
            Operator::Quadratic => DVector::from_iterator(x.len(), x.iter().map(|v| v * v)),
            Operator::Absolute => DVector::from_iterator(x.len(), x.iter().map(|v| v.abs())),
        })
    }

    /// Analytic Jacobian of `H`. The derivative of `|x|` at 0 is taken as 0.
    pub fn exact_grad_operator(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_state(x)?;
        Ok(match &self.operator {
            Operator::Linear(a) => a.clone(),
            Operator::Quadratic => DMatrix::from_diagonal(&DVector::from_iterator(x.len(), x.iter().map(|v| 2.0 * v))),
            Operator::Absolute => DMatrix::from_diagonal(&DVector::from_iterator(
                x.len(),
                x.iter().map(|&v| if v == 0.0 { 0.0 } else { v.signum() }),
            )),
        })
    }

    /// `grad_h^T R^{-1} (y - H(x))` for any supplied Jacobian estimate.
    pub fn grad_log_likelihood(&self, grad_h: &DMatrix<f64>, x: &[f64], y: &DVector<f64>) -> Result<DVector<f64>> {
        check_dim(self.obs_dim(), y.len())?;
        check_dim(self.obs_dim(), grad_h.nrows())?;
        check_dim(x.len(), grad_h.ncols())?;
        let innovation = y - self.apply_operator(x)?;
        Ok(grad_h.transpose() * (&self.noise_precision * innovation))
    }

    /// `log N(y; H(x), R)` up to an additive constant.
    pub fn log_likelihood(&self, x: &[f64], y: &DVector<f64>) -> Result<f64> {
        check_dim(self.obs_dim(), y.len())?;
        let d = y - self.apply_operator(x)?;
        Ok(-0.5 * d.dot(&(&self.noise_precision * &d)))
    }
}

fn spd_cholesky(m: &DMatrix<f64>, name: &'static str) -> Result<Cholesky<f64, Dyn>> {
    if (m - m.transpose()).amax() > 1e-12 * m.amax().max(1.0) {
        return Err(invalid(name, "matrix must be symmetric"));
    }
    Cholesky::new(m.clone()).ok_or_else(|| invalid(name, "matrix must be positive definite"))
}
