//! Gaussian RBF kernel machinery shared by the particle flow and the
//! kernel-embedded observation gradients.
//!
//! The kernel is `K(x, x') = exp(-|x - x'|^2 / (2 gamma^2))` with a single
//! isotropic bandwidth. [`kernel_grad`] differentiates with respect to its
//! first argument.

use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, invalid, Error, Result};

/// A realized isotropic RBF kernel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    gamma: f64,
}

impl KernelConfig {
    pub fn new(gamma: f64) -> Result<Self> {
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(invalid("gamma", format!("bandwidth must be positive, got {gamma}")));
        }
        Ok(Self { gamma })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    #[inline]
    pub(crate) fn eval_slices(&self, x: &[f64], xp: &[f64]) -> f64 {
        (-sq_dist(x, xp) / (2.0 * self.gamma * self.gamma)).exp()
    }
}

/// How the kernel bandwidth is chosen from an ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum BandwidthPolicy {
    Fixed {
        gamma: f64,
    },
    /// `gamma^2 = c * trace(sample covariance) / dim`, with `0 < c < 1`.
    TraceFraction {
        c: f64,
    },
}

impl Default for BandwidthPolicy {
    fn default() -> Self {
        BandwidthPolicy::TraceFraction { c: 0.5 }
    }
}

impl BandwidthPolicy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            BandwidthPolicy::Fixed { gamma } => KernelConfig::new(gamma).map(|_| ()),
            BandwidthPolicy::TraceFraction { c } => {
                if c > 0.0 && c < 1.0 {
                    Ok(())
                } else {
                    Err(invalid("c", format!("trace fraction must lie in (0, 1), got {c}")))
                }
            }
        }
    }

    pub fn resolve(&self, ensemble: &Ensemble) -> Result<KernelConfig> {
        KernelConfig::new(select_bandwidth(ensemble, self)?)
    }
}

#[inline]
pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)).sum()
}

pub fn kernel_eval(x: &[f64], x_prime: &[f64], cfg: &KernelConfig) -> Result<f64> {
    check_dim(x.len(), x_prime.len())?;
    Ok(cfg.eval_slices(x, x_prime))
}

/// Gradient of `K(x, x')` with respect to `x`: `-(x - x') / gamma^2 * K(x, x')`.
pub fn kernel_grad(x: &[f64], x_prime: &[f64], cfg: &KernelConfig) -> Result<Vec<f64>> {
    check_dim(x.len(), x_prime.len())?;
    let k = cfg.eval_slices(x, x_prime);
    let g2 = cfg.gamma * cfg.gamma;
    Ok(x.iter().zip(x_prime).map(|(a, b)| -(a - b) / g2 * k).collect())
}

/// Pairwise kernel values and kernel gradients over an ensemble.
///
/// `value(l, j) = K(x^l, x^j)` and `grad(l, j) = kernel_grad(x^l, x^j)`.
#[derive(Debug, Clone)]
pub struct Gram {
    n: usize,
    dim: usize,
    values: Vec<f64>,
    grads: Vec<f64>,
}

impl Gram {
    pub fn new(ensemble: &Ensemble, cfg: &KernelConfig) -> Self {
        let n = ensemble.n_particles();
        let dim = ensemble.dim();
        let g2 = cfg.gamma * cfg.gamma;
        let mut values = vec![0.0; n * n];
        let mut grads = vec![0.0; n * n * dim];
        for l in 0..n {
            values[l * n + l] = 1.0;
            let xl = ensemble.particle(l);
            for j in (l + 1)..n {
                let xj = ensemble.particle(j);
                let k = cfg.eval_slices(xl, xj);
                values[l * n + j] = k;
                values[j * n + l] = k;
                for d in 0..dim {
                    let g = -(xl[d] - xj[d]) / g2 * k;
                    grads[(l * n + j) * dim + d] = g;
                    grads[(j * n + l) * dim + d] = -g;
                }
            }
        }
        Self { n, dim, values, grads }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    #[inline]
    pub fn value(&self, l: usize, j: usize) -> f64 {
        self.values[l * self.n + j]
    }

    #[inline]
    pub fn grad(&self, l: usize, j: usize) -> &[f64] {
        let start = (l * self.n + j) * self.dim;
        &self.grads[start..start + self.dim]
    }

    pub fn matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.n, self.n, &self.values)
    }
}

pub fn gram(ensemble: &Ensemble, cfg: &KernelConfig) -> Gram {
    Gram::new(ensemble, cfg)
}

/// Sum of the unbiased per-component sample variances.
pub(crate) fn covariance_trace(ensemble: &Ensemble) -> f64 {
    let n = ensemble.n_particles() as f64;
    let mean = ensemble.mean();
    let mut total = 0.0;
    for p in ensemble.particles() {
        total += p.iter().zip(mean.iter()).map(|(v, m)| (v - m) * (v - m)).sum::<f64>();
    }
    total / (n - 1.0)
}

pub fn select_bandwidth(ensemble: &Ensemble, policy: &BandwidthPolicy) -> Result<f64> {
    policy.validate()?;
    match *policy {
        BandwidthPolicy::Fixed { gamma } => Ok(gamma),
        BandwidthPolicy::TraceFraction { c } => {
            if ensemble.n_particles() < 2 {
                return Err(Error::TooFewParticles {
                    required: 2,
                    found: ensemble.n_particles(),
                });
            }
            let trace = covariance_trace(ensemble);
            let gamma = (c * trace / ensemble.dim() as f64).sqrt();
            if gamma > 0.0 && gamma.is_finite() {
                Ok(gamma)
            } else {
                Err(Error::DegenerateEnsemble(
                    "zero sample covariance gives a zero bandwidth".into(),
                ))
            }
        }
    }
}
