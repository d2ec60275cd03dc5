//! Kernel density estimates, mode counting and ensemble summary statistics.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::ensemble::Ensemble;
use crate::error::{check_dim, invalid, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdeBandwidth {
    Fixed(f64),
    /// Silverman's rule, `1.06 * sd * n^(-1/5)`.
    Silverman,
}

pub fn linspace(start: f64, end: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![start],
        _ => (0..n)
            .map(|i| start + (end - start) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// `n` evaluation points spanning the sample extremes padded by `pad`.
pub fn padded_grid(samples: &[f64], pad: f64, n: usize) -> Vec<f64> {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    linspace(lo - pad, hi + pad, n)
}

pub fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    grid.windows(2)
        .zip(values.windows(2))
        .map(|(g, v)| 0.5 * (g[1] - g[0]) * (v[0] + v[1]))
        .sum()
}

fn sample_std(samples: &[f64]) -> f64 {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    (samples.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

pub fn silverman_bandwidth(samples: &[f64]) -> Result<f64> {
    if samples.len() < 2 {
        return Err(Error::TooFewParticles {
            required: 2,
            found: samples.len(),
        });
    }
    let h = 1.06 * sample_std(samples) * (samples.len() as f64).powf(-0.2);
    if h > 0.0 && h.is_finite() {
        Ok(h)
    } else {
        Err(Error::DegenerateEnsemble(
            "zero sample variance leaves Silverman's bandwidth undefined".into(),
        ))
    }
}

/// Gaussian kernel density estimate of `samples` evaluated on `grid`.
pub fn kde_1d(samples: &[f64], grid: &[f64], bandwidth: KdeBandwidth) -> Result<DensityEstimate> {
    kde_impl(samples, grid, bandwidth, None)
}

/// Kernel density estimate on `[lower, upper]` with reflection at both walls,
/// so no mass leaks outside the interval. Zero outside the interval.
pub fn kde_1d_bounded(
    samples: &[f64],
    grid: &[f64],
    bandwidth: KdeBandwidth,
    lower: f64,
    upper: f64,
) -> Result<DensityEstimate> {
    if !(lower < upper) {
        return Err(invalid("bounds", format!("need lower < upper, got [{lower}, {upper}]")));
    }
    if let Some(s) = samples.iter().find(|s| !(lower..=upper).contains(*s)) {
        return Err(invalid("samples", format!("{s} lies outside [{lower}, {upper}]")));
    }
    kde_impl(samples, grid, bandwidth, Some((lower, upper)))
}

fn kde_impl(
    samples: &[f64],
    grid: &[f64],
    bandwidth: KdeBandwidth,
    bounds: Option<(f64, f64)>,
) -> Result<DensityEstimate> {
    if samples.len() < 2 {
        return Err(Error::TooFewParticles {
            required: 2,
            found: samples.len(),
        });
    }
    if grid.is_empty() || grid.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("grid", "must be non-empty and strictly increasing"));
    }
    let h = match bandwidth {
        KdeBandwidth::Fixed(h) if h > 0.0 && h.is_finite() => h,
        KdeBandwidth::Fixed(h) => return Err(invalid("bandwidth", format!("must be positive, got {h}"))),
        KdeBandwidth::Silverman => silverman_bandwidth(samples)?,
    };
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * PI).sqrt());
    let k = |d: f64| (-d * d / (2.0 * h * h)).exp();
    let density = grid
        .iter()
        .map(|&g| match bounds {
            None => norm * samples.iter().map(|x| k(g - x)).sum::<f64>(),
            Some((lo, hi)) if (lo..=hi).contains(&g) => {
                norm * samples
                    .iter()
                    .map(|x| k(g - x) + k(g - (2.0 * lo - x)) + k(g - (2.0 * hi - x)))
                    .sum::<f64>()
            }
            Some(_) => 0.0,
        })
        .collect();
    Ok(DensityEstimate {
        grid: grid.to_vec(),
        density,
        bandwidth: h,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Modes {
    pub count: usize,
    pub locations: Vec<f64>,
}

/// Counts prominent local maxima of a gridded density.
///
/// A maximum counts when it exceeds `prominence` times the global maximum
/// and, against every taller accepted maximum, the density between the two
/// dips below `(1 - prominence)` times the lower of the two peak heights.
pub fn count_modes(estimate: &DensityEstimate, prominence: f64) -> Modes {
    let d = &estimate.density;
    let g = &estimate.grid;
    let gmax = d.iter().cloned().fold(0.0, f64::max);
    if !(gmax > 0.0) {
        return Modes {
            count: 0,
            locations: Vec::new(),
        };
    }

    // plateau-aware local maxima: (start, end, height)
    let mut candidates = Vec::new();
    let mut i = 0;
    while i < d.len() {
        let mut j = i;
        while j + 1 < d.len() && d[j + 1] == d[i] {
            j += 1;
        }
        let left_ok = i == 0 || d[i - 1] < d[i];
        let right_ok = j + 1 == d.len() || d[j + 1] < d[i];
        if left_ok && right_ok && d[i] > prominence * gmax {
            candidates.push((i, j, d[i]));
        }
        i = j + 1;
    }
    candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));

    let mut accepted: Vec<(usize, usize, f64)> = Vec::new();
    for c in candidates {
        let separated = accepted.iter().all(|a| {
            let (lo, hi) = if a.0 < c.0 { (a.1, c.0) } else { (c.1, a.0) };
            let valley = d[lo..=hi].iter().cloned().fold(f64::INFINITY, f64::min);
            valley < (1.0 - prominence) * a.2.min(c.2)
        });
        if separated {
            accepted.push(c);
        }
    }
    accepted.sort_by_key(|a| a.0);
    Modes {
        count: accepted.len(),
        locations: accepted.iter().map(|a| 0.5 * (g[a.0] + g[a.1])).collect(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl EnsembleStats {
    /// Euclidean distance of the mean from `reference`, divided by `sqrt(dim)`.
    pub fn rmse_vs(&self, reference: &[f64]) -> Result<f64> {
        rmse(&self.mean, reference)
    }
}

pub fn rmse(mean: &DVector<f64>, reference: &[f64]) -> Result<f64> {
    check_dim(mean.len(), reference.len())?;
    let ss: f64 = mean.iter().zip(reference).map(|(m, r)| (m - r).powi(2)).sum();
    Ok((ss / mean.len() as f64).sqrt())
}

/// Sample mean and unbiased sample covariance.
pub fn ensemble_stats(ensemble: &Ensemble) -> Result<EnsembleStats> {
    let n = ensemble.n_particles();
    if n < 2 {
        return Err(Error::TooFewParticles { required: 2, found: n });
    }
    let mean = ensemble.mean();
    let mut covariance = DMatrix::zeros(ensemble.dim(), ensemble.dim());
    for p in ensemble.particles() {
        let d = DVector::from_column_slice(p) - &mean;
        covariance += &d * d.transpose();
    }
    covariance /= (n - 1) as f64;
    Ok(EnsembleStats { mean, covariance })
}
