use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

/// An equally weighted particle ensemble.
///
/// Particles are stored as the columns of a `dim × n_particles` matrix so
/// that each particle occupies a contiguous slice.
#[derive(Debug, Clone, PartialEq)]
pub struct Ensemble {
    states: DMatrix<f64>,
}

impl Ensemble {
    /// Wraps a `dim × n_particles` matrix whose columns are particles.
    pub fn from_columns(states: DMatrix<f64>) -> Result<Self> {
        if states.ncols() == 0 {
            return Err(Error::TooFewParticles { required: 1, found: 0 });
        }
        if states.nrows() == 0 {
            return Err(Error::InvalidParameter {
                name: "states",
                reason: "state dimension must be at least 1".into(),
            });
        }
        if let Some(bad) = states.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("ensemble entry {bad}")));
        }
        Ok(Self { states })
    }

    /// Builds an ensemble from an `n_particles × dim` matrix (one particle per row).
    pub fn from_rows(rows: &DMatrix<f64>) -> Result<Self> {
        Self::from_columns(rows.transpose())
    }

    pub fn from_particles(particles: &[DVector<f64>]) -> Result<Self> {
        let first = particles
            .first()
            .ok_or(Error::TooFewParticles { required: 1, found: 0 })?;
        let dim = first.len();
        for p in particles {
            check_dim(dim, p.len())?;
        }
        Self::from_columns(DMatrix::from_fn(dim, particles.len(), |i, j| particles[j][i]))
    }

    /// One-dimensional ensemble from scalar positions.
    pub fn from_scalars(values: &[f64]) -> Result<Self> {
        Self::from_columns(DMatrix::from_row_slice(1, values.len(), values))
    }

    pub fn n_particles(&self) -> usize {
        self.states.ncols()
    }

    pub fn dim(&self) -> usize {
        self.states.nrows()
    }

    pub fn particle(&self, j: usize) -> &[f64] {
        let d = self.dim();
        &self.states.as_slice()[j * d..(j + 1) * d]
    }

    pub fn particle_mut(&mut self, j: usize) -> &mut [f64] {
        let d = self.dim();
        &mut self.states.as_mut_slice()[j * d..(j + 1) * d]
    }

    pub fn particles(&self) -> impl Iterator<Item = &[f64]> {
        self.states.as_slice().chunks_exact(self.dim())
    }

    /// The `dim × n_particles` state matrix.
    pub fn states(&self) -> &DMatrix<f64> {
        &self.states
    }

    /// The `n_particles × dim` view used in reports and CSV output.
    pub fn to_rows(&self) -> DMatrix<f64> {
        self.states.transpose()
    }

    /// Values of one state component across all particles.
    pub fn component(&self, i: usize) -> Vec<f64> {
        self.particles().map(|p| p[i]).collect()
    }

    pub fn mean(&self) -> DVector<f64> {
        let n = self.n_particles() as f64;
        let mut mean = DVector::zeros(self.dim());
        for p in self.particles() {
            for (m, v) in mean.iter_mut().zip(p) {
                *m += v;
            }
        }
        mean / n
    }

    pub(crate) fn ensure_finite(&self) -> Result<()> {
        match self.states.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(k) => Err(Error::NonFinite(format!(
                "particle {} component {}",
                k / self.dim(),
                k % self.dim()
            ))),
        }
    }
}
