//! Stochastic Lorenz-63 dynamics and a scalar random walk.

use nalgebra::DVector;
use rand::RngCore;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, invalid, Error, Result};

/// A Markov transition applied once per assimilation cycle.
pub trait Transition: Sync {
    fn dim(&self) -> usize;

    fn propagate(&self, state: &[f64], rng: &mut dyn RngCore) -> Result<DVector<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz63Config {
    pub sigma: f64,
    pub rho: f64,
    pub beta: f64,
    /// RK4 step in model time units.
    pub dt: f64,
    pub steps_per_cycle: usize,
    /// Standard deviation of the additive noise applied once per cycle.
    pub model_noise_std: f64,
}

impl Default for Lorenz63Config {
    fn default() -> Self {
        Self {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.01,
            steps_per_cycle: 10,
            model_noise_std: 0.1,
        }
    }
}

impl Lorenz63Config {
    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(invalid("dt", format!("must be positive, got {}", self.dt)));
        }
        if self.steps_per_cycle == 0 {
            return Err(invalid("steps_per_cycle", "must be at least 1"));
        }
        if !(self.model_noise_std >= 0.0 && self.model_noise_std.is_finite()) {
            return Err(invalid("model_noise_std", "must be non-negative"));
        }
        for (name, v) in [("sigma", self.sigma), ("rho", self.rho), ("beta", self.beta)] {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        Ok(())
    }

    /// Deterministic part of one cycle: `steps_per_cycle` RK4 steps.
    pub fn integrate(&self, state: [f64; 3]) -> Result<[f64; 3]> {
        let mut s = state;
        for _ in 0..self.steps_per_cycle {
            s = rk4_step(s, self.dt, |x| l63_deriv(x, self));
            if s.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("Lorenz-63 integration blew up".into()));
            }
        }
        Ok(s)
    }
}

pub fn l63_deriv(s: [f64; 3], cfg: &Lorenz63Config) -> [f64; 3] {
    let [x, y, z] = s;
    [cfg.sigma * (y - x), x * (cfg.rho - z) - y, x * y - cfg.beta * z]
}

pub fn rk4_step(s: [f64; 3], dt: f64, f: impl Fn([f64; 3]) -> [f64; 3]) -> [f64; 3] {
    let add = |a: [f64; 3], b: [f64; 3], h: f64| [a[0] + h * b[0], a[1] + h * b[1], a[2] + h * b[2]];
    let k1 = f(s);
    let k2 = f(add(s, k1, dt / 2.0));
    let k3 = f(add(s, k2, dt / 2.0));
    let k4 = f(add(s, k3, dt));
    std::array::from_fn(|i| s[i] + dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// One cycle: RK4 integration followed by additive Gaussian noise.
pub fn propagate(state: [f64; 3], cfg: &Lorenz63Config, rng: &mut dyn RngCore) -> Result<[f64; 3]> {
    let mut s = cfg.integrate(state)?;
    if cfg.model_noise_std > 0.0 {
        for v in &mut s {
            let z: f64 = StandardNormal.sample(rng);
            *v += cfg.model_noise_std * z;
        }
    }
    Ok(s)
}

impl Transition for Lorenz63Config {
    fn dim(&self) -> usize {
        3
    }

    fn propagate(&self, state: &[f64], rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        check_dim(3, state.len())?;
        let s = propagate([state[0], state[1], state[2]], self, rng)?;
        Ok(DVector::from_column_slice(&s))
    }
}

/// `x_{k+1} = x_k + noise`, independently per component.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RandomWalk {
    pub dim: usize,
    pub noise_std: f64,
}

impl Transition for RandomWalk {
    fn dim(&self) -> usize {
        self.dim
    }

    fn propagate(&self, state: &[f64], rng: &mut dyn RngCore) -> Result<DVector<f64>> {
        check_dim(self.dim, state.len())?;
        Ok(DVector::from_iterator(
            self.dim,
            state.iter().map(|v| {
                if self.noise_std > 0.0 {
                    let z: f64 = StandardNormal.sample(&mut *rng);
                    v + self.noise_std * z
                } else {
                    *v
                }
            }),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn canonical() -> Lorenz63Config {
        Lorenz63Config::default()
    }

    #[test]
    fn derivative_examples() {
        let c = canonical();
        assert_eq!(l63_deriv([0.0; 3], &c), [0.0; 3]);
        let r = 72f64.sqrt();
        for v in l63_deriv([r, r, 27.0], &c) {
            assert!(v.abs() < 1e-12);
        }
        let d = l63_deriv([1.0, 0.0, 0.0], &c);
        // dy/dt = x (rho - z) - y = 28
        assert_eq!(d, [-10.0, 28.0, 0.0]);
    }

    #[test]
    fn origin_is_fixed_without_noise() {
        let c = Lorenz63Config {
            model_noise_std: 0.0,
            ..canonical()
        };
        let mut rng = stream(0, &[]);
        assert_eq!(propagate([0.0; 3], &c, &mut rng).unwrap(), [0.0; 3]);
    }

    #[test]
    fn rk4_converges_at_fourth_order() {
        let start = [-5.8, -5.1, 24.5];
        let run = |dt: f64| {
            let c = Lorenz63Config {
                dt,
                steps_per_cycle: (0.1 / dt).round() as usize,
                model_noise_std: 0.0,
                ..canonical()
            };
            c.integrate(start).unwrap()
        };
        let dist = |a: [f64; 3], b: [f64; 3]| a.iter().zip(&b).map(|(u, v)| (u - v).powi(2)).sum::<f64>().sqrt();
        let reference = run(0.01 / 8.0);
        let coarse = dist(run(0.01), reference);
        let fine = dist(run(0.005), reference);
        let order = (coarse / fine).log2();
        assert!(
            (3.5..=4.5).contains(&order),
            "observed order {order}, ratio {}",
            coarse / fine
        );
    }

    #[test]
    fn noisy_propagation_is_reproducible() {
        let c = canonical();
        let a = propagate([1.0, 2.0, 20.0], &c, &mut stream(42, &[3])).unwrap();
        let b = propagate([1.0, 2.0, 20.0], &c, &mut stream(42, &[3])).unwrap();
        assert_eq!(a, b);
        let other = propagate([1.0, 2.0, 20.0], &c, &mut stream(43, &[3])).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn trajectories_stay_on_the_attractor() {
        let c = canonical();
        let mut s = [1.508870, -1.531271, 25.46091];
        let mut rng = stream(5, &[]);
        for _ in 0..500 {
            s = propagate(s, &c, &mut rng).unwrap();
            assert!(s[0].abs() < 50.0 && s[1].abs() < 50.0, "{s:?}");
            assert!(s[2] > -5.0 && s[2] < 80.0, "{s:?}");
        }
    }

    #[test]
    fn random_walk_without_noise_is_identity() {
        let rw = RandomWalk { dim: 2, noise_std: 0.0 };
        let out = rw.propagate(&[0.25, -3.0], &mut stream(1, &[])).unwrap();
        assert_eq!(out.as_slice(), &[0.25, -3.0]);
        assert!(canonical().propagate(&[1.0], &mut stream(1, &[])).is_err());
    }
}
