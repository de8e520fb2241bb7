//! Lorenz-96 dynamics on a periodic ring, integrated with classical RK4.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type StateVector = DVector<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lorenz96 {
    /// Number of state variables on the ring.
    pub k: usize,
    pub forcing: f64,
    /// RK4 step length in model time units.
    pub dt: f64,
}

impl Default for Lorenz96 {
    fn default() -> Self {
        Lorenz96 {
            k: 40,
            forcing: 8.0,
            dt: 0.005,
        }
    }
}

impl Lorenz96 {
    pub fn new(k: usize, forcing: f64, dt: f64) -> Result<Self> {
        let model = Lorenz96 { k, forcing, dt };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        // the k-2 stencil needs at least four distinct neighbours
        if self.k < 4 {
            return Err(Error::Parameter(format!("K must be >= 4, got {}", self.k)));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Parameter(format!("dt must be > 0, got {}", self.dt)));
        }
        if !self.forcing.is_finite() {
            return Err(Error::Parameter("forcing must be finite".into()));
        }
        Ok(())
    }

    fn check_len(&self, x: &StateVector) -> Result<()> {
        if x.len() != self.k {
            return Err(Error::dim("Lorenz-96 state", self.k, x.len()));
        }
        Ok(())
    }

    /// dX_k/dt = (X_{k+1} - X_{k-2}) X_{k-1} - X_k + F with periodic indices.
    pub fn tendency(&self, x: &StateVector) -> Result<StateVector> {
        self.check_len(x)?;
        Ok(self.tendency_unchecked(x))
    }

    fn tendency_unchecked(&self, x: &StateVector) -> StateVector {
        let k = self.k;
        DVector::from_fn(k, |i, _| {
            let xm2 = x[(i + k - 2) % k];
            let xm1 = x[(i + k - 1) % k];
            let xp1 = x[(i + 1) % k];
            -xm2 * xm1 + xm1 * xp1 - x[i] + self.forcing
        })
    }

    pub fn step_rk4(&self, x: &StateVector) -> Result<StateVector> {
        self.check_len(x)?;
        let next = self.rk4_unchecked(x);
        if next.iter().all(|v| v.is_finite()) {
            Ok(next)
        } else {
            Err(Error::Integration { step: 1 })
        }
    }

    fn rk4_unchecked(&self, x: &StateVector) -> StateVector {
        let h = self.dt;
        let k1 = self.tendency_unchecked(x);
        let k2 = self.tendency_unchecked(&(x + &k1 * (0.5 * h)));
        let k3 = self.tendency_unchecked(&(x + &k2 * (0.5 * h)));
        let k4 = self.tendency_unchecked(&(x + &k3 * h));
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    }

    /// Advance `n_steps` RK4 steps; fails on the first non-finite state.
    pub fn integrate(&self, x: &StateVector, n_steps: usize) -> Result<StateVector> {
        self.check_len(x)?;
        let mut state = x.clone();
        for step in 1..=n_steps {
            state = self.rk4_unchecked(&state);
            if !state.iter().all(|v| v.is_finite()) {
                return Err(Error::Integration { step });
            }
        }
        Ok(state)
    }

    /// Equidistant values from -2 to 2 inclusive.
    pub fn initial_condition(&self) -> StateVector {
        let k = self.k;
        DVector::from_fn(k, |i, _| -2.0 + 4.0 * i as f64 / (k - 1) as f64)
    }

    /// Integrate the equidistant initial condition forward to get a reference state.
    pub fn spin_up(&self, n_steps: usize) -> Result<StateVector> {
        self.integrate(&self.initial_condition(), n_steps)
    }
}
