//! Lorenz-96 trajectories, `dθ_j/dt = (θ_{j+1} − θ_{j−2}) θ_{j−1} − θ_j + F`
//! with periodic indices, integrated by classical RK4.

use serde::{Deserialize, Serialize};

use crate::error::{FkmdError, Result};
use crate::tseries::TimeSeries;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Lorenz96Params {
    pub n_coords: usize,
    pub forcing: f64,
    pub dt: f64,
    pub sample_lag: f64,
    pub n_samples: usize,
    /// Samples integrated and discarded before recording starts.
    pub burn_in: usize,
}

impl Default for Lorenz96Params {
    fn default() -> Self {
        Self {
            n_coords: 40,
            forcing: 8.0,
            dt: 1e-2,
            sample_lag: 0.05,
            n_samples: 1000,
            burn_in: 0,
        }
    }
}

impl Lorenz96Params {
    /// Integrator steps per recorded sample.
    pub fn steps_per_sample(&self) -> Result<usize> {
        if self.n_coords < 4 {
            return Err(FkmdError::InvalidParameter(format!(
                "Lorenz-96 needs at least 4 coordinates, got {}",
                self.n_coords
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) || !(self.sample_lag > 0.0 && self.sample_lag.is_finite()) {
            return Err(FkmdError::InvalidParameter("dt and sample lag must be positive".into()));
        }
        if !self.forcing.is_finite() {
            return Err(FkmdError::InvalidParameter("forcing must be finite".into()));
        }
        let ratio = self.sample_lag / self.dt;
        let steps = ratio.round();
        if steps < 1.0 || (steps * self.dt - self.sample_lag).abs() > 1e-12 * self.sample_lag {
            return Err(FkmdError::InvalidParameter(format!(
                "sample lag {} is not a whole multiple of dt {}",
                self.sample_lag, self.dt
            )));
        }
        Ok(steps as usize)
    }
}

pub fn rhs(theta: &[f64], forcing: f64) -> Vec<f64> {
    let mut out = vec![0.0; theta.len()];
    rhs_into(theta, forcing, &mut out);
    out
}

fn rhs_into(theta: &[f64], forcing: f64, out: &mut [f64]) {
    let n = theta.len();
    for j in 0..n {
        let next = theta[(j + 1) % n];
        let prev = theta[(j + n - 1) % n];
        let prev2 = theta[(j + n - 2) % n];
        out[j] = (next - prev2) * prev - theta[j] + forcing;
    }
}

/// `θ_j = F + 1` for every fifth coordinate (`j = 5, 10, …` counting from
/// one), `F` elsewhere.
pub fn default_initial(n_coords: usize, forcing: f64) -> Vec<f64> {
    (1..=n_coords)
        .map(|j| if j % 5 == 0 { forcing + 1.0 } else { forcing })
        .collect()
}

struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Rk4 {
    fn new(n: usize) -> Self {
        Self {
            k1: vec![0.0; n],
            k2: vec![0.0; n],
            k3: vec![0.0; n],
            k4: vec![0.0; n],
            tmp: vec![0.0; n],
        }
    }

    fn step(&mut self, theta: &mut [f64], forcing: f64, dt: f64) {
        let n = theta.len();
        rhs_into(theta, forcing, &mut self.k1);
        for i in 0..n {
            self.tmp[i] = theta[i] + 0.5 * dt * self.k1[i];
        }
        rhs_into(&self.tmp, forcing, &mut self.k2);
        for i in 0..n {
            self.tmp[i] = theta[i] + 0.5 * dt * self.k2[i];
        }
        rhs_into(&self.tmp, forcing, &mut self.k3);
        for i in 0..n {
            self.tmp[i] = theta[i] + dt * self.k3[i];
        }
        rhs_into(&self.tmp, forcing, &mut self.k4);
        for i in 0..n {
            theta[i] += dt / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
    }
}

/// Advance `theta` by `steps` RK4 steps of size `dt`.
pub fn integrate(theta: &mut [f64], forcing: f64, dt: f64, steps: usize) -> Result<()> {
    let mut rk = Rk4::new(theta.len());
    for s in 0..steps {
        rk.step(theta, forcing, dt);
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(FkmdError::Integration { step: s + 1 });
        }
    }
    Ok(())
}

/// Record `n_samples` states, one every `sample_lag`, starting with the
/// initial state (after burn-in). Channels are named `theta1..thetaJ`.
pub fn simulate(params: &Lorenz96Params, initial: Option<&[f64]>) -> Result<TimeSeries> {
    let per_sample = params.steps_per_sample()?;
    let n = params.n_coords;
    let mut theta = match initial {
        Some(init) if init.len() != n => {
            return Err(FkmdError::DimensionMismatch(format!(
                "initial state has {} coordinates, expected {n}",
                init.len()
            )))
        }
        Some(init) => init.to_vec(),
        None => default_initial(n, params.forcing),
    };
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(FkmdError::InvalidParameter("initial state must be finite".into()));
    }
    let mut rk = Rk4::new(n);
    let mut step = 0usize;
    let mut advance = |theta: &mut Vec<f64>| -> Result<()> {
        for _ in 0..per_sample {
            rk.step(theta, params.forcing, params.dt);
            step += 1;
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(FkmdError::Integration { step });
        }
        Ok(())
    };
    for _ in 0..params.burn_in {
        advance(&mut theta)?;
    }
    let mut values = Vec::with_capacity(params.n_samples * n);
    for s in 0..params.n_samples {
        if s > 0 {
            advance(&mut theta)?;
        }
        values.extend_from_slice(&theta);
    }
    let names = (1..=n).map(|j| format!("theta{j}")).collect();
    TimeSeries::new(values, n, params.sample_lag, Some(names))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_state_is_fixed() {
        assert!(rhs(&[8.0; 40], 8.0).iter().all(|&v| v == 0.0));
        let p = Lorenz96Params {
            n_samples: 20,
            ..Default::default()
        };
        let ts = simulate(&p, Some(&[8.0; 40])).unwrap();
        assert!(ts.as_slice().iter().all(|&v| v == 8.0));
    }

    #[test]
    fn hand_evaluated_rhs() {
        let d = rhs(&[1.0, 2.0, 3.0, 4.0], 0.0);
        assert_eq!(d[0], -5.0);
    }

    #[test]
    fn forcing_enters_additively() {
        let theta = [0.3, -1.2, 2.5, 0.7, 4.1];
        let a = rhs(&theta, 8.0);
        let b = rhs(&theta, 0.0);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x - y, 8.0);
        }
    }

    #[test]
    fn default_initial_bumps_every_fifth() {
        let init = default_initial(10, 8.0);
        assert_eq!(init[4], 9.0);
        assert_eq!(init[9], 9.0);
        assert_eq!(init.iter().filter(|&&v| v == 8.0).count(), 8);
    }

    #[test]
    fn invalid_params() {
        let bad = |p: Lorenz96Params| simulate(&p, None).is_err();
        assert!(bad(Lorenz96Params {
            n_coords: 3,
            ..Default::default()
        }));
        assert!(bad(Lorenz96Params {
            sample_lag: 0.055,
            ..Default::default()
        }));
        assert!(bad(Lorenz96Params {
            dt: 0.0,
            ..Default::default()
        }));
    }

    #[test]
    fn burn_in_shifts_the_record() {
        let base = Lorenz96Params {
            n_samples: 6,
            ..Default::default()
        };
        let plain = simulate(&base, None).unwrap();
        let burned = simulate(
            &Lorenz96Params {
                n_samples: 4,
                burn_in: 2,
                ..base.clone()
            },
            None,
        )
        .unwrap();
        assert_eq!(burned.row(0), plain.row(2));
        assert_eq!(burned.row(3), plain.row(5));
    }

    #[test]
    fn blow_up_is_reported() {
        let p = Lorenz96Params {
            dt: 10.0,
            sample_lag: 10.0,
            n_samples: 50,
            ..Default::default()
        };
        assert!(matches!(simulate(&p, None), Err(FkmdError::Integration { .. })));
    }
}
