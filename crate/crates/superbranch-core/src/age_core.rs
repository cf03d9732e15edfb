//! Shared stepping for the age-structured renewal equations on a singleton
//! base space. Both the nonlinear cumulant form and the linear first-moment
//! form are
//! `W_t(a) = f(a+t) 1_{a+t<L} + int_0^{(L-a) ^ t} beta(a+s) K(W_{t-s}(0)) ds`
//! with kernel `K = zeta` or `K(z) = m z`; they differ only in `K`, so one
//! driver serves both.
//!
//! The integral is discretized by the trapezoid rule along the deterministic
//! age flow. Its `s = 0` endpoint references the current age-zero value, so
//! each time step first resolves the scalar implicit equation at age zero
//! (directly in the linear case, by fixed point in the nonlinear case) and
//! then fills the remaining ages explicitly.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::format;
use alloc::vec::Vec;

use crate::cumulant::SolveError;
use crate::mechanism::{AgeProfile, ScalarMechanism};

/// Solution values on the `(time, age)` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AgeGrid {
    step: f64,
    times: Vec<f64>,
    ages: Vec<f64>,
    /// `values[time][age]`
    values: Vec<Vec<f64>>,
}

impl AgeGrid {
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn ages(&self) -> &[f64] {
        &self.ages
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn value(&self, time_ix: usize, age_ix: usize) -> f64 {
        self.values[time_ix][age_ix]
    }

    /// Grid-aligned lookup of `W_t(a)`.
    pub fn at(&self, t: f64, a: f64) -> Result<f64, SolveError> {
        let t_ix = grid_index(&self.times, self.step, t)?;
        let a_ix = grid_index(&self.ages, self.step, a)?;
        Ok(self.values[t_ix][a_ix])
    }

    /// `W_t(0)` across the time grid.
    pub fn age_zero_series(&self) -> Vec<f64> {
        self.values.iter().map(|row| row[0]).collect()
    }
}

fn grid_index(grid: &[f64], step: f64, x: f64) -> Result<usize, SolveError> {
    let ix = (x / step).round() as usize;
    if ix >= grid.len() || (grid[ix] - x).abs() > 1e-9 {
        return Err(SolveError::OffGrid { t: x });
    }
    Ok(ix)
}

pub(crate) enum AgeKernel<'a> {
    Nonlinear(&'a ScalarMechanism),
    Linear(f64),
}

impl AgeKernel<'_> {
    fn eval(&self, z: f64) -> f64 {
        match self {
            AgeKernel::Nonlinear(zeta) => zeta.eval(z),
            AgeKernel::Linear(m) => m * z,
        }
    }

    fn lipschitz(&self) -> f64 {
        match self {
            AgeKernel::Nonlinear(zeta) => zeta.mean(),
            AgeKernel::Linear(m) => m.abs(),
        }
    }
}

fn commensurate(span: f64, step: f64, what: &str) -> Result<usize, SolveError> {
    let raw = span / step;
    let rounded = raw.round();
    if (raw - rounded).abs() > 1e-9 * raw.max(1.0) {
        return Err(SolveError::Config(format!(
            "{what} = {span} is not an integer multiple of step {step}"
        )));
    }
    Ok(rounded as usize)
}

pub(crate) fn solve_age_grid(
    base_rate: f64,
    profile: &AgeProfile,
    kernel: AgeKernel,
    lifetime: f64,
    f: &dyn Fn(f64) -> f64,
    horizon: f64,
    step: f64,
) -> Result<AgeGrid, SolveError> {
    if !(step > 0.0) {
        return Err(SolveError::Config(format!("step must be > 0, got {step}")));
    }
    if !(base_rate >= 0.0) {
        return Err(SolveError::Config(format!(
            "rate must be >= 0, got {base_rate}"
        )));
    }
    if !(lifetime > 0.0) {
        return Err(SolveError::Config(format!(
            "lifetime must be > 0, got {lifetime}"
        )));
    }
    profile.validate().map_err(SolveError::Mechanism)?;
    let n_times = commensurate(horizon, step, "horizon")?;
    let life_steps = if lifetime.is_finite() {
        Some(commensurate(lifetime, step, "lifetime")?)
    } else {
        None
    };
    // Endpoint weight of the implicit s = 0 term must contract.
    let c0_bound = 0.5 * step * base_rate * kernel.lipschitz();
    if c0_bound >= 1.0 {
        return Err(SolveError::Config(format!(
            "step {step} too large for rate {base_rate}: implicit endpoint weight {c0_bound} >= 1"
        )));
    }

    let n_ages = life_steps.unwrap_or(n_times);
    let ages: Vec<f64> = (0..=n_ages).map(|i| i as f64 * step).collect();
    let times: Vec<f64> = (0..=n_times).map(|i| i as f64 * step).collect();

    let alive = |age_ix: usize| life_steps.map_or(true, |l| age_ix < l);
    let rate_at = |age_ix: usize| base_rate * profile.factor(age_ix as f64 * step);
    let up_to = |age_ix: usize, i: usize| life_steps.map_or(i, |l| l.saturating_sub(age_ix).min(i));

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(n_times + 1);
    values.push(
        (0..=n_ages)
            .map(|a_ix| {
                if alive(a_ix) {
                    f(a_ix as f64 * step)
                } else {
                    0.0
                }
            })
            .collect(),
    );

    for i in 1..=n_times {
        let mut row = alloc::vec![0.0; n_ages + 1];
        // Age zero first: the trapezoid endpoint at s = 0 references the
        // value being computed.
        {
            let j_max = up_to(0, i);
            let transported = if life_steps.map_or(true, |l| i < l) {
                f(i as f64 * step)
            } else {
                0.0
            };
            let mut known = 0.0;
            if j_max >= 1 {
                for j in 1..j_max {
                    known += rate_at(j) * kernel.eval(values[i - j][0]);
                }
                known += 0.5 * rate_at(j_max) * kernel.eval(values[i - j_max][0]);
            }
            let known = transported + step * known;
            let c0 = if j_max >= 1 {
                0.5 * step * rate_at(0)
            } else {
                0.0
            };
            row[0] = match kernel {
                AgeKernel::Linear(m) => known / (1.0 - c0 * m),
                AgeKernel::Nonlinear(zeta) => {
                    let mut x = values[i - 1][0];
                    for _ in 0..200 {
                        let next = known + c0 * zeta.eval(x);
                        if (next - x).abs() <= 1e-14 * x.abs().max(1.0) {
                            x = next;
                            break;
                        }
                        x = next;
                    }
                    x
                }
            };
        }
        for a_ix in 1..=n_ages {
            if !alive(a_ix) {
                continue; // removed at age L
            }
            let j_max = up_to(a_ix, i);
            let transported = if life_steps.map_or(true, |l| a_ix + i < l) {
                f((a_ix + i) as f64 * step)
            } else {
                0.0
            };
            let mut integral = 0.0;
            if j_max >= 1 {
                integral += 0.5 * rate_at(a_ix) * kernel.eval(row[0]);
                for j in 1..j_max {
                    integral += rate_at(a_ix + j) * kernel.eval(values[i - j][0]);
                }
                integral += 0.5 * rate_at(a_ix + j_max) * kernel.eval(values[i - j_max][0]);
            }
            row[a_ix] = transported + step * integral;
        }
        values.push(row);
    }

    Ok(AgeGrid {
        step,
        times,
        ages,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[cfg(not(feature = "std"))]
    use num_traits::Float;

    #[test]
    fn pure_transport_with_killing() {
        let f = |a: f64| (2.0 - a).max(0.0);
        let grid = solve_age_grid(
            0.0,
            &AgeProfile::Constant(1.0),
            AgeKernel::Linear(1.0),
            1.5,
            &f,
            1.0,
            0.25,
        )
        .unwrap();
        for (i, t) in grid.times().iter().enumerate() {
            for (a_ix, a) in grid.ages().iter().enumerate() {
                let expect = if a + t < 1.5 - 1e-12 { f(a + t) } else { 0.0 };
                assert_eq!(grid.value(i, a_ix), expect, "t={t}, a={a}");
            }
        }
    }

    #[test]
    fn linear_renewal_grows_exponentially() {
        // K(z) = z, constant rate, infinite lifetime, f = 1: W_t(0) = e^{bt}.
        let beta = 0.5;
        let grid = solve_age_grid(
            beta,
            &AgeProfile::Constant(1.0),
            AgeKernel::Linear(1.0),
            f64::INFINITY,
            &|_| 1.0,
            1.0,
            1e-3,
        )
        .unwrap();
        let got = grid.at(1.0, 0.0).unwrap();
        assert!((got - (beta).exp()).abs() < 1e-4, "{got}");
    }

    #[test]
    fn zero_data_stays_zero() {
        let grid = solve_age_grid(
            0.5,
            &AgeProfile::Constant(1.0),
            AgeKernel::Linear(1.0),
            f64::INFINITY,
            &|_| 0.0,
            1.0,
            0.05,
        )
        .unwrap();
        assert!(grid
            .values()
            .iter()
            .all(|row| row.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn incommensurate_grids_are_rejected() {
        let err = solve_age_grid(
            0.1,
            &AgeProfile::Constant(1.0),
            AgeKernel::Linear(1.0),
            1.05,
            &|_| 1.0,
            1.0,
            0.1,
        );
        assert!(matches!(err, Err(SolveError::Config(_))));
    }
}
