//! Linear first-moment semigroups of the limit process.
//!
//! `T_t` solves `dT/dt = Q T + beta [m(., T) - T] - b T` (the first-moment
//! semigroup, drift included); `U_t` drops the drift term. The comparison
//! bound `T_t f <= e^{||b|| t} U_t f` is exposed as a computable gap.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use crate::age_core::{self, AgeGrid, AgeKernel};
use crate::cumulant::{
    motion_matrix, solve_with_integrand, FieldMeta, SolveError, SolverConfig, TimeGrid,
};
use crate::mechanism::{AgeProfile, LimitSystemSpec, MechanismError, TestFunction};

type Result<T> = core::result::Result<T, SolveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MomentKind {
    /// First-moment semigroup `T_t` (generator `B = G - b`).
    T,
    /// Drift-free semigroup `U_t` (generator `G = A + beta [m - I]`).
    U,
}

/// `T_t f` or `U_t f` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentField {
    pub kind: MomentKind,
    pub grid: TimeGrid,
    pub meta: FieldMeta,
}

impl MomentField {
    pub fn at(&self, t: f64) -> Result<&[f64]> {
        self.grid.at(t)
    }

    pub fn final_values(&self) -> &[f64] {
        self.grid.final_values()
    }
}

fn solve_kind(
    spec: &LimitSystemSpec,
    f: &TestFunction,
    horizon: f64,
    config: &SolverConfig,
    kind: MomentKind,
) -> Result<MomentField> {
    if f.len() != spec.n_sites() {
        return Err(SolveError::Mechanism(MechanismError::Dimension {
            what: "test function",
            expected: spec.n_sites(),
            got: f.len(),
        }));
    }
    let q = motion_matrix(spec);
    let n = spec.n_sites();
    let local = &spec.local;
    let nonlocal = &spec.nonlocal;
    let with_drift = kind == MomentKind::T;
    let mut phi = |_t: f64, v: &[f64], out: &mut [f64]| {
        for x in 0..n {
            let mut acc = nonlocal.beta(x) * (v[x] - nonlocal.mean_kernel_raw(x, v));
            if with_drift {
                acc += local.drift(x) * v[x];
            }
            out[x] = acc;
        }
    };
    let (grid, clamped) = solve_with_integrand(&q, f.values(), horizon, config, &mut phi)?;
    Ok(MomentField {
        kind,
        grid,
        meta: FieldMeta {
            spec_digest: spec.digest(),
            f_digest: f.digest(),
            method: config.method,
            step: config.step,
            clamped,
        },
    })
}

/// First-moment semigroup `T_t f`.
pub fn solve_t(
    spec: &LimitSystemSpec,
    f: &TestFunction,
    horizon: f64,
    config: &SolverConfig,
) -> Result<MomentField> {
    solve_kind(spec, f, horizon, config, MomentKind::T)
}

/// Drift-free semigroup `U_t f`.
pub fn solve_u(
    spec: &LimitSystemSpec,
    f: &TestFunction,
    horizon: f64,
    config: &SolverConfig,
) -> Result<MomentField> {
    solve_kind(spec, f, horizon, config, MomentKind::U)
}

/// Max over the requested grid times and sites of
/// `T_t f(x) - e^{||b|| t} U_t f(x)`.
///
/// The comparison bound says this is non-positive; values above numerical
/// tolerance indicate a solver bug, which is exactly what the property tests
/// look for.
pub fn excessive_gap(
    spec: &LimitSystemSpec,
    f: &TestFunction,
    times: &[f64],
    config: &SolverConfig,
) -> Result<f64> {
    let horizon = times.iter().fold(0.0f64, |m, t| m.max(*t));
    let t_field = solve_t(spec, f, horizon, config)?;
    let u_field = solve_u(spec, f, horizon, config)?;
    let b_norm = spec.local.drift_sup_norm();
    let mut gap = f64::NEG_INFINITY;
    for &t in times {
        let tv = t_field.at(t)?;
        let uv = u_field.at(t)?;
        let scale = (b_norm * t).exp();
        for (a, b) in tv.iter().zip(uv) {
            gap = gap.max(a - scale * b);
        }
    }
    Ok(gap)
}

/// Age-structured first-moment equation on a singleton base space:
/// `T_t f(a) = f(a+t) 1_{a+t<L} + int_0^{(L-a) ^ t} beta(a+s) m T_{t-s} f(0) ds`.
pub fn solve_age_moment(
    base_rate: f64,
    profile: &AgeProfile,
    mean: f64,
    lifetime: f64,
    f: &dyn Fn(f64) -> f64,
    horizon: f64,
    step: f64,
) -> Result<AgeGrid> {
    age_core::solve_age_grid(
        base_rate,
        profile,
        AgeKernel::Linear(mean),
        lifetime,
        f,
        horizon,
        step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cumulant::solve_cumulant;
    use crate::mechanism::{LocalMechanism, MotionGenerator, NonlocalMechanism, SiteSpace};
    use alloc::format;
    use alloc::vec;

    fn space(n: usize) -> SiteSpace {
        SiteSpace::new((0..n).map(|i| format!("s{i}")).collect()).unwrap()
    }

    fn spec_with(
        n: usize,
        motion: MotionGenerator,
        local: LocalMechanism,
        nonlocal: NonlocalMechanism,
    ) -> LimitSystemSpec {
        let _ = n;
        LimitSystemSpec::new(space(local.n_sites()), motion, local, nonlocal).unwrap()
    }

    fn critical_swap() -> LimitSystemSpec {
        spec_with(
            2,
            MotionGenerator::immobile(2),
            LocalMechanism::zero(2),
            NonlocalMechanism::simple(
                2,
                1.0,
                |x| {
                    if x == 0 {
                        vec![0.0, 1.0]
                    } else {
                        vec![1.0, 0.0]
                    }
                },
                1.0,
                Vec::new(),
            )
            .unwrap(),
        )
    }

    #[test]
    fn free_motion_moment_is_transition_semigroup() {
        let spec = spec_with(
            2,
            MotionGenerator::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            LocalMechanism::zero(2),
            NonlocalMechanism::none(2),
        );
        let f = TestFunction::new(vec![1.0, 0.0]).unwrap();
        let field = solve_t(&spec, &f, 1.0, &SolverConfig::default()).unwrap();
        let expect = (1.0 + (-2.0f64).exp()) / 2.0;
        assert!((field.final_values()[0] - expect).abs() < 1e-8);
    }

    #[test]
    fn critical_swap_moment_conserves_total() {
        let spec = critical_swap();
        let f = TestFunction::new(vec![0.8, 0.3]).unwrap();
        let total = 1.1;
        let field = solve_t(&spec, &f, 2.0, &SolverConfig::default()).unwrap();
        for v in field.grid.values() {
            assert!((v[0] + v[1] - total).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_drift_decays_exponentially() {
        let spec = spec_with(
            1,
            MotionGenerator::immobile(1),
            LocalMechanism::new(vec![1.0], vec![0.0], vec![Vec::new()]).unwrap(),
            NonlocalMechanism::none(1),
        );
        let f = TestFunction::constant(1, 1.0).unwrap();
        let field = solve_t(&spec, &f, 1.0, &SolverConfig::default()).unwrap();
        assert!((field.final_values()[0] - (-1.0f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn u_equals_t_without_drift() {
        let spec = critical_swap();
        let f = TestFunction::new(vec![0.5, 1.5]).unwrap();
        let cfg = SolverConfig::default();
        let t_field = solve_t(&spec, &f, 1.0, &cfg).unwrap();
        let u_field = solve_u(&spec, &f, 1.0, &cfg).unwrap();
        assert!(t_field.grid.sup_distance(&u_field.grid) < 1e-12);
    }

    #[test]
    fn subcritical_mean_kernel_decays() {
        // m-kernel mass 0.5, beta = 1, single site: U' = -(1 - 0.5) U.
        let nl = NonlocalMechanism::simple(1, 1.0, |_| vec![1.0], 0.5, Vec::new()).unwrap();
        let spec = spec_with(1, MotionGenerator::immobile(1), LocalMechanism::zero(1), nl);
        let f = TestFunction::constant(1, 1.0).unwrap();
        let field = solve_u(&spec, &f, 1.0, &SolverConfig::default()).unwrap();
        assert!((field.final_values()[0] - (-0.5f64).exp()).abs() < 1e-8);
    }

    #[test]
    fn excessive_gap_examples() {
        let cfg = SolverConfig::default();
        let times: Vec<f64> = (0..=20).map(|i| i as f64 * 0.1).collect();

        let spec = critical_swap();
        let f = TestFunction::new(vec![1.0, 0.5]).unwrap();
        assert!(excessive_gap(&spec, &f, &times, &cfg).unwrap() <= 1e-12);

        let drift = spec_with(
            1,
            MotionGenerator::immobile(1),
            LocalMechanism::new(vec![1.0], vec![0.0], vec![Vec::new()]).unwrap(),
            NonlocalMechanism::none(1),
        );
        let f1 = TestFunction::constant(1, 1.0).unwrap();
        let gap = excessive_gap(&drift, &f1, &times, &cfg).unwrap();
        assert!(gap <= 1e-12, "gap {gap}");
    }

    #[test]
    fn linearity_of_t() {
        let spec = critical_swap();
        let cfg = SolverConfig::default();
        let f = TestFunction::new(vec![0.7, 0.2]).unwrap();
        let g = TestFunction::new(vec![0.1, 1.3]).unwrap();
        let (alpha, gamma) = (0.6, 1.7);
        let combo = TestFunction::new(
            f.values()
                .iter()
                .zip(g.values())
                .map(|(a, b)| alpha * a + gamma * b)
                .collect(),
        )
        .unwrap();
        let tf = solve_t(&spec, &f, 1.0, &cfg).unwrap();
        let tg = solve_t(&spec, &g, 1.0, &cfg).unwrap();
        let tc = solve_t(&spec, &combo, 1.0, &cfg).unwrap();
        for ((a, b), c) in tf
            .final_values()
            .iter()
            .zip(tg.final_values())
            .zip(tc.final_values())
        {
            assert!((alpha * a + gamma * b - c).abs() < 1e-10);
        }
    }

    #[test]
    fn t_semigroup_law() {
        let spec = critical_swap();
        let cfg = SolverConfig::default();
        let f = TestFunction::new(vec![1.0, 0.0]).unwrap();
        let through = solve_t(&spec, &f, 1.0, &cfg).unwrap();
        let first = solve_t(&spec, &f, 0.4, &cfg).unwrap();
        let g = TestFunction::new(first.final_values().to_vec()).unwrap();
        let second = solve_t(&spec, &g, 0.6, &cfg).unwrap();
        let residual: f64 = through
            .final_values()
            .iter()
            .zip(second.final_values())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(residual <= 1e-8);
    }

    #[test]
    fn cumulant_linearizes_to_moment() {
        let spec = critical_swap();
        let cfg = SolverConfig::default();
        let f = TestFunction::new(vec![1.0, 0.5]).unwrap();
        let theta = 1e-5;
        let scaled = TestFunction::new(f.values().iter().map(|v| v * theta).collect()).unwrap();
        let v = solve_cumulant(&spec, &scaled, 1.0, &cfg).unwrap();
        let t = solve_t(&spec, &f, 1.0, &cfg).unwrap();
        let gap: f64 = v
            .final_values()
            .iter()
            .zip(t.final_values())
            .fold(0.0f64, |m, (a, b)| m.max((a / theta - b).abs()));
        assert!(gap <= 1e-3 * f.sup_norm(), "gap {gap}");
    }

    #[test]
    fn age_moment_examples() {
        // beta = 0: pure transport with killing.
        let f = |a: f64| 1.0 + a;
        let grid =
            solve_age_moment(0.0, &AgeProfile::Constant(1.0), 1.0, 2.0, &f, 1.0, 0.25).unwrap();
        assert_eq!(grid.at(1.0, 0.5).unwrap(), f(1.5));
        assert_eq!(grid.at(1.0, 1.5).unwrap(), 0.0); // reaches L = 2 exactly

        // m = 0: no reproduction mass even with a positive rate.
        let grid =
            solve_age_moment(0.7, &AgeProfile::Constant(1.0), 0.0, 2.0, &f, 1.0, 0.25).unwrap();
        assert_eq!(grid.at(1.0, 0.5).unwrap(), f(1.5));

        // constant rate, m = 1, infinite lifetime: e^{beta t}.
        let grid = solve_age_moment(
            0.5,
            &AgeProfile::Constant(1.0),
            1.0,
            f64::INFINITY,
            &|_| 1.0,
            1.0,
            1e-3,
        )
        .unwrap();
        assert!((grid.at(1.0, 0.0).unwrap() - 0.5f64.exp()).abs() < 1e-4);
    }
}
