//! Solvers for the limiting nonlinear cumulant equations on finite site
//! spaces.
//!
//! The primary integrator is fixed-step RK4 on the differential form
//! `dV/dt = Q V - phi(., V) - psi(., V)`, `V_0 = f`. The mild integral form
//! `V_t = P_t f - int_0^t P_s [phi(V_{t-s}) + psi(V_{t-s})] ds` is retained
//! as an independent route (Picard iteration with trapezoidal quadrature and
//! exact matrix-exponential propagators); the two must agree and the
//! acceptance suite checks that they do.
//!
//! Requested times must be grid-aligned. Nothing here interpolates: silent
//! interpolation would contaminate convergence measurements.

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::age_core;
pub use crate::age_core::AgeGrid;
use crate::linalg::{expm, DenseMatrix};
use crate::mechanism::{
    digest_f64s, AgeProfile, LimitSystemSpec, MassLocal, MechanismError, ParticleLaws,
    ScalarMechanism, SiteMeasure, TestFunction,
};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SolveError {
    #[error("solver configuration: {0}")]
    Config(String),
    #[error("span {span} is not an integer multiple of step {step}")]
    GridMismatch { span: f64, step: f64 },
    #[error("time {t} is not on the solver grid")]
    OffGrid { t: f64 },
    #[error("Picard iteration stopped at residual {residual} after {iterations} iterations")]
    PicardDivergence { residual: f64, iterations: u32 },
    #[error("state fell to {value} at t = {t}, site {site}; beyond the clamp tolerance, reduce the step")]
    Instability { t: f64, site: usize, value: f64 },
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

type Result<T> = core::result::Result<T, SolveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Rk4Ode,
    PicardMild,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub step: f64,
    pub picard_tol: f64,
    pub picard_max_iter: u32,
    pub method: SolveMethod,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            step: 1e-3,
            picard_tol: 1e-10,
            picard_max_iter: 400,
            method: SolveMethod::Rk4Ode,
        }
    }
}

impl SolverConfig {
    pub fn with_method(mut self, method: SolveMethod) -> Self {
        self.method = method;
        self
    }

    pub fn with_step(mut self, step: f64) -> Self {
        self.step = step;
        self
    }

    fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) {
            return Err(SolveError::Config(format!(
                "step must be > 0, got {}",
                self.step
            )));
        }
        if !(self.picard_tol > 0.0) {
            return Err(SolveError::Config(format!(
                "picard_tol must be > 0, got {}",
                self.picard_tol
            )));
        }
        Ok(())
    }
}

/// Number of steps covering `span`; errors unless `span` is an integer
/// multiple of `step` (relative slack 1e-9).
pub(crate) fn steps_for(span: f64, step: f64) -> Result<usize> {
    if span < 0.0 {
        return Err(SolveError::Config(format!("span must be >= 0, got {span}")));
    }
    let raw = span / step;
    let rounded = raw.round();
    if (raw - rounded).abs() > 1e-9 * raw.max(1.0) {
        return Err(SolveError::GridMismatch { span, step });
    }
    Ok(rounded as usize)
}

// ---------------------------------------------------------------------------
// Time-grid container
// ---------------------------------------------------------------------------

/// Values on a uniform time grid, one vector of site values per grid point.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    step: f64,
    times: Vec<f64>,
    values: Vec<Vec<f64>>,
}

impl TimeGrid {
    pub(crate) fn new(step: f64, values: Vec<Vec<f64>>) -> Self {
        let times = (0..values.len()).map(|i| i as f64 * step).collect();
        Self {
            step,
            times,
            values,
        }
    }

    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Vec<f64>] {
        &self.values
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn index_of(&self, t: f64) -> Result<usize> {
        let raw = t / self.step;
        let ix = raw.round() as usize;
        if ix >= self.times.len() || (self.times[ix] - t).abs() > 1e-9 {
            return Err(SolveError::OffGrid { t });
        }
        Ok(ix)
    }

    /// Grid-aligned lookup; no interpolation.
    pub fn at(&self, t: f64) -> Result<&[f64]> {
        Ok(&self.values[self.index_of(t)?])
    }

    pub fn final_values(&self) -> &[f64] {
        self.values.last().expect("grid is never empty")
    }

    pub fn sup_distance(&self, other: &TimeGrid) -> f64 {
        let mut best = 0.0f64;
        for (a, b) in self.values.iter().zip(other.values.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                best = best.max((x - y).abs());
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldMeta {
    pub spec_digest: u64,
    pub f_digest: u64,
    pub method: SolveMethod,
    pub step: f64,
    /// Grid points clamped from machine-scale negative values back to zero.
    pub clamped: u64,
}

/// `V_t f` on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CumulantField {
    pub grid: TimeGrid,
    pub meta: FieldMeta,
}

impl CumulantField {
    pub fn at(&self, t: f64) -> Result<&[f64]> {
        self.grid.at(t)
    }

    pub fn final_values(&self) -> &[f64] {
        self.grid.final_values()
    }
}

// ---------------------------------------------------------------------------
// Integration drivers
// ---------------------------------------------------------------------------

/// `Phi(t, v, out)` writes the nonlinear-plus-forcing part, with the sign
/// convention `dv/dt = Q v - Phi(t, v)` and mild form
/// `v(t) = P_t f - int_0^t P_s Phi(t - s, v(t - s)) ds`.
type Integrand<'a> = dyn FnMut(f64, &[f64], &mut [f64]) + 'a;

fn clamp_floor(step: f64) -> f64 {
    10.0 * step.powi(4)
}

fn clamp_state(state: &mut [f64], floor: f64, t: f64, clamped: &mut u64) -> Result<()> {
    for (site, v) in state.iter_mut().enumerate() {
        if *v < 0.0 {
            if *v >= -floor {
                *v = 0.0;
                *clamped += 1;
            } else {
                return Err(SolveError::Instability { t, site, value: *v });
            }
        }
    }
    Ok(())
}

fn rk4_grid(
    q: &DenseMatrix,
    f0: &[f64],
    steps: usize,
    h: f64,
    phi: &mut Integrand,
) -> Result<(TimeGrid, u64)> {
    let n = f0.len();
    let mut values = Vec::with_capacity(steps + 1);
    values.push(f0.to_vec());
    let mut state = f0.to_vec();
    let mut clamped = 0u64;
    let floor = clamp_floor(h);

    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut stage = vec![0.0; n];
    let mut nl = vec![0.0; n];

    let mut rhs = |t: f64, v: &[f64], out: &mut [f64], nl: &mut [f64]| {
        phi(t, v, nl);
        // out = Q v - nl
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..n {
                acc += q.at(i, j) * v[j];
            }
            out[i] = acc - nl[i];
        }
    };

    for i in 0..steps {
        let t = i as f64 * h;
        rhs(t, &state, &mut k1, &mut nl);
        for j in 0..n {
            stage[j] = state[j] + 0.5 * h * k1[j];
        }
        rhs(t + 0.5 * h, &stage, &mut k2, &mut nl);
        for j in 0..n {
            stage[j] = state[j] + 0.5 * h * k2[j];
        }
        rhs(t + 0.5 * h, &stage, &mut k3, &mut nl);
        for j in 0..n {
            stage[j] = state[j] + h * k3[j];
        }
        rhs(t + h, &stage, &mut k4, &mut nl);
        for j in 0..n {
            state[j] += h / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j]);
        }
        clamp_state(&mut state, floor, (i + 1) as f64 * h, &mut clamped)?;
        values.push(state.clone());
    }
    Ok((TimeGrid::new(h, values), clamped))
}

fn picard_grid(
    q: &DenseMatrix,
    f0: &[f64],
    steps: usize,
    h: f64,
    phi: &mut Integrand,
    tol: f64,
    max_iter: u32,
) -> Result<(TimeGrid, u64)> {
    let n = f0.len();
    // Propagator powers P_{jh} = (e^{hQ})^j are exact semigroup values.
    let p1 = expm(&q.scaled(h));
    let mut pows = Vec::with_capacity(steps + 1);
    pows.push(DenseMatrix::identity(n));
    for j in 1..=steps {
        pows.push(pows[j - 1].matmul(&p1));
    }

    // Start from the free flow P_t f.
    let mut current: Vec<Vec<f64>> = (0..=steps).map(|i| pows[i].matvec(f0)).collect();
    let mut phi_vals = vec![vec![0.0; n]; steps + 1];
    let mut propagated = vec![vec![0.0; n]; steps + 1];
    let mut residual = f64::INFINITY;

    for iter in 0..max_iter {
        for (i, value) in current.iter().enumerate() {
            phi(i as f64 * h, value, &mut phi_vals[i]);
        }
        // propagated[j][.] holds P_{jh} Phi(v(t_{i-j})) terms; recompute per i
        // by indexing phi_vals from the right.
        residual = 0.0;
        let mut next: Vec<Vec<f64>> = Vec::with_capacity(steps + 1);
        next.push(f0.to_vec());
        for i in 1..=steps {
            for j in 0..=i {
                pows[j].matvec_into(&phi_vals[i - j], &mut propagated[j]);
            }
            let mut v = pows[i].matvec(f0);
            for (site, entry) in v.iter_mut().enumerate() {
                let mut integral = 0.5 * (propagated[0][site] + propagated[i][site]);
                for j in 1..i {
                    integral += propagated[j][site];
                }
                *entry -= h * integral;
            }
            for site in 0..n {
                residual = residual.max((v[site] - current[i][site]).abs());
            }
            next.push(v);
        }
        current = next;
        if residual < tol {
            let mut clamped = 0u64;
            let floor = clamp_floor(h);
            for (i, v) in current.iter_mut().enumerate() {
                clamp_state(v, floor, i as f64 * h, &mut clamped)?;
            }
            return Ok((TimeGrid::new(h, current), clamped));
        }
        let _ = iter;
    }
    Err(SolveError::PicardDivergence {
        residual,
        iterations: max_iter,
    })
}

pub(crate) fn solve_with_integrand(
    q: &DenseMatrix,
    f0: &[f64],
    span: f64,
    config: &SolverConfig,
    phi: &mut Integrand,
) -> Result<(TimeGrid, u64)> {
    config.validate()?;
    let steps = steps_for(span, config.step)?;
    match config.method {
        SolveMethod::Rk4Ode => rk4_grid(q, f0, steps, config.step, phi),
        SolveMethod::PicardMild => picard_grid(
            q,
            f0,
            steps,
            config.step,
            phi,
            config.picard_tol,
            config.picard_max_iter,
        ),
    }
}

pub(crate) fn motion_matrix(spec: &LimitSystemSpec) -> DenseMatrix {
    let n = spec.n_sites();
    let mut q = DenseMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            q.set(i, j, spec.motion.qmatrix()[i][j]);
        }
    }
    q
}

// ---------------------------------------------------------------------------
// Public solves
// ---------------------------------------------------------------------------

/// Solve `dV/dt = Q V - phi(., V) - psi(., V)`, `V_0 = f`, on
/// `[0, horizon]`. For rebirth systems the forced local drift `b = -beta`
/// makes this exactly `dV/dt = Q V + beta zeta(., V)`; no special casing is
/// needed or done.
pub fn solve_cumulant(
    spec: &LimitSystemSpec,
    f: &TestFunction,
    horizon: f64,
    config: &SolverConfig,
) -> Result<CumulantField> {
    check_f(spec, f)?;
    let q = motion_matrix(spec);
    let local = &spec.local;
    let nonlocal = &spec.nonlocal;
    let n = spec.n_sites();
    let mut phi = |_t: f64, v: &[f64], out: &mut [f64]| {
        for x in 0..n {
            out[x] = local.phi_raw(x, v[x]) + nonlocal.psi_raw(x, v);
        }
    };
    let (grid, clamped) = solve_with_integrand(&q, f.values(), horizon, config, &mut phi)?;
    Ok(CumulantField {
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

/// Same equation with the mechanisms frozen at density `k`
/// (`phi_k`/`psi_k` in place of their limits); used to measure the
/// mechanism-level convergence order through the solver, and — fed the
/// transformed initial data `k(1 - e^{-f/k})` — to evaluate the particle
/// system's Laplace functional exactly.
///
/// For rebirth systems the finite-k local term is the retained parent's
/// `-beta_k f(x) h_k(x, ., 1 - pi(f)/k)`, not a built `phi_k` (the local
/// rate is zero there).
pub fn solve_cumulant_prelimit(
    laws: &ParticleLaws,
    spec: &LimitSystemSpec,
    f: &TestFunction,
    horizon: f64,
    config: &SolverConfig,
) -> Result<CumulantField> {
    check_f(spec, f)?;
    let q = motion_matrix(spec);
    let n = spec.n_sites();
    let rebirth = spec.rebirth();
    let mut phi = |_t: f64, v: &[f64], out: &mut [f64]| {
        for x in 0..n {
            let local = if rebirth {
                laws.rebirth_local_term_raw(x, v)
            } else {
                laws.phi_k_raw(x, v[x])
            };
            out[x] = local + laws.psi_k_raw(x, v);
        }
    };
    let (grid, clamped) = solve_with_integrand(&q, f.values(), horizon, config, &mut phi)?;
    Ok(CumulantField {
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

/// Coupled system for superprocess-controlled immigration: the controlled
/// population's cumulant `v2` solves its autonomous equation first, then the
/// controlling population's `v1` is solved with `-v2` as a source term. `v2`
/// is integrated at half step so RK4 stage times land on its grid.
pub fn solve_controlled_immigration(
    spec1: &LimitSystemSpec,
    spec2: &LimitSystemSpec,
    f1: &TestFunction,
    f2: &TestFunction,
    horizon: f64,
    config: &SolverConfig,
) -> Result<(CumulantField, CumulantField)> {
    if spec1.n_sites() != spec2.n_sites() {
        return Err(SolveError::Config(format!(
            "specs live on different spaces ({} vs {} sites)",
            spec1.n_sites(),
            spec2.n_sites()
        )));
    }
    check_f(spec1, f1)?;
    check_f(spec2, f2)?;

    let half = SolverConfig {
        step: config.step / 2.0,
        ..*config
    };
    let v2_half = solve_cumulant(spec2, f2, horizon, &half)?;

    let q1 = motion_matrix(spec1);
    let local1 = &spec1.local;
    let nonlocal1 = &spec1.nonlocal;
    let n = spec1.n_sites();
    let half_step = half.step;
    let v2_grid = &v2_half.grid;
    let mut phi = |t: f64, v: &[f64], out: &mut [f64]| {
        let ix = (t / half_step).round() as usize;
        let source = &v2_grid.values()[ix.min(v2_grid.values().len() - 1)];
        for x in 0..n {
            out[x] = local1.phi_raw(x, v[x]) + nonlocal1.psi_raw(x, v) - source[x];
        }
    };
    let (grid1, clamped) = solve_with_integrand(&q1, f1.values(), horizon, config, &mut phi)?;

    // Emit v2 on the caller's grid (every other half-grid point).
    let v2_values: Vec<Vec<f64>> = v2_half.grid.values().iter().step_by(2).cloned().collect();
    let v2 = CumulantField {
        grid: TimeGrid::new(config.step, v2_values),
        meta: FieldMeta {
            step: config.step,
            ..v2_half.meta
        },
    };
    let v1 = CumulantField {
        grid: grid1,
        meta: FieldMeta {
            spec_digest: spec1.digest(),
            f_digest: f1.digest(),
            method: config.method,
            step: config.step,
            clamped,
        },
    };
    Ok((v1, v2))
}

/// Inhomogeneous mass-structured cumulant `V^a_{r,t} f` for deterministic
/// mass flow: integrates `dU/dtau = Q U - phi(., g(t - tau, a), U)` over
/// `tau in [0, t - r]`, whose endpoint is `V^a_{r,t} f`. The returned grid is
/// indexed by `tau`.
///
/// The motion must carry a mass flow and the system must have no non-local
/// branching (the model this represents sets `beta = 0`).
pub fn solve_inhomogeneous_mass(
    spec_e: &LimitSystemSpec,
    mass_local: &MassLocal,
    a0: f64,
    r: f64,
    t: f64,
    f: &TestFunction,
    config: &SolverConfig,
) -> Result<CumulantField> {
    check_f(spec_e, f)?;
    let flow = spec_e.motion.mass_flow().copied().ok_or_else(|| {
        SolveError::Config(String::from(
            "inhomogeneous mass solve requires a motion with a mass flow",
        ))
    })?;
    if (0..spec_e.n_sites()).any(|x| spec_e.nonlocal.beta(x) > 0.0) {
        return Err(SolveError::Config(String::from(
            "inhomogeneous mass solve requires beta = 0",
        )));
    }
    if !(a0 > 0.0) {
        return Err(SolveError::Config(format!(
            "initial mass must be > 0, got {a0}"
        )));
    }
    if !(0.0 <= r && r <= t) {
        return Err(SolveError::Config(format!(
            "need 0 <= r <= t, got r = {r}, t = {t}"
        )));
    }
    let q = motion_matrix(spec_e);
    let n = spec_e.n_sites();
    let mut phi = |tau: f64, v: &[f64], out: &mut [f64]| {
        let mass = flow.eval(t - tau, a0);
        for x in 0..n {
            out[x] = mass_local.phi_at_mass(x, mass, v[x]);
        }
    };
    let (grid, clamped) = solve_with_integrand(&q, f.values(), t - r, config, &mut phi)?;
    Ok(CumulantField {
        grid,
        meta: FieldMeta {
            spec_digest: spec_e.digest(),
            f_digest: digest_f64s(f.digest(), &[a0, r, t]),
            method: config.method,
            step: config.step,
            clamped,
        },
    })
}

/// Sup-norm difference between `V^a_{r,t} f` and `V_{t-r} f(., g(r, a))`,
/// both sides computed by [`solve_inhomogeneous_mass`] on different inputs.
/// The flow semigroup makes the two coefficient paths coincide, so this
/// residual is pure integrator noise.
pub fn mass_representation_residual(
    spec_e: &LimitSystemSpec,
    mass_local: &MassLocal,
    a0: f64,
    r: f64,
    t: f64,
    f: &TestFunction,
    config: &SolverConfig,
) -> Result<f64> {
    let lhs = solve_inhomogeneous_mass(spec_e, mass_local, a0, r, t, f, config)?;
    let flow = spec_e.motion.mass_flow().copied().expect("checked above");
    let shifted = flow.eval(r, a0);
    let rhs = solve_inhomogeneous_mass(spec_e, mass_local, shifted, 0.0, t - r, f, config)?;
    let a = lhs.final_values();
    let b = rhs.final_values();
    Ok(a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

/// `exp{-mu(V_t f)}` read off the field at a grid-aligned time.
pub fn laplace_functional(mu: &SiteMeasure, field: &CumulantField, t: f64) -> Result<f64> {
    let v = field.at(t)?;
    Ok((-mu.pair(v)).exp())
}

/// `||V_{t+s} f - V_t (V_s f)||_inf` with both flows computed by the same
/// engine settings.
pub fn semigroup_residual(
    spec: &LimitSystemSpec,
    f: &TestFunction,
    s: f64,
    t: f64,
    config: &SolverConfig,
) -> Result<f64> {
    let through = solve_cumulant(spec, f, s + t, config)?;
    let first = solve_cumulant(spec, f, s, config)?;
    let v_s = TestFunction::new(first.final_values().to_vec())?;
    let second = solve_cumulant(spec, &v_s, t, config)?;
    let a = through.at(s + t)?;
    let b = second.at(t)?;
    Ok(a.iter()
        .zip(b)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs())))
}

/// Age-structured renewal equation on a singleton base space:
/// `V_t f(a) = f(a+t) 1_{a+t<L} + int_0^{(L-a)^t} beta(a+s) zeta(V_{t-s} f(0)) ds`,
/// stepped along the deterministic age flow with trapezoidal quadrature.
pub fn solve_age_renewal(
    base_rate: f64,
    profile: &AgeProfile,
    zeta: &ScalarMechanism,
    lifetime: f64,
    f: &dyn Fn(f64) -> f64,
    horizon: f64,
    step: f64,
) -> Result<AgeGrid> {
    age_core::solve_age_grid(
        base_rate,
        profile,
        age_core::AgeKernel::Nonlinear(zeta),
        lifetime,
        f,
        horizon,
        step,
    )
}

fn check_f(spec: &LimitSystemSpec, f: &TestFunction) -> Result<()> {
    if f.len() != spec.n_sites() {
        return Err(SolveError::Mechanism(MechanismError::Dimension {
            what: "test function",
            expected: spec.n_sites(),
            got: f.len(),
        }));
    }
    Ok(())
}
