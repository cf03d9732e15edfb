//! Constructors for the derived models: rebirth, k-type, controlled
//! immigration, mass-structured, multilevel and age-reproduction systems,
//! plus the aggregation maps that collapse their structure coordinates.
//!
//! Every constructor output passes the full mechanism validation, so a model
//! assembled here can be fed straight into the simulator and the solvers.

pub mod multilevel;

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::Population;
use crate::mechanism::{
    AgeConfig, AgeProfile, DisplacementComponent, LimitSystemSpec, LocalMechanism, MassFlow,
    MassLocal, MechanismError, MotionGenerator, NonlocalMechanism, ScalarMechanism, SiteMeasure,
    SiteSpace,
};

type Result<T> = core::result::Result<T, MechanismError>;

// ---------------------------------------------------------------------------
// k-type
// ---------------------------------------------------------------------------

/// One type of a k-type system: its own motion, local mechanism and
/// non-local data on the shared base space. Displaced offspring keep the
/// parent's position and change type according to `transitions`.
#[derive(Debug, Clone, PartialEq)]
pub struct TypeComponent {
    pub motion: MotionGenerator,
    pub local: LocalMechanism,
    pub beta: Vec<f64>,
    pub zeta: ScalarMechanism,
    pub transitions: Vec<f64>,
}

/// Flatten per-type data onto the product space `E x {types}`: the motion is
/// block-diagonal in types, and the displacement at `(x, i)` puts mass
/// `p^{(i)}_j` on `(x, j)`.
pub fn make_ktype(base: &SiteSpace, components: &[TypeComponent]) -> Result<LimitSystemSpec> {
    let kappa = components.len();
    if kappa == 0 {
        return Err(MechanismError::Invalid {
            what: "k-type system",
            detail: String::from("needs at least one type"),
        });
    }
    let nb = base.len();
    for (i, comp) in components.iter().enumerate() {
        for (what, got) in [
            ("type motion", comp.motion.n_sites()),
            ("type local mechanism", comp.local.n_sites()),
            ("type beta", comp.beta.len()),
        ] {
            if got != nb {
                return Err(MechanismError::Dimension {
                    what,
                    expected: nb,
                    got,
                });
            }
        }
        if comp.transitions.len() != kappa {
            return Err(MechanismError::Dimension {
                what: "type transition pmf",
                expected: kappa,
                got: comp.transitions.len(),
            });
        }
        let sum: f64 = comp.transitions.iter().sum();
        if (sum - 1.0).abs() > 1e-12 {
            return Err(MechanismError::Invalid {
                what: "type transition pmf",
                detail: format!("type {i} pmf sums to {sum}"),
            });
        }
    }

    let space = SiteSpace::product(
        base.labels().to_vec(),
        (0..kappa).map(|i| format!("t{i}")).collect(),
    )?;
    let n = space.len();

    let mut qmatrix = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut jumps = vec![Vec::new(); n];
    let mut beta = vec![0.0; n];
    let mut mixtures = vec![Vec::new(); n];

    for (i, comp) in components.iter().enumerate() {
        for x in 0..nb {
            let flat = i * nb + x;
            for y in 0..nb {
                qmatrix[flat][i * nb + y] = comp.motion.qmatrix()[x][y];
            }
            b[flat] = comp.local.drift(x);
            c[flat] = comp.local.diffusion(x);
            jumps[flat] = comp.local.atoms(x).to_vec();
            beta[flat] = comp.beta[x];

            let mut pi = vec![0.0; n];
            for (j, &p) in comp.transitions.iter().enumerate() {
                pi[j * nb + x] = p;
            }
            mixtures[flat] = vec![DisplacementComponent {
                weight: 1.0,
                pi,
                deterministic: comp.zeta.deterministic,
                counts: comp.zeta.counts.clone(),
            }];
        }
    }

    LimitSystemSpec::new(
        space,
        MotionGenerator::new(qmatrix)?,
        LocalMechanism::new(b, c, jumps)?,
        NonlocalMechanism::new(beta, mixtures)?,
    )
}

// ---------------------------------------------------------------------------
// Rebirth
// ---------------------------------------------------------------------------

/// Rebirth system: the local mechanism is forced to the canonical reduction
/// `b = -beta`, `c = 0`, no atoms, and the rebirth flag is set.
pub fn make_rebirth(
    space: SiteSpace,
    motion: MotionGenerator,
    beta: Vec<f64>,
    mixtures: Vec<Vec<DisplacementComponent>>,
) -> Result<LimitSystemSpec> {
    let local = LocalMechanism::new(
        beta.iter().map(|b| -b).collect(),
        vec![0.0; beta.len()],
        vec![Vec::new(); beta.len()],
    )?;
    let nonlocal = NonlocalMechanism::new(beta, mixtures)?;
    LimitSystemSpec::new(space, motion, local, nonlocal)?.with_rebirth()
}

// ---------------------------------------------------------------------------
// Controlled immigration
// ---------------------------------------------------------------------------

/// Superprocess-controlled immigration: standalone specs for the coupled
/// solver plus the flattened 2-type spec that realizes the same law as a
/// particle system.
///
/// In the flattened system the controlling type gets local mechanism
/// `phi1(z) - z` (a unit drift shift) and unit-rate non-local branching that
/// places a single offspring at the same base site in the controlled type,
/// so the controlling marginal stays the `phi1` superprocess while its mass
/// drives the controlled population's immigration.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlledImmigration {
    pub spec1: LimitSystemSpec,
    pub spec2: LimitSystemSpec,
    pub flattened: LimitSystemSpec,
}

pub fn make_controlled_immigration(
    base: &SiteSpace,
    motion1: MotionGenerator,
    motion2: MotionGenerator,
    local1: LocalMechanism,
    local2: LocalMechanism,
) -> Result<ControlledImmigration> {
    let nb = base.len();
    let spec1 = LimitSystemSpec::new(
        base.clone(),
        motion1.clone(),
        local1.clone(),
        NonlocalMechanism::none(nb),
    )?;
    let spec2 = LimitSystemSpec::new(
        base.clone(),
        motion2.clone(),
        local2.clone(),
        NonlocalMechanism::none(nb),
    )?;

    let space = SiteSpace::product(
        base.labels().to_vec(),
        vec![String::from("ctrl"), String::from("imm")],
    )?;
    let n = space.len();
    let mut qmatrix = vec![vec![0.0; n]; n];
    let mut b = vec![0.0; n];
    let mut c = vec![0.0; n];
    let mut jumps = vec![Vec::new(); n];
    let mut beta = vec![0.0; n];
    let mut mixtures = vec![Vec::new(); n];
    for x in 0..nb {
        for y in 0..nb {
            qmatrix[x][y] = motion1.qmatrix()[x][y];
            qmatrix[nb + x][nb + y] = motion2.qmatrix()[x][y];
        }
        // controlling type: phi1(z) - z and unit-rate displacement into the
        // controlled type at the same base site
        b[x] = local1.drift(x) - 1.0;
        c[x] = local1.diffusion(x);
        jumps[x] = local1.atoms(x).to_vec();
        beta[x] = 1.0;
        let mut pi = vec![0.0; n];
        pi[nb + x] = 1.0;
        mixtures[x] = vec![DisplacementComponent {
            weight: 1.0,
            pi,
            deterministic: 1.0,
            counts: Vec::new(),
        }];
        // controlled type: purely local phi2
        b[nb + x] = local2.drift(x);
        c[nb + x] = local2.diffusion(x);
        jumps[nb + x] = local2.atoms(x).to_vec();
    }
    let flattened = LimitSystemSpec::new(
        space,
        MotionGenerator::new(qmatrix)?,
        LocalMechanism::new(b, c, jumps)?,
        NonlocalMechanism::new(beta, mixtures)?,
    )?;
    Ok(ControlledImmigration {
        spec1,
        spec2,
        flattened,
    })
}

// ---------------------------------------------------------------------------
// Mass-structured
// ---------------------------------------------------------------------------

/// Mass-structured system: deterministic flow `g(t, a) = a e^{growth t}`,
/// offspring mass = parent mass at the branch time times `mass_factor`.
#[derive(Debug, Clone, PartialEq)]
pub struct MassStructured {
    /// Spec for the particle engine, local mechanism frozen at
    /// `initial_mass`.
    pub sim_spec: LimitSystemSpec,
    /// Mass-dependent mechanism for the inhomogeneous solver.
    pub mass_local: MassLocal,
    pub flow: MassFlow,
    pub initial_mass: f64,
}

/// Build the bundle. Event rates in the exact simulator are constant per
/// site, so when the local mechanism actually depends on mass the flow must
/// keep masses at `initial_mass` (`growth = 0`, `mass_factor = 1`); the
/// varying-mass case is covered by [`crate::cumulant::solve_inhomogeneous_mass`].
pub fn make_mass_structured(
    space: SiteSpace,
    motion: MotionGenerator,
    mass_factor: f64,
    growth: f64,
    mass_local: MassLocal,
    initial_mass: f64,
) -> Result<MassStructured> {
    let flow = MassFlow::new(growth, mass_factor)?;
    if !(initial_mass > 0.0) {
        return Err(MechanismError::Invalid {
            what: "initial mass",
            detail: format!("must be > 0, got {initial_mass}"),
        });
    }
    if !mass_local.is_mass_independent() && (growth != 0.0 || mass_factor != 1.0) {
        return Err(MechanismError::Invalid {
            what: "mass-structured simulation",
            detail: String::from(
                "mass-dependent local rates require constant masses (growth 0, factor 1); \
                 use the inhomogeneous solver for flowing masses",
            ),
        });
    }
    let n = space.len();
    let frozen = LocalMechanism::new(
        (0..n)
            .map(|x| mass_local.base.drift(x) * initial_mass.powi(mass_local.drift_power as i32))
            .collect(),
        (0..n)
            .map(|x| {
                mass_local.base.diffusion(x) * initial_mass.powi(mass_local.diffusion_power as i32)
            })
            .collect(),
        (0..n).map(|x| mass_local.base.atoms(x).to_vec()).collect(),
    )?;
    let sim_spec = LimitSystemSpec::new(
        space,
        motion.with_mass_flow(flow),
        frozen,
        NonlocalMechanism::none(n),
    )?;
    Ok(MassStructured {
        sim_spec,
        mass_local,
        flow,
        initial_mass,
    })
}

/// Aggregated measure `Y_t(B) = sum_{particles in B} weight * mass`.
pub fn aggregate_mass(pop: &Population, n_sites: usize, flow: Option<&MassFlow>) -> SiteMeasure {
    let mut values = vec![0.0; n_sites];
    for p in &pop.particles {
        values[p.site] += pop.weight * p.mass(pop.time, flow);
    }
    SiteMeasure::new(values).expect("masses are positive")
}

// ---------------------------------------------------------------------------
// Age-reproduction
// ---------------------------------------------------------------------------

/// Age-reproduction system on a singleton base space: the parent persists
/// through branch events with its reproduction count incremented, offspring
/// restart at age zero, and particles are removed when their age reaches
/// `lifetime`. Pairs with [`crate::cumulant::solve_age_renewal`].
#[derive(Debug, Clone, PartialEq)]
pub struct AgeReproduction {
    pub sim_spec: LimitSystemSpec,
    pub base_rate: f64,
    pub profile: AgeProfile,
    pub zeta: ScalarMechanism,
    pub lifetime: f64,
}

pub fn make_age_reproduction(
    base_rate: f64,
    profile: AgeProfile,
    zeta: ScalarMechanism,
    lifetime: f64,
) -> Result<AgeReproduction> {
    if !(base_rate >= 0.0) {
        return Err(MechanismError::Negative {
            what: "age branching rate",
            value: base_rate,
        });
    }
    let space = SiteSpace::new(vec![String::from("e")])?;
    let nonlocal = NonlocalMechanism::new(
        vec![base_rate],
        vec![vec![DisplacementComponent {
            weight: 1.0,
            pi: vec![1.0],
            deterministic: zeta.deterministic,
            counts: zeta.counts.clone(),
        }]],
    )?;
    let local = LocalMechanism::new(vec![-base_rate], vec![0.0], vec![Vec::new()])?;
    let age = AgeConfig::new(lifetime)?.with_rate_profile(profile.clone())?;
    let sim_spec = LimitSystemSpec::new(space, MotionGenerator::immobile(1), local, nonlocal)?
        .with_rebirth()?
        .with_age(age);
    Ok(AgeReproduction {
        sim_spec,
        base_rate,
        profile,
        zeta,
        lifetime,
    })
}
