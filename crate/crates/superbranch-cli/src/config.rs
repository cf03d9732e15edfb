//! Configuration documents: a TOML tree with an exact schema. Unknown keys
//! are hard errors, and every document is validated into core types before a
//! run starts.

use anyhow::{bail, Context, Result};
use serde::Deserialize;
use sha2::{Digest, Sha256};

use superbranch_core::cumulant::{SolveMethod, SolverConfig};
use superbranch_core::engine::SimConfig;
use superbranch_core::mechanism::{
    AgeConfig, AgeProfile, CountAtom, DisplacementComponent, JumpAtom, LimitSystemSpec,
    LocalMechanism, MassFlow, MassLocal, MotionGenerator, NonlocalMechanism, ScalarMechanism,
    SiteMeasure, SiteSpace, TestFunction,
};
use superbranch_core::zoo::multilevel::{Level2Mechanism, MultilevelModel, SampleSize};
use superbranch_core::zoo::{
    self, make_age_reproduction, make_controlled_immigration, make_ktype, make_mass_structured,
    AgeReproduction, ControlledImmigration, MassStructured, TypeComponent,
};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigDocument {
    pub space: SpaceSection,
    pub motion: Option<MotionSection>,
    pub local: Option<LocalSection>,
    pub nonlocal: Option<NonlocalSection>,
    pub flags: Option<FlagsSection>,
    pub initial: InitialSection,
    pub experiment: ExperimentSection,
    #[serde(default)]
    pub solver: SolverSection,
    pub scenario: ScenarioSection,
    pub model: Option<ModelSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpaceSection {
    pub sites: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSection {
    pub qmatrix: Vec<Vec<f64>>,
    pub mass_flow: Option<MassFlowBlock>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassFlowBlock {
    pub growth: f64,
    pub offspring_factor: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LocalSection {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    #[serde(default)]
    pub atoms: Vec<SiteAtomBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SiteAtomBlock {
    pub site: String,
    pub size: f64,
    pub intensity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlocalSection {
    pub beta: Vec<f64>,
    #[serde(default)]
    pub components: Vec<ComponentBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentBlock {
    pub site: String,
    pub weight: f64,
    pub pi: Vec<f64>,
    pub deterministic: f64,
    #[serde(default)]
    pub count_atoms: Vec<CountAtomBlock>,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountAtomBlock {
    pub size: f64,
    pub intensity: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlagsSection {
    #[serde(default)]
    pub rebirth: bool,
    pub age: Option<AgeBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeBlock {
    pub lifetime: f64,
    #[serde(default = "default_true")]
    pub track_reproduction: bool,
    pub profile: Option<ProfileBlock>,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileBlock {
    pub kind: String,
    pub value: Option<f64>,
    pub cuts: Option<Vec<f64>>,
    pub values: Option<Vec<f64>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    pub measure: Vec<f64>,
    pub mass: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub k: Vec<u64>,
    pub replicates: u32,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub master_seed: u64,
    #[serde(default = "default_sigma_budget")]
    pub sigma_budget: f64,
    #[serde(default = "default_bias_budget")]
    pub bias_budget: f64,
    pub max_events: Option<u64>,
    pub max_population: Option<usize>,
    #[serde(default)]
    pub event_log: bool,
}

fn default_sigma_budget() -> f64 {
    3.0
}

fn default_bias_budget() -> f64 {
    0.01
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverSection {
    pub step: f64,
    pub picard_tol: f64,
    pub picard_max_iter: u32,
    pub method: String,
}

impl Default for SolverSection {
    fn default() -> Self {
        Self {
            step: 1e-3,
            picard_tol: 1e-10,
            picard_max_iter: 400,
            method: "rk4-ode".into(),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub id: String,
    pub f: Vec<f64>,
    #[serde(default = "default_f_id")]
    pub f_id: String,
}

fn default_f_id() -> String {
    "f0".into()
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub name: String,
    pub types: Option<Vec<TypeBlock>>,
    pub ctrl: Option<MechBlock>,
    pub imm: Option<MechBlock>,
    pub mass: Option<MassBlock>,
    pub age_reproduction: Option<AgeModelBlock>,
    pub multilevel: Option<MultilevelBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeBlock {
    pub qmatrix: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub beta: Vec<f64>,
    pub zeta: ZetaBlock,
    pub transitions: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZetaBlock {
    pub deterministic: f64,
    #[serde(default)]
    pub count_atoms: Vec<CountAtomBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MechBlock {
    pub qmatrix: Vec<Vec<f64>>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MassBlock {
    pub factor: f64,
    pub growth: f64,
    #[serde(default)]
    pub drift_power: u32,
    #[serde(default)]
    pub diffusion_power: u32,
    pub initial_mass: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgeModelBlock {
    pub beta: f64,
    pub lifetime: f64,
    pub zeta: ZetaBlock,
    pub profile: Option<ProfileBlock>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultilevelBlock {
    pub sites: Vec<String>,
    pub level1_rate: f64,
    pub level2_beta: f64,
    pub mechanism: MultilevelMechanismBlock,
    pub carriers: u32,
    pub initial_subpop: Vec<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultilevelMechanismBlock {
    pub kind: String,
    pub sample_size: Option<u32>,
    pub keep: Option<Vec<bool>>,
}

/// Everything a run needs, validated.
pub struct LoadedConfig {
    pub model: BuiltModel,
    pub model_name: String,
    pub initial: SiteMeasure,
    pub initial_mass: Option<f64>,
    pub f: TestFunction,
    pub f_id: String,
    pub scenario_id: String,
    pub k_list: Vec<u64>,
    pub replicates: u32,
    pub master_seed: u64,
    pub sigma_budget: f64,
    pub bias_budget: f64,
    pub sim: SimConfig,
    pub solver: SolverConfig,
    pub config_hash: String,
}

pub enum BuiltModel {
    Direct(LimitSystemSpec),
    ControlledImmigration(ControlledImmigration),
    MassStructured(MassStructured),
    AgeReproduction(AgeReproduction),
    Multilevel {
        model: MultilevelModel,
        carriers: u32,
        initial_subpop: Vec<u64>,
    },
}

impl BuiltModel {
    /// Spec driving the particle engine, when one exists.
    pub fn sim_spec(&self) -> Option<&LimitSystemSpec> {
        match self {
            BuiltModel::Direct(spec) => Some(spec),
            BuiltModel::ControlledImmigration(m) => Some(&m.flattened),
            BuiltModel::MassStructured(m) => Some(&m.sim_spec),
            BuiltModel::AgeReproduction(m) => Some(&m.sim_spec),
            BuiltModel::Multilevel { .. } => None,
        }
    }
}

pub fn load(path: &std::path::Path, overrides: &Overrides) -> Result<LoadedConfig> {
    let raw = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    let doc: ConfigDocument =
        toml::from_str(&raw).with_context(|| format!("parsing config {}", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(raw.as_bytes());
    let config_hash = format!("{:x}", hasher.finalize());
    build(doc, config_hash, overrides)
}

#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub replicates: Option<u32>,
    pub k: Vec<u64>,
    pub method: Option<String>,
}

fn profile_from(block: &ProfileBlock) -> Result<AgeProfile> {
    match block.kind.as_str() {
        "constant" => Ok(AgeProfile::Constant(
            block.value.context("constant profile needs `value`")?,
        )),
        "steps" => Ok(AgeProfile::Steps {
            cuts: block.cuts.clone().context("steps profile needs `cuts`")?,
            values: block
                .values
                .clone()
                .context("steps profile needs `values`")?,
        }),
        other => bail!("unknown age profile kind `{other}` (constant | steps)"),
    }
}

fn count_atoms_from(blocks: &[CountAtomBlock]) -> Vec<CountAtom> {
    blocks
        .iter()
        .map(|a| CountAtom {
            size: a.size,
            intensity: a.intensity,
        })
        .collect()
}

fn local_from(section: &LocalSection, space: &SiteSpace) -> Result<LocalMechanism> {
    let n = space.len();
    let mut jumps = vec![Vec::new(); n];
    for atom in &section.atoms {
        let site = space
            .index_of(&atom.site)
            .with_context(|| format!("unknown site label `{}` in [local]", atom.site))?;
        jumps[site].push(JumpAtom {
            size: atom.size,
            intensity: atom.intensity,
        });
    }
    Ok(LocalMechanism::new(
        section.b.clone(),
        section.c.clone(),
        jumps,
    )?)
}

fn nonlocal_from(section: &NonlocalSection, space: &SiteSpace) -> Result<NonlocalMechanism> {
    let n = space.len();
    let mut mixtures = vec![Vec::new(); n];
    for comp in &section.components {
        let site = space
            .index_of(&comp.site)
            .with_context(|| format!("unknown site label `{}` in [nonlocal]", comp.site))?;
        mixtures[site].push(DisplacementComponent {
            weight: comp.weight,
            pi: comp.pi.clone(),
            deterministic: comp.deterministic,
            counts: count_atoms_from(&comp.count_atoms),
        });
    }
    Ok(NonlocalMechanism::new(section.beta.clone(), mixtures)?)
}

fn build(doc: ConfigDocument, config_hash: String, overrides: &Overrides) -> Result<LoadedConfig> {
    let space = SiteSpace::new(doc.space.sites.clone())?;

    let model_name;
    let built = match &doc.model {
        None => {
            model_name = "direct".to_string();
            let motion_section = doc
                .motion
                .as_ref()
                .context("direct configs need a [motion] section")?;
            let mut motion = MotionGenerator::new(motion_section.qmatrix.clone())?;
            if let Some(flow) = &motion_section.mass_flow {
                motion = motion.with_mass_flow(MassFlow::new(flow.growth, flow.offspring_factor)?);
            }
            let nonlocal = match &doc.nonlocal {
                Some(section) => nonlocal_from(section, &space)?,
                None => NonlocalMechanism::none(space.len()),
            };
            let rebirth = doc.flags.as_ref().is_some_and(|f| f.rebirth);
            let local = match &doc.local {
                Some(section) => local_from(section, &space)?,
                None if rebirth => LocalMechanism::new(
                    (0..space.len()).map(|x| -nonlocal.beta(x)).collect(),
                    vec![0.0; space.len()],
                    vec![Vec::new(); space.len()],
                )?,
                None => LocalMechanism::zero(space.len()),
            };
            let mut spec = LimitSystemSpec::new(space.clone(), motion, local, nonlocal)?;
            if rebirth {
                spec = spec.with_rebirth()?;
            }
            if let Some(age) = doc.flags.as_ref().and_then(|f| f.age.as_ref()) {
                let mut cfg = AgeConfig::new(age.lifetime)?;
                cfg.track_reproduction = age.track_reproduction;
                if let Some(profile) = &age.profile {
                    cfg = cfg.with_rate_profile(profile_from(profile)?)?;
                }
                spec = spec.with_age(cfg);
            }
            BuiltModel::Direct(spec)
        }
        Some(model) => match model.name.as_str() {
            "ktype" => {
                model_name = "ktype".into();
                let types = model
                    .types
                    .as_ref()
                    .context("ktype needs [[model.types]]")?;
                let components: Vec<TypeComponent> = types
                    .iter()
                    .map(|t| -> Result<TypeComponent> {
                        Ok(TypeComponent {
                            motion: MotionGenerator::new(t.qmatrix.clone())?,
                            local: LocalMechanism::new(
                                t.b.clone(),
                                t.c.clone(),
                                vec![Vec::new(); t.b.len()],
                            )?,
                            beta: t.beta.clone(),
                            zeta: ScalarMechanism::new(
                                t.zeta.deterministic,
                                count_atoms_from(&t.zeta.count_atoms),
                            )?,
                            transitions: t.transitions.clone(),
                        })
                    })
                    .collect::<Result<_>>()?;
                BuiltModel::Direct(make_ktype(&space, &components)?)
            }
            "rebirth" => {
                model_name = "rebirth".into();
                let motion_section = doc
                    .motion
                    .as_ref()
                    .context("rebirth needs a [motion] section")?;
                let nonlocal_section = doc
                    .nonlocal
                    .as_ref()
                    .context("rebirth needs a [nonlocal] section")?;
                let motion = MotionGenerator::new(motion_section.qmatrix.clone())?;
                let nonlocal = nonlocal_from(nonlocal_section, &space)?;
                let mixtures: Vec<Vec<DisplacementComponent>> = (0..space.len())
                    .map(|x| nonlocal.components(x).to_vec())
                    .collect();
                BuiltModel::Direct(zoo::make_rebirth(
                    space.clone(),
                    motion,
                    nonlocal_section.beta.clone(),
                    mixtures,
                )?)
            }
            "controlled-immigration" => {
                model_name = "controlled-immigration".into();
                let ctrl = model
                    .ctrl
                    .as_ref()
                    .context("controlled-immigration needs [model.ctrl]")?;
                let imm = model
                    .imm
                    .as_ref()
                    .context("controlled-immigration needs [model.imm]")?;
                let n = space.len();
                BuiltModel::ControlledImmigration(make_controlled_immigration(
                    &space,
                    MotionGenerator::new(ctrl.qmatrix.clone())?,
                    MotionGenerator::new(imm.qmatrix.clone())?,
                    LocalMechanism::new(ctrl.b.clone(), ctrl.c.clone(), vec![Vec::new(); n])?,
                    LocalMechanism::new(imm.b.clone(), imm.c.clone(), vec![Vec::new(); n])?,
                )?)
            }
            "mass-structured" => {
                model_name = "mass-structured".into();
                let mass = model
                    .mass
                    .as_ref()
                    .context("mass-structured needs [model.mass]")?;
                let motion_section = doc
                    .motion
                    .as_ref()
                    .context("mass-structured needs a [motion] section")?;
                let local_section = doc
                    .local
                    .as_ref()
                    .context("mass-structured needs a [local] section")?;
                let mass_local = MassLocal {
                    base: local_from(local_section, &space)?,
                    drift_power: mass.drift_power,
                    diffusion_power: mass.diffusion_power,
                };
                BuiltModel::MassStructured(make_mass_structured(
                    space.clone(),
                    MotionGenerator::new(motion_section.qmatrix.clone())?,
                    mass.factor,
                    mass.growth,
                    mass_local,
                    mass.initial_mass,
                )?)
            }
            "age-reproduction" => {
                model_name = "age-reproduction".into();
                let age = model
                    .age_reproduction
                    .as_ref()
                    .context("age-reproduction needs [model.age_reproduction]")?;
                if space.len() != 1 {
                    bail!("age-reproduction runs on a single-site space");
                }
                let profile = match &age.profile {
                    Some(p) => profile_from(p)?,
                    None => AgeProfile::Constant(1.0),
                };
                BuiltModel::AgeReproduction(make_age_reproduction(
                    age.beta,
                    profile,
                    ScalarMechanism::new(
                        age.zeta.deterministic,
                        count_atoms_from(&age.zeta.count_atoms),
                    )?,
                    age.lifetime,
                )?)
            }
            "multilevel" => {
                model_name = "multilevel".into();
                let ml = model
                    .multilevel
                    .as_ref()
                    .context("multilevel needs [model.multilevel]")?;
                let motion_section = doc
                    .motion
                    .as_ref()
                    .context("multilevel needs a [motion] section (island migration)")?;
                let sites = SiteSpace::new(ml.sites.clone())?;
                let mechanism = match ml.mechanism.kind.as_str() {
                    "empirical-sample" => Level2Mechanism::EmpiricalSample {
                        sample_size: SampleSize::Fixed(
                            ml.mechanism
                                .sample_size
                                .context("empirical-sample needs `sample_size`")?,
                        ),
                    },
                    "restriction" => Level2Mechanism::Restriction {
                        keep: ml
                            .mechanism
                            .keep
                            .clone()
                            .context("restriction needs `keep`")?,
                    },
                    other => bail!("unknown multilevel mechanism `{other}`"),
                };
                BuiltModel::Multilevel {
                    model: superbranch_core::zoo::multilevel::make_multilevel(
                        space.clone(),
                        sites,
                        MotionGenerator::new(motion_section.qmatrix.clone())?,
                        ml.level1_rate,
                        ml.level2_beta,
                        mechanism,
                    )?,
                    carriers: ml.carriers,
                    initial_subpop: ml.initial_subpop.clone(),
                }
            }
            other => bail!("unknown model `{other}`; run the `zoo` subcommand for the registry"),
        },
    };

    let method = overrides
        .method
        .clone()
        .unwrap_or_else(|| doc.solver.method.clone());
    let method = match method.as_str() {
        "rk4-ode" => SolveMethod::Rk4Ode,
        "picard-mild" => SolveMethod::PicardMild,
        other => bail!("unknown solver method `{other}` (rk4-ode | picard-mild)"),
    };
    let solver = SolverConfig {
        step: doc.solver.step,
        picard_tol: doc.solver.picard_tol,
        picard_max_iter: doc.solver.picard_max_iter,
        method,
    };

    let mut sim = SimConfig::new(
        doc.experiment.horizon,
        doc.experiment.snapshot_times.clone(),
    )?;
    let max_events = doc.experiment.max_events.unwrap_or(sim.max_events);
    let max_population = doc.experiment.max_population.unwrap_or(sim.max_population);
    sim = sim.with_guards(max_events, max_population)?;
    if doc.experiment.event_log {
        sim = sim.with_event_log();
    }

    let expected_sites = match &built {
        BuiltModel::Direct(spec) => spec.n_sites(),
        BuiltModel::ControlledImmigration(m) => m.flattened.n_sites(),
        BuiltModel::MassStructured(m) => m.sim_spec.n_sites(),
        BuiltModel::AgeReproduction(m) => m.sim_spec.n_sites(),
        BuiltModel::Multilevel { .. } => space.len(),
    };
    if doc.initial.measure.len() != expected_sites {
        bail!(
            "[initial].measure has {} entries, model needs {expected_sites}",
            doc.initial.measure.len()
        );
    }
    if doc.scenario.f.len() != expected_sites {
        bail!(
            "[scenario].f has {} entries, model needs {expected_sites}",
            doc.scenario.f.len()
        );
    }
    let k_list = if overrides.k.is_empty() {
        doc.experiment.k.clone()
    } else {
        overrides.k.clone()
    };
    if k_list.is_empty() {
        bail!("[experiment].k must list at least one density");
    }

    Ok(LoadedConfig {
        model: built,
        model_name,
        initial: SiteMeasure::new(doc.initial.measure.clone())?,
        initial_mass: doc.initial.mass,
        f: TestFunction::new(doc.scenario.f.clone())?,
        f_id: doc.scenario.f_id.clone(),
        scenario_id: doc.scenario.id.clone(),
        k_list,
        replicates: overrides.replicates.unwrap_or(doc.experiment.replicates),
        master_seed: overrides.seed.unwrap_or(doc.experiment.master_seed),
        sigma_budget: doc.experiment.sigma_budget,
        bias_budget: doc.experiment.bias_budget,
        sim,
        solver,
        config_hash,
    })
}
