//! Experiment orchestration: replicate scheduling, theoretical references,
//! and assembly of the per-subcommand artifacts.

use std::path::Path;

use anyhow::{bail, Context, Result};
use rayon::prelude::*;

use superbranch_core::cumulant::{
    laplace_functional, solve_age_renewal, solve_controlled_immigration, solve_cumulant,
    solve_inhomogeneous_mass, CumulantField,
};
use superbranch_core::engine::{
    sample_poisson_initial, simulate, EventKind, SimConfig, SimError, SimOutput,
};
use superbranch_core::mechanism::{LimitSystemSpec, ParticleLaws, SiteMeasure, TestFunction};
use superbranch_core::moment::{excessive_gap, solve_t, solve_u};
use superbranch_core::rng::RngStream;
use superbranch_core::stats::{compare, ExperimentResult};
use superbranch_core::zoo::multilevel::{simulate_multilevel, Level2Particle, Level2Population};

use crate::config::{BuiltModel, LoadedConfig};
use crate::output::{fmt_f64, write_csv, write_summary, RunSummary, TruncationNote, VerdictRow};

/// Replicate parallelism is capped by the SUPERBRANCH_THREADS environment
/// variable; results are identical under any cap because each replicate is
/// keyed by its own stream and merged by index.
fn replicate_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("SUPERBRANCH_THREADS") {
        let n: usize = v
            .parse()
            .with_context(|| format!("SUPERBRANCH_THREADS = `{v}` is not a thread count"))?;
        builder = builder.num_threads(n.max(1));
    }
    Ok(builder.build()?)
}

type EventRow = (f64, u64, usize, String);

struct ReplicateRow {
    values: Vec<Vec<f64>>,
    truncated: bool,
    events: Option<Vec<EventRow>>,
}

fn one_replicate(
    laws: &ParticleLaws,
    spec: &LimitSystemSpec,
    mu: &SiteMeasure,
    sim: &SimConfig,
    master_seed: u64,
    replicate: u64,
    initial_mass: Option<f64>,
) -> Result<SimOutput, SimError> {
    let stream = RngStream::new(master_seed, replicate);
    let mut init = sample_poisson_initial(mu, laws.k(), sim.max_population, &stream)?;
    if let Some(mass) = initial_mass {
        init = init.with_initial_mass(mass);
    }
    simulate(laws, spec, &init, sim, &stream)
}

fn event_kind_label(kind: &EventKind) -> String {
    match kind {
        EventKind::Jump { to } => format!("jump:{to}"),
        EventKind::LocalBranch { offspring } => format!("local:{offspring}"),
        EventKind::NonlocalBranch {
            component,
            offspring,
        } => format!("nonlocal:{component}:{offspring}"),
        EventKind::Thinned => "thinned".to_string(),
        EventKind::AgeDeath => "age-death".to_string(),
    }
}

fn extract_row(out: &SimOutput, functionals: &[TestFunction], keep_events: bool) -> ReplicateRow {
    ReplicateRow {
        values: out
            .snapshots
            .iter()
            .map(|pop| functionals.iter().map(|f| pop.integrate(f)).collect())
            .collect(),
        truncated: false,
        events: if keep_events {
            out.events.as_ref().map(|log| {
                log.iter()
                    .map(|e| (e.time, e.particle, e.site, event_kind_label(&e.kind)))
                    .collect()
            })
        } else {
            None
        },
    }
}

struct KRun {
    result: ExperimentResult,
    events: Vec<(u64, Vec<EventRow>)>,
}

fn run_k(cfg: &LoadedConfig, spec: &LimitSystemSpec, k: u64) -> Result<KRun> {
    let laws = spec.particle_laws(k)?;
    let functionals = [cfg.f.clone()];
    let pool = replicate_pool()?;
    let rows: Vec<Result<ReplicateRow, SimError>> = pool.install(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                match one_replicate(
                    &laws,
                    spec,
                    &cfg.initial,
                    &cfg.sim,
                    cfg.master_seed,
                    r as u64,
                    cfg.initial_mass,
                ) {
                    Ok(out) => Ok(extract_row(&out, &functionals, cfg.sim.record_events)),
                    Err(SimError::Truncated { .. }) => Ok(ReplicateRow {
                        values: Vec::new(),
                        truncated: true,
                        events: None,
                    }),
                    Err(e) => Err(e),
                }
            })
            .collect()
    });

    let mut result = ExperimentResult {
        k,
        replicates: cfg.replicates,
        master_seed: cfg.master_seed,
        times: cfg.sim.snapshot_times.clone(),
        values: vec![vec![Vec::new(); 1]; cfg.sim.snapshot_times.len()],
        truncated: Vec::new(),
    };
    let mut events = Vec::new();
    for (r, row) in rows.into_iter().enumerate() {
        let row = row?;
        if row.truncated {
            result.truncated.push(r as u32);
            continue;
        }
        for (t_ix, values) in row.values.iter().enumerate() {
            for (f_ix, v) in values.iter().enumerate() {
                result.values[t_ix][f_ix].push(*v);
            }
        }
        if let Some(log) = row.events {
            events.push((r as u64, log));
        }
    }
    Ok(KRun { result, events })
}

/// Theoretical Laplace functional `exp{-mu(V_t f)}` per snapshot time, from
/// the model's solver route.
fn theoretical_laplace(cfg: &LoadedConfig) -> Result<Vec<f64>> {
    let horizon = cfg.sim.horizon;
    let times = &cfg.sim.snapshot_times;
    match &cfg.model {
        BuiltModel::Direct(spec) => {
            let field = solve_cumulant(spec, &cfg.f, horizon, &cfg.solver)?;
            times
                .iter()
                .map(|&t| Ok(laplace_functional(&cfg.initial, &field, t)?))
                .collect()
        }
        BuiltModel::MassStructured(ms) => {
            // Counts do not feel the mass coordinate: the frozen spec is the
            // count law.
            let field = solve_cumulant(&ms.sim_spec, &cfg.f, horizon, &cfg.solver)?;
            times
                .iter()
                .map(|&t| Ok(laplace_functional(&cfg.initial, &field, t)?))
                .collect()
        }
        BuiltModel::ControlledImmigration(model) => {
            let nb = model.spec1.n_sites();
            let f1 = TestFunction::new(cfg.f.values()[..nb].to_vec())?;
            let f2 = TestFunction::new(cfg.f.values()[nb..].to_vec())?;
            let (v1, v2) = solve_controlled_immigration(
                &model.spec1,
                &model.spec2,
                &f1,
                &f2,
                horizon,
                &cfg.solver,
            )?;
            let mu1 = SiteMeasure::new(cfg.initial.values()[..nb].to_vec())?;
            let mu2 = SiteMeasure::new(cfg.initial.values()[nb..].to_vec())?;
            times
                .iter()
                .map(|&t| {
                    let a = mu1.pair(v1.at(t)?);
                    let b = mu2.pair(v2.at(t)?);
                    Ok((-(a + b)).exp())
                })
                .collect()
        }
        BuiltModel::AgeReproduction(model) => {
            // Singleton base space, all initial particles at age zero.
            let grid = solve_age_renewal(
                model.base_rate,
                &model.profile,
                &model.zeta,
                model.lifetime,
                &|_| cfg.f.value(0),
                horizon,
                cfg.solver.step,
            )?;
            times
                .iter()
                .map(|&t| Ok((-cfg.initial.total() * grid.at(t, 0.0)?).exp()))
                .collect()
        }
        BuiltModel::Multilevel { .. } => {
            bail!("no cumulant solver exists for the multilevel model; `compare` is unsupported")
        }
    }
}

pub struct Outcome {
    pub truncated: usize,
}

pub fn compare_cmd(cfg: &LoadedConfig, out_dir: &Path) -> Result<Outcome> {
    let spec = cfg
        .model
        .sim_spec()
        .context("this model has no particle-engine form to compare against")?;
    let theoretical = theoretical_laplace(cfg)?;

    let header = [
        "scenario_id",
        "model",
        "k",
        "replicates",
        "t",
        "f_id",
        "empirical",
        "stderr",
        "theoretical",
        "z_score",
        "verdict",
        "config_hash",
        "master_seed",
    ];
    let mut rows = Vec::new();
    let mut verdicts = Vec::new();
    let mut truncation = Vec::new();
    for &k in &cfg.k_list {
        let run = run_k(cfg, spec, k)?;
        if !run.result.truncated.is_empty() {
            truncation.push(TruncationNote {
                k,
                replicates: run.result.truncated.clone(),
            });
        }
        for (t_ix, &t) in cfg.sim.snapshot_times.iter().enumerate() {
            let reference = theoretical[t_ix];
            // Guards can wipe out so many replicates that no estimate exists;
            // the row is then emitted as indeterminate rather than invented.
            let Ok(summary) = run.result.laplace_summary(t_ix, 0) else {
                rows.push(vec![
                    cfg.scenario_id.clone(),
                    cfg.model_name.clone(),
                    k.to_string(),
                    cfg.replicates.to_string(),
                    fmt_f64(t),
                    cfg.f_id.clone(),
                    String::new(),
                    String::new(),
                    fmt_f64(reference),
                    String::new(),
                    "indeterminate".to_string(),
                    cfg.config_hash.clone(),
                    cfg.master_seed.to_string(),
                ]);
                continue;
            };
            let verdict = compare(&summary, reference, cfg.sigma_budget, cfg.bias_budget);
            rows.push(vec![
                cfg.scenario_id.clone(),
                cfg.model_name.clone(),
                k.to_string(),
                cfg.replicates.to_string(),
                fmt_f64(t),
                cfg.f_id.clone(),
                fmt_f64(summary.mean),
                fmt_f64(summary.stderr),
                fmt_f64(reference),
                verdict.z_score.map(fmt_f64).unwrap_or_default(),
                if verdict.pass { "pass" } else { "fail" }.to_string(),
                cfg.config_hash.clone(),
                cfg.master_seed.to_string(),
            ]);
            verdicts.push(VerdictRow {
                k,
                t,
                f_id: cfg.f_id.clone(),
                empirical: summary.mean,
                stderr: summary.stderr,
                theoretical: reference,
                z_score: verdict.z_score,
                pass: verdict.pass,
            });
        }
    }
    write_csv(&out_dir.join("compare.csv"), &header, &rows)?;
    let truncated = truncation.iter().map(|t| t.replicates.len()).sum();
    write_summary(
        &out_dir.join("summary.json"),
        &RunSummary {
            subcommand: "compare".into(),
            scenario_id: cfg.scenario_id.clone(),
            model: cfg.model_name.clone(),
            config_hash: cfg.config_hash.clone(),
            master_seed: cfg.master_seed,
            sigma_budget: cfg.sigma_budget,
            bias_budget: cfg.bias_budget,
            truncated_replicates: truncation,
            verdicts,
            notes: Vec::new(),
        },
    )?;
    Ok(Outcome { truncated })
}

pub fn simulate_cmd(cfg: &LoadedConfig, out_dir: &Path) -> Result<Outcome> {
    if let BuiltModel::Multilevel {
        model,
        carriers,
        initial_subpop,
    } = &cfg.model
    {
        return simulate_multilevel_cmd(cfg, model, *carriers, initial_subpop, out_dir);
    }
    let spec = cfg
        .model
        .sim_spec()
        .expect("non-multilevel models simulate");
    let header = [
        "scenario_id",
        "model",
        "k",
        "replicate",
        "t",
        "f_id",
        "value",
        "config_hash",
        "master_seed",
    ];
    let mut rows = Vec::new();
    let mut event_rows = Vec::new();
    let mut truncation = Vec::new();
    for &k in &cfg.k_list {
        let run = run_k(cfg, spec, k)?;
        if !run.result.truncated.is_empty() {
            truncation.push(TruncationNote {
                k,
                replicates: run.result.truncated.clone(),
            });
        }
        let mut kept = (0..cfg.replicates).filter(|r| !run.result.truncated.contains(r));
        let mut replicate_of = Vec::new();
        for _ in 0..run.result.values.first().map_or(0, |t| t[0].len()) {
            replicate_of.push(kept.next().expect("replicate bookkeeping"));
        }
        for (t_ix, &t) in run.result.times.iter().enumerate() {
            for (row_ix, value) in run.result.values[t_ix][0].iter().enumerate() {
                rows.push(vec![
                    cfg.scenario_id.clone(),
                    cfg.model_name.clone(),
                    k.to_string(),
                    replicate_of[row_ix].to_string(),
                    fmt_f64(t),
                    cfg.f_id.clone(),
                    fmt_f64(*value),
                    cfg.config_hash.clone(),
                    cfg.master_seed.to_string(),
                ]);
            }
        }
        for (replicate, log) in &run.events {
            for (time, particle, site, kind) in log {
                event_rows.push(vec![
                    k.to_string(),
                    replicate.to_string(),
                    fmt_f64(*time),
                    particle.to_string(),
                    site.to_string(),
                    kind.clone(),
                    cfg.config_hash.clone(),
                    cfg.master_seed.to_string(),
                ]);
            }
        }
    }
    write_csv(&out_dir.join("simulate.csv"), &header, &rows)?;
    if cfg.sim.record_events {
        write_csv(
            &out_dir.join("events.csv"),
            &[
                "k",
                "replicate",
                "time",
                "particle",
                "site",
                "kind",
                "config_hash",
                "master_seed",
            ],
            &event_rows,
        )?;
    }
    let truncated = truncation.iter().map(|t| t.replicates.len()).sum();
    write_summary(
        &out_dir.join("summary.json"),
        &RunSummary {
            subcommand: "simulate".into(),
            scenario_id: cfg.scenario_id.clone(),
            model: cfg.model_name.clone(),
            config_hash: cfg.config_hash.clone(),
            master_seed: cfg.master_seed,
            sigma_budget: cfg.sigma_budget,
            bias_budget: cfg.bias_budget,
            truncated_replicates: truncation,
            verdicts: Vec::new(),
            notes: Vec::new(),
        },
    )?;
    Ok(Outcome { truncated })
}

fn simulate_multilevel_cmd(
    cfg: &LoadedConfig,
    model: &superbranch_core::zoo::multilevel::MultilevelModel,
    carriers: u32,
    initial_subpop: &[u64],
    out_dir: &Path,
) -> Result<Outcome> {
    let header = [
        "scenario_id",
        "model",
        "k",
        "replicate",
        "t",
        "f_id",
        "value",
        "config_hash",
        "master_seed",
    ];
    let mut rows = Vec::new();
    let mut notes = Vec::new();
    let mut truncated_list = Vec::new();
    // Aggregated level-1 total mass as the reported functional.
    for r in 0..cfg.replicates {
        let stream = RngStream::new(cfg.master_seed, r as u64);
        let init = Level2Population {
            time: 0.0,
            weight: 1.0,
            particles: (0..carriers as u64)
                .map(|id| Level2Particle {
                    id,
                    island: 0,
                    birth_time: 0.0,
                    sub: superbranch_core::zoo::multilevel::SubPopulation::new(
                        initial_subpop.to_vec(),
                    ),
                })
                .collect(),
        };
        match simulate_multilevel(model, &init, &cfg.sim, &stream) {
            Ok(out) => {
                for snap in &out.snapshots {
                    let total: u64 = snap.particles.iter().map(|p| p.sub.total()).sum();
                    rows.push(vec![
                        cfg.scenario_id.clone(),
                        cfg.model_name.clone(),
                        "1".to_string(),
                        r.to_string(),
                        fmt_f64(snap.time),
                        "aggregate-total".to_string(),
                        fmt_f64(total as f64),
                        cfg.config_hash.clone(),
                        cfg.master_seed.to_string(),
                    ]);
                }
                if out.suppressed_offspring > 0 {
                    notes.push(format!(
                        "replicate {r}: {} offspring suppressed (empty restriction)",
                        out.suppressed_offspring
                    ));
                }
            }
            Err(SimError::Truncated { .. }) => truncated_list.push(r),
            Err(e) => return Err(e.into()),
        }
    }
    write_csv(&out_dir.join("simulate.csv"), &header, &rows)?;
    let truncated = truncated_list.len();
    write_summary(
        &out_dir.join("summary.json"),
        &RunSummary {
            subcommand: "simulate".into(),
            scenario_id: cfg.scenario_id.clone(),
            model: cfg.model_name.clone(),
            config_hash: cfg.config_hash.clone(),
            master_seed: cfg.master_seed,
            sigma_budget: cfg.sigma_budget,
            bias_budget: cfg.bias_budget,
            truncated_replicates: vec![TruncationNote {
                k: 1,
                replicates: truncated_list,
            }],
            verdicts: Vec::new(),
            notes,
        },
    )?;
    Ok(Outcome { truncated })
}

fn field_rows(
    cfg: &LoadedConfig,
    label: &str,
    field: &CumulantField,
    labels: &[String],
    rows: &mut Vec<Vec<String>>,
) {
    for (t_ix, &t) in field.grid.times().iter().enumerate() {
        for (site, value) in field.grid.values()[t_ix].iter().enumerate() {
            rows.push(vec![
                cfg.scenario_id.clone(),
                cfg.model_name.clone(),
                method_name(cfg),
                label.to_string(),
                fmt_f64(t),
                labels[site].clone(),
                fmt_f64(*value),
                cfg.config_hash.clone(),
                cfg.master_seed.to_string(),
            ]);
        }
    }
}

fn method_name(cfg: &LoadedConfig) -> String {
    match cfg.solver.method {
        superbranch_core::cumulant::SolveMethod::Rk4Ode => "rk4-ode".into(),
        superbranch_core::cumulant::SolveMethod::PicardMild => "picard-mild".into(),
    }
}

pub fn solve_cmd(cfg: &LoadedConfig, out_dir: &Path) -> Result<Outcome> {
    let header = [
        "scenario_id",
        "model",
        "method",
        "field",
        "t",
        "site",
        "value",
        "config_hash",
        "master_seed",
    ];
    let mut rows = Vec::new();
    match &cfg.model {
        BuiltModel::Direct(spec) => {
            let field = solve_cumulant(spec, &cfg.f, cfg.sim.horizon, &cfg.solver)?;
            field_rows(cfg, "v", &field, spec.space.labels(), &mut rows);
        }
        BuiltModel::ControlledImmigration(model) => {
            let nb = model.spec1.n_sites();
            let f1 = TestFunction::new(cfg.f.values()[..nb].to_vec())?;
            let f2 = TestFunction::new(cfg.f.values()[nb..].to_vec())?;
            let (v1, v2) = solve_controlled_immigration(
                &model.spec1,
                &model.spec2,
                &f1,
                &f2,
                cfg.sim.horizon,
                &cfg.solver,
            )?;
            field_rows(cfg, "v1", &v1, model.spec1.space.labels(), &mut rows);
            field_rows(cfg, "v2", &v2, model.spec2.space.labels(), &mut rows);
        }
        BuiltModel::MassStructured(ms) => {
            let field = solve_inhomogeneous_mass(
                &ms.sim_spec,
                &ms.mass_local,
                ms.initial_mass,
                0.0,
                cfg.sim.horizon,
                &cfg.f,
                &cfg.solver,
            )?;
            field_rows(cfg, "v", &field, ms.sim_spec.space.labels(), &mut rows);
        }
        BuiltModel::AgeReproduction(model) => {
            let grid = solve_age_renewal(
                model.base_rate,
                &model.profile,
                &model.zeta,
                model.lifetime,
                &|_| cfg.f.value(0),
                cfg.sim.horizon,
                cfg.solver.step,
            )?;
            for (t_ix, &t) in grid.times().iter().enumerate() {
                for (a_ix, &a) in grid.ages().iter().enumerate() {
                    rows.push(vec![
                        cfg.scenario_id.clone(),
                        cfg.model_name.clone(),
                        method_name(cfg),
                        "age".to_string(),
                        fmt_f64(t),
                        fmt_f64(a),
                        fmt_f64(grid.value(t_ix, a_ix)),
                        cfg.config_hash.clone(),
                        cfg.master_seed.to_string(),
                    ]);
                }
            }
        }
        BuiltModel::Multilevel { .. } => {
            bail!("no cumulant solver exists for the multilevel model; `solve` is unsupported")
        }
    }
    write_csv(&out_dir.join("solve.csv"), &header, &rows)?;
    write_summary(
        &out_dir.join("summary.json"),
        &RunSummary {
            subcommand: "solve".into(),
            scenario_id: cfg.scenario_id.clone(),
            model: cfg.model_name.clone(),
            config_hash: cfg.config_hash.clone(),
            master_seed: cfg.master_seed,
            sigma_budget: cfg.sigma_budget,
            bias_budget: cfg.bias_budget,
            truncated_replicates: Vec::new(),
            verdicts: Vec::new(),
            notes: Vec::new(),
        },
    )?;
    Ok(Outcome { truncated: 0 })
}

pub fn moments_cmd(cfg: &LoadedConfig, out_dir: &Path) -> Result<Outcome> {
    let spec = match &cfg.model {
        BuiltModel::Direct(spec) => spec,
        BuiltModel::MassStructured(ms) => &ms.sim_spec,
        _ => bail!("`moments` supports direct(-like) models only"),
    };
    let t_field = solve_t(spec, &cfg.f, cfg.sim.horizon, &cfg.solver)?;
    let u_field = solve_u(spec, &cfg.f, cfg.sim.horizon, &cfg.solver)?;
    let gap = excessive_gap(spec, &cfg.f, &cfg.sim.snapshot_times, &cfg.solver)?;

    let header = [
        "scenario_id",
        "model",
        "t",
        "site",
        "first_moment",
        "driftless_moment",
        "config_hash",
        "master_seed",
    ];
    let mut rows = Vec::new();
    for (t_ix, &t) in t_field.grid.times().iter().enumerate() {
        for site in 0..spec.n_sites() {
            rows.push(vec![
                cfg.scenario_id.clone(),
                cfg.model_name.clone(),
                fmt_f64(t),
                spec.space.label(site).to_string(),
                fmt_f64(t_field.grid.values()[t_ix][site]),
                fmt_f64(u_field.grid.values()[t_ix][site]),
                cfg.config_hash.clone(),
                cfg.master_seed.to_string(),
            ]);
        }
    }
    write_csv(&out_dir.join("moments.csv"), &header, &rows)?;
    write_summary(
        &out_dir.join("summary.json"),
        &RunSummary {
            subcommand: "moments".into(),
            scenario_id: cfg.scenario_id.clone(),
            model: cfg.model_name.clone(),
            config_hash: cfg.config_hash.clone(),
            master_seed: cfg.master_seed,
            sigma_budget: cfg.sigma_budget,
            bias_budget: cfg.bias_budget,
            truncated_replicates: Vec::new(),
            verdicts: Vec::new(),
            notes: vec![format!("excessive_gap = {}", fmt_f64(gap))],
        },
    )?;
    Ok(Outcome { truncated: 0 })
}

/// Stable, alphabetized model registry with the config keys each expects.
pub fn zoo_listing() -> String {
    let entries = [
        (
            "age-reproduction",
            "[model.age_reproduction]: beta, lifetime, zeta {deterministic, count_atoms}, profile (constant | steps); single-site [space]",
        ),
        (
            "controlled-immigration",
            "[model.ctrl] and [model.imm]: qmatrix, b, c; [initial]/[scenario] flattened over (ctrl, imm) types",
        ),
        (
            "ktype",
            "[[model.types]]: qmatrix, b, c, beta, zeta {deterministic, count_atoms}, transitions; [space] is the base space",
        ),
        (
            "mass-structured",
            "[model.mass]: factor, growth, drift_power, diffusion_power, initial_mass; plus [motion] and [local]",
        ),
        (
            "multilevel",
            "[model.multilevel]: sites, level1_rate, level2_beta, mechanism {kind = empirical-sample | restriction, ...}, carriers, initial_subpop; [motion] moves carriers between islands",
        ),
        (
            "rebirth",
            "[nonlocal] (beta, components) and [motion]; the local mechanism is derived as b = -beta",
        ),
    ];
    let mut out = String::new();
    for (name, schema) in entries {
        out.push_str(name);
        out.push_str("\n    ");
        out.push_str(schema);
        out.push('\n');
    }
    out
}
