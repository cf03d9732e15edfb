//! Exact event-driven simulation of the branching particle systems.
//!
//! Particles do not interact, so each one carries its own exponential clock
//! at its current total rate (motion jumps plus the dominating branching
//! rate). A min-heap over `(time, id, seq)` orders the events; stale heap
//! entries are invalidated lazily through a per-particle clock sequence
//! number. Age-dependent branching rates are realized by thinning against
//! the declared dominating rate, and deterministic lifetime removals are
//! scheduled alongside the stochastic clocks, so the realization stays
//! exact: the only approximations left in any comparison are finite `k` and
//! finite replicate count.
//!
//! Every random draw a particle makes comes from its own counter-derived
//! stream keyed by `(master_seed, replicate, particle id)`, consumed in
//! event order, so results are bitwise reproducible under any replicate
//! parallelism (see [`crate::rng`]).

#[cfg(not(feature = "std"))]
use num_traits::Float;

use alloc::boxed::Box;
use alloc::collections::BinaryHeap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::mechanism::{
    LimitSystemSpec, MassFlow, MechanismError, ParticleLaws, SiteMeasure, TestFunction,
};
use crate::rng::{domain, RngStream, StreamRng};
use crate::stats::ExperimentResult;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SimError {
    #[error("initial population time must be 0, got {t}")]
    InitialTime { t: f64 },
    #[error("initial weight {init} does not match the laws' 1/k = {laws}")]
    WeightMismatch { init: f64, laws: f64 },
    #[error(
        "expected initial intensity {expected} particles overflows the population guard {guard}"
    )]
    InitialIntensityGuard { expected: f64, guard: usize },
    #[error("simulation truncated by the {reason} guard at t = {at_time}")]
    Truncated {
        reason: TruncationReason,
        at_time: f64,
        /// Snapshots taken before the guard tripped.
        partial: Box<SimOutput>,
    },
    #[error("thinning factor {factor} at site {site} exceeds 1: dominating rate too small")]
    ThinningResidual { site: usize, factor: f64 },
    #[error("snapshot time {t} not found in the output")]
    MissingSnapshot { t: f64 },
    #[error("simulation config: {0}")]
    Config(String),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TruncationReason {
    MaxEvents,
    MaxPopulation,
}

impl core::fmt::Display for TruncationReason {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            TruncationReason::MaxEvents => write!(f, "max-events"),
            TruncationReason::MaxPopulation => write!(f, "max-population"),
        }
    }
}

type Result<T> = core::result::Result<T, SimError>;

// ---------------------------------------------------------------------------
// Populations
// ---------------------------------------------------------------------------

/// One particle of a weighted atomic measure. Flow coordinates are derived:
/// age is `now - birth_time`, mass is the flow applied to `birth_mass`.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub id: u64,
    pub site: usize,
    pub birth_time: f64,
    pub birth_mass: f64,
    pub repro_count: u32,
}

impl Particle {
    pub fn age(&self, now: f64) -> f64 {
        now - self.birth_time
    }

    pub fn mass(&self, now: f64, flow: Option<&MassFlow>) -> f64 {
        match flow {
            Some(g) => g.eval(now - self.birth_time, self.birth_mass),
            None => self.birth_mass,
        }
    }
}

/// Weighted atomic measure `X_t = weight * sum delta_{site}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub time: f64,
    pub weight: f64,
    pub particles: Vec<Particle>,
}

impl Population {
    /// Population at time zero with the given per-site counts, unit masses
    /// and sequential ids.
    pub fn from_counts(counts: &[u64], weight: f64) -> Self {
        let mut particles = Vec::new();
        let mut id = 0u64;
        for (site, &c) in counts.iter().enumerate() {
            for _ in 0..c {
                particles.push(Particle {
                    id,
                    site,
                    birth_time: 0.0,
                    birth_mass: 1.0,
                    repro_count: 0,
                });
                id += 1;
            }
        }
        Self {
            time: 0.0,
            weight,
            particles,
        }
    }

    pub fn with_initial_mass(mut self, mass: f64) -> Self {
        for p in &mut self.particles {
            p.birth_mass = mass;
        }
        self
    }

    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }

    /// `X_t(f) = weight * sum_p f(site_p)`.
    pub fn integrate(&self, f: &TestFunction) -> f64 {
        let sum: f64 = self.particles.iter().map(|p| f.value(p.site)).sum();
        self.weight * sum
    }

    /// `X_t(1)`.
    pub fn total_mass(&self) -> f64 {
        self.weight * self.particles.len() as f64
    }

    pub fn site_counts(&self, n_sites: usize) -> Vec<u64> {
        let mut counts = vec![0u64; n_sites];
        for p in &self.particles {
            counts[p.site] += 1;
        }
        counts
    }
}

// ---------------------------------------------------------------------------
// Configuration and output
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub max_events: u64,
    pub max_population: usize,
    pub record_events: bool,
}

impl SimConfig {
    pub fn new(horizon: f64, snapshot_times: Vec<f64>) -> Result<Self> {
        if !(horizon >= 0.0) {
            return Err(SimError::Config(format!(
                "horizon must be >= 0, got {horizon}"
            )));
        }
        if snapshot_times.windows(2).any(|w| w[0] > w[1]) {
            return Err(SimError::Config(String::from(
                "snapshot times must be sorted",
            )));
        }
        if snapshot_times.iter().any(|&t| t < 0.0 || t > horizon) {
            return Err(SimError::Config(String::from(
                "snapshot times must lie in [0, horizon]",
            )));
        }
        Ok(Self {
            horizon,
            snapshot_times,
            max_events: 1_000_000_000,
            max_population: 10_000_000,
            record_events: false,
        })
    }

    pub fn with_guards(mut self, max_events: u64, max_population: usize) -> Result<Self> {
        if max_events == 0 || max_population == 0 {
            return Err(SimError::Config(String::from("guards must be positive")));
        }
        self.max_events = max_events;
        self.max_population = max_population;
        Ok(self)
    }

    pub fn with_event_log(mut self) -> Self {
        self.record_events = true;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum EventKind {
    Jump {
        to: usize,
    },
    LocalBranch {
        offspring: u32,
    },
    NonlocalBranch {
        component: u32,
        offspring: u32,
    },
    /// Non-local clock fired but the age-thinning rejected it.
    Thinned,
    AgeDeath,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub particle: u64,
    pub site: usize,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub snapshots: Vec<Population>,
    pub n_events: u64,
    /// Present when `record_events` is set.
    pub events: Option<Vec<EventRecord>>,
    /// Per-site occupation integral `int_0^horizon N_x(s) ds` (particle
    /// counts, not renormalized mass).
    pub site_occupancy: Vec<f64>,
    /// Accepted non-local branch events per parent site.
    pub nonlocal_event_counts: Vec<u64>,
}

// ---------------------------------------------------------------------------
// Initial conditions
// ---------------------------------------------------------------------------

/// Poisson initial condition: independent `Poisson(k mu(x))` particles per
/// site, weight `1/k`, deterministic given the stream.
pub fn sample_poisson_initial(
    mu: &SiteMeasure,
    k: u64,
    max_population: usize,
    stream: &RngStream,
) -> Result<Population> {
    let expected = k as f64 * mu.total();
    if expected > max_population as f64 {
        return Err(SimError::InitialIntensityGuard {
            expected,
            guard: max_population,
        });
    }
    let mut counts = Vec::with_capacity(mu.len());
    for site in 0..mu.len() {
        let lambda = k as f64 * mu.mass(site);
        let mut rng = stream.substream(domain::INIT, site as u64);
        counts.push(rng.poisson(lambda));
    }
    Ok(Population::from_counts(&counts, 1.0 / k as f64))
}

// ---------------------------------------------------------------------------
// Event-driven engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
struct EventKey {
    time: f64,
    id: u64,
    seq: u32,
}

impl Eq for EventKey {}

impl PartialOrd for EventKey {
    fn partial_cmp(&self, other: &Self) -> Option<core::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for EventKey {
    fn cmp(&self, other: &Self) -> core::cmp::Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.id.cmp(&other.id))
            .then_with(|| self.seq.cmp(&other.seq))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ClockKind {
    Stochastic,
    AgeDeath,
}

struct Live {
    particle: Particle,
    rng: StreamRng,
    seq: u32,
    kind: ClockKind,
}

const DEAD: u32 = u32::MAX;

struct Engine<'a> {
    laws: &'a ParticleLaws,
    spec: &'a LimitSystemSpec,
    config: &'a SimConfig,
    stream: RngStream,
    time: f64,
    live: Vec<Live>,
    slot_of: Vec<u32>,
    heap: BinaryHeap<core::cmp::Reverse<EventKey>>,
    next_id: u64,
    n_events: u64,
    counts: Vec<u64>,
    occupancy: Vec<f64>,
    occupancy_time: f64,
    nonlocal_counts: Vec<u64>,
    events: Option<Vec<EventRecord>>,
    snapshots: Vec<Population>,
}

impl<'a> Engine<'a> {
    fn advance_occupancy(&mut self, to: f64) {
        let dt = to - self.occupancy_time;
        if dt > 0.0 {
            for (acc, &c) in self.occupancy.iter_mut().zip(self.counts.iter()) {
                *acc += c as f64 * dt;
            }
            self.occupancy_time = to;
        }
    }

    fn record(&mut self, particle: u64, site: usize, kind: EventKind) {
        if let Some(log) = &mut self.events {
            log.push(EventRecord {
                time: self.time,
                particle,
                site,
                kind,
            });
        }
    }

    /// Draw the particle's next event and push it on the heap.
    fn schedule(&mut self, slot: usize) {
        let lifetime = self.spec.age().map(|a| a.lifetime);
        let live = &mut self.live[slot];
        let site = live.particle.site;
        let total = self.spec.motion.jump_rate(site) + self.laws.total_rate(site);
        let stochastic = if total > 0.0 {
            self.time + live.rng.exponential(total)
        } else {
            f64::INFINITY
        };
        let death = match lifetime {
            Some(l) if l.is_finite() => live.particle.birth_time + l,
            _ => f64::INFINITY,
        };
        let (when, kind) = if death <= stochastic {
            (death, ClockKind::AgeDeath)
        } else {
            (stochastic, ClockKind::Stochastic)
        };
        if !when.is_finite() {
            return; // inert particle
        }
        live.seq += 1;
        live.kind = kind;
        self.heap.push(core::cmp::Reverse(EventKey {
            time: when,
            id: live.particle.id,
            seq: live.seq,
        }));
    }

    fn spawn(&mut self, site: usize, birth_mass: f64) {
        let id = self.next_id;
        self.next_id += 1;
        let rng = self.stream.substream(domain::PARTICLE, id);
        let slot = self.live.len();
        self.live.push(Live {
            particle: Particle {
                id,
                site,
                birth_time: self.time,
                birth_mass,
                repro_count: 0,
            },
            rng,
            seq: 0,
            kind: ClockKind::Stochastic,
        });
        debug_assert_eq!(self.slot_of.len() as u64, id);
        self.slot_of.push(slot as u32);
        self.counts[site] += 1;
        self.schedule(slot);
    }

    fn remove(&mut self, slot: usize) {
        let id = self.live[slot].particle.id;
        let site = self.live[slot].particle.site;
        self.counts[site] -= 1;
        self.slot_of[id as usize] = DEAD;
        self.live.swap_remove(slot);
        if slot < self.live.len() {
            let moved = self.live[slot].particle.id;
            self.slot_of[moved as usize] = slot as u32;
        }
    }

    fn pop_due(&mut self) -> Option<(f64, usize)> {
        while let Some(core::cmp::Reverse(key)) = self.heap.pop() {
            let slot = self.slot_of[key.id as usize];
            if slot == DEAD {
                continue;
            }
            let slot = slot as usize;
            if self.live[slot].seq != key.seq {
                continue;
            }
            return Some((key.time, slot));
        }
        None
    }

    fn take_snapshot(&mut self, t: f64) {
        let particles: Vec<Particle> = self.live.iter().map(|l| l.particle.clone()).collect();
        self.snapshots.push(Population {
            time: t,
            weight: self.laws.weight(),
            particles,
        });
    }

    fn output(mut self) -> SimOutput {
        self.advance_occupancy(self.config.horizon);
        SimOutput {
            snapshots: self.snapshots,
            n_events: self.n_events,
            events: self.events,
            site_occupancy: self.occupancy,
            nonlocal_event_counts: self.nonlocal_counts,
        }
    }

    fn truncate(mut self, reason: TruncationReason) -> SimError {
        let at_time = self.time;
        self.advance_occupancy(self.time.min(self.config.horizon));
        self.occupancy_time = self.config.horizon; // freeze the integral
        SimError::Truncated {
            reason,
            at_time,
            partial: Box::new(self.output()),
        }
    }

    /// Handle one stochastic clock firing for the particle in `slot`.
    fn fire(&mut self, slot: usize) -> Result<()> {
        let site = self.live[slot].particle.site;
        let motion_rate = self.spec.motion.jump_rate(site);
        let local_rate = self.laws.local_rate(site);
        let nonlocal_rate = self.laws.nonlocal_rate(site);
        let total = motion_rate + local_rate + nonlocal_rate;
        let pick = self.live[slot].rng.uniform() * total;

        if pick < motion_rate {
            let to = {
                let live = &mut self.live[slot];
                self.spec.motion.sample_jump(site, &mut live.rng)
            };
            let id = self.live[slot].particle.id;
            self.counts[site] -= 1;
            self.counts[to] += 1;
            self.live[slot].particle.site = to;
            self.record(id, site, EventKind::Jump { to });
            self.schedule(slot);
            return Ok(());
        }

        let mass_flow = self.spec.motion.mass_flow().copied();
        let offspring_mass = |p: &Particle, now: f64| -> f64 {
            match mass_flow.as_ref() {
                Some(flow) => p.mass(now, Some(flow)) * flow.offspring_factor,
                None => 1.0,
            }
        };

        if pick < motion_rate + local_rate {
            // Local branching: parent dies, offspring copies at its site.
            let count = {
                let live = &mut self.live[slot];
                self.laws.sample_local_count(site, &mut live.rng)
            };
            let id = self.live[slot].particle.id;
            let mass = offspring_mass(&self.live[slot].particle, self.time);
            self.record(id, site, EventKind::LocalBranch { offspring: count });
            self.remove(slot);
            for _ in 0..count {
                self.spawn(site, mass);
            }
            return Ok(());
        }

        // Non-local branching, thinned by the age profile where present.
        if let Some(age_cfg) = self.spec.age() {
            let age = self.live[slot].particle.age(self.time);
            let factor = age_cfg.rate_profile.factor(age);
            if factor > 1.0 + 1e-12 {
                return Err(SimError::ThinningResidual { site, factor });
            }
            if factor < 1.0 {
                let u = self.live[slot].rng.uniform();
                if u >= factor {
                    let id = self.live[slot].particle.id;
                    self.record(id, site, EventKind::Thinned);
                    self.schedule(slot);
                    return Ok(());
                }
            }
        }

        let (comp, count) = {
            let live = &mut self.live[slot];
            self.laws.sample_nonlocal(site, &mut live.rng)
        };
        let id = self.live[slot].particle.id;
        let mass = offspring_mass(&self.live[slot].particle, self.time);
        self.record(
            id,
            site,
            EventKind::NonlocalBranch {
                component: comp as u32,
                offspring: count as u32,
            },
        );
        self.nonlocal_counts[site] += 1;

        let mut targets = Vec::with_capacity(count as usize);
        {
            let live = &mut self.live[slot];
            for _ in 0..count {
                targets.push(self.laws.sample_displacement(site, comp, &mut live.rng));
            }
        }
        if self.spec.rebirth() {
            // The parent is reborn in place with its flow coordinates.
            self.live[slot].particle.repro_count += 1;
            self.schedule(slot);
        } else {
            self.remove(slot);
        }
        for target in targets {
            self.spawn(target, mass);
        }
        Ok(())
    }
}

/// Run one exact trajectory, emitting populations at the requested snapshot
/// times.
pub fn simulate(
    laws: &ParticleLaws,
    spec: &LimitSystemSpec,
    init: &Population,
    config: &SimConfig,
    stream: &RngStream,
) -> Result<SimOutput> {
    if laws.n_sites() != spec.n_sites() {
        return Err(SimError::Config(format!(
            "laws cover {} sites, spec has {}",
            laws.n_sites(),
            spec.n_sites()
        )));
    }
    if init.time != 0.0 {
        return Err(SimError::InitialTime { t: init.time });
    }
    if init.weight != laws.weight() {
        return Err(SimError::WeightMismatch {
            init: init.weight,
            laws: laws.weight(),
        });
    }
    let n = spec.n_sites();
    let mut engine = Engine {
        laws,
        spec,
        config,
        stream: *stream,
        time: 0.0,
        live: Vec::with_capacity(init.len()),
        slot_of: Vec::with_capacity(init.len()),
        heap: BinaryHeap::with_capacity(init.len() + 16),
        next_id: 0,
        n_events: 0,
        counts: vec![0; n],
        occupancy: vec![0.0; n],
        occupancy_time: 0.0,
        nonlocal_counts: vec![0; n],
        events: config.record_events.then(Vec::new),
        snapshots: Vec::with_capacity(config.snapshot_times.len()),
    };

    if init.len() > config.max_population {
        return Err(engine.truncate(TruncationReason::MaxPopulation));
    }
    for p in &init.particles {
        // Re-key initial particles onto engine ids so their streams are
        // disjoint from later births.
        let site = p.site;
        if site >= n {
            return Err(SimError::Mechanism(MechanismError::UnknownSite {
                site,
                n_sites: n,
            }));
        }
        engine.spawn(site, p.birth_mass);
    }

    let mut snap_ix = 0;
    loop {
        let due = engine.pop_due();
        let next_time = due.as_ref().map_or(f64::INFINITY, |(t, _)| *t);
        while snap_ix < config.snapshot_times.len()
            && config.snapshot_times[snap_ix] < next_time.min(config.horizon)
        {
            engine.take_snapshot(config.snapshot_times[snap_ix]);
            snap_ix += 1;
        }
        let Some((t, slot)) = due else {
            break;
        };
        if t > config.horizon {
            break;
        }
        engine.advance_occupancy(t);
        engine.time = t;
        engine.n_events += 1;
        match engine.live[slot].kind {
            ClockKind::AgeDeath => {
                let id = engine.live[slot].particle.id;
                let site = engine.live[slot].particle.site;
                engine.record(id, site, EventKind::AgeDeath);
                engine.remove(slot);
            }
            ClockKind::Stochastic => {
                engine.fire(slot)?;
            }
        }
        if engine.n_events >= config.max_events {
            return Err(engine.truncate(TruncationReason::MaxEvents));
        }
        if engine.live.len() > config.max_population {
            return Err(engine.truncate(TruncationReason::MaxPopulation));
        }
    }
    // Remaining snapshots (at or after the final event, up to the horizon).
    while snap_ix < config.snapshot_times.len() {
        engine.take_snapshot(config.snapshot_times[snap_ix]);
        snap_ix += 1;
    }
    Ok(engine.output())
}

/// Mean and standard error of the empirical Laplace functional
/// `exp{-X_t(f)}` across replicates.
pub fn empirical_laplace(
    replicates: &[Vec<Population>],
    f: &TestFunction,
    t: f64,
) -> Result<(f64, f64)> {
    if replicates.len() < 2 {
        return Err(SimError::Config(String::from("need at least 2 replicates")));
    }
    let mut values = Vec::with_capacity(replicates.len());
    for snaps in replicates {
        let pop = snaps
            .iter()
            .find(|p| (p.time - t).abs() <= 1e-12)
            .ok_or(SimError::MissingSnapshot { t })?;
        values.push((-pop.integrate(f)).exp());
    }
    let summary = crate::stats::summarize(&values).expect("len checked above");
    Ok((summary.mean, summary.stderr))
}

/// One replicate of the standard experiment: Poisson initial condition from
/// `mu`, then an exact trajectory.
pub fn run_one_replicate(
    laws: &ParticleLaws,
    spec: &LimitSystemSpec,
    mu: &SiteMeasure,
    config: &SimConfig,
    master_seed: u64,
    replicate: u64,
) -> Result<SimOutput> {
    let stream = RngStream::new(master_seed, replicate);
    let init = sample_poisson_initial(mu, laws.k(), config.max_population, &stream)?;
    simulate(laws, spec, &init, config, &stream)
}

/// Run `n` mutually independent replicates sequentially and collect the
/// linear functionals `X_t(f)` per snapshot time. Replicate `r` uses stream
/// `(master_seed, r)`, so the result is a pure function of the arguments no
/// matter how callers schedule the replicates.
pub fn run_replicates(
    laws: &ParticleLaws,
    spec: &LimitSystemSpec,
    mu: &SiteMeasure,
    config: &SimConfig,
    n: u32,
    master_seed: u64,
    functionals: &[TestFunction],
) -> Result<ExperimentResult> {
    let mut result = ExperimentResult {
        k: laws.k(),
        replicates: n,
        master_seed,
        times: config.snapshot_times.clone(),
        values: vec![
            vec![Vec::with_capacity(n as usize); functionals.len()];
            config.snapshot_times.len()
        ],
        truncated: Vec::new(),
    };
    for r in 0..n {
        match run_one_replicate(laws, spec, mu, config, master_seed, r as u64) {
            Ok(out) => merge_replicate(&mut result, &out, functionals),
            Err(SimError::Truncated { .. }) => result.truncated.push(r),
            Err(e) => return Err(e),
        }
    }
    Ok(result)
}

/// Fold one replicate's snapshots into the result table (commutative across
/// replicates because each lands in its own column).
pub fn merge_replicate(
    result: &mut ExperimentResult,
    out: &SimOutput,
    functionals: &[TestFunction],
) {
    for (t_ix, pop) in out.snapshots.iter().enumerate() {
        for (f_ix, f) in functionals.iter().enumerate() {
            result.values[t_ix][f_ix].push(pop.integrate(f));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mechanism::{
        AgeConfig, LocalMechanism, MotionGenerator, NonlocalMechanism, SiteSpace,
    };

    fn space(n: usize) -> SiteSpace {
        SiteSpace::new((0..n).map(|i| format!("s{i}")).collect()).unwrap()
    }

    fn null_spec(n: usize) -> LimitSystemSpec {
        LimitSystemSpec::new(
            space(n),
            MotionGenerator::immobile(n),
            LocalMechanism::zero(n),
            NonlocalMechanism::none(n),
        )
        .unwrap()
    }

    fn swap_spec() -> LimitSystemSpec {
        LimitSystemSpec::new(
            space(2),
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
        .unwrap()
    }

    fn pure_death_spec() -> LimitSystemSpec {
        LimitSystemSpec::new(
            space(1),
            MotionGenerator::immobile(1),
            LocalMechanism::new(vec![1.0], vec![0.0], vec![Vec::new()]).unwrap(),
            NonlocalMechanism::none(1),
        )
        .unwrap()
    }

    #[test]
    fn poisson_initial_counts() {
        let mu = SiteMeasure::new(vec![3.0]).unwrap();
        let stream = RngStream::new(99, 0);
        let pop = sample_poisson_initial(&mu, 10_000, 10_000_000, &stream).unwrap();
        // +-3.5 sigma of Poisson(30000)
        let n = pop.len() as f64;
        assert!((29_400.0..=30_600.0).contains(&n), "n = {n}");
        assert_eq!(pop.weight, 1e-4);

        let empty = sample_poisson_initial(
            &SiteMeasure::new(vec![0.0]).unwrap(),
            100,
            10_000_000,
            &stream,
        )
        .unwrap();
        assert!(empty.is_empty());
    }

    #[test]
    fn poisson_initial_guard() {
        let mu = SiteMeasure::new(vec![10.0]).unwrap();
        let err = sample_poisson_initial(&mu, 1000, 100, &RngStream::new(1, 0));
        assert!(matches!(err, Err(SimError::InitialIntensityGuard { .. })));
    }

    #[test]
    fn no_events_leaves_population_unchanged() {
        let spec = null_spec(2);
        let laws = spec.particle_laws(5).unwrap();
        let init = Population::from_counts(&[3, 2], laws.weight());
        let config = SimConfig::new(1.0, vec![0.5, 1.0]).unwrap();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(7, 0)).unwrap();
        assert_eq!(out.n_events, 0);
        for snap in &out.snapshots {
            assert_eq!(snap.len(), 5);
            let counts = snap.site_counts(2);
            assert_eq!(counts, vec![3, 2]);
        }
        // occupation integral: 3 and 2 particles over a unit horizon
        assert!((out.site_occupancy[0] - 3.0).abs() < 1e-12);
        assert!((out.site_occupancy[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn pure_death_survival_matches_exponential() {
        let spec = pure_death_spec();
        let laws = spec.particle_laws(10_000).unwrap();
        let init = Population::from_counts(&[10_000], laws.weight());
        let config = SimConfig::new(1.0, vec![1.0]).unwrap();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(3, 0)).unwrap();
        let surviving = out.snapshots[0].len() as f64 / 10_000.0;
        let p = (-1.0f64).exp();
        let se = (p * (1.0 - p) / 10_000.0).sqrt();
        assert!(
            (surviving - p).abs() < 4.0 * se,
            "survival {surviving} vs {p}"
        );
    }

    #[test]
    fn critical_swap_conserves_count() {
        let spec = swap_spec();
        let laws = spec.particle_laws(64).unwrap();
        let init = Population::from_counts(&[40, 24], laws.weight());
        let config = SimConfig::new(2.0, vec![0.5, 1.0, 2.0])
            .unwrap()
            .with_event_log();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(11, 0)).unwrap();
        assert!(out.n_events > 0);
        for snap in &out.snapshots {
            assert_eq!(snap.len(), 64, "count changed at t = {}", snap.time);
        }
    }

    #[test]
    fn determinism_same_stream_same_log() {
        let spec = swap_spec();
        let laws = spec.particle_laws(32).unwrap();
        let init = Population::from_counts(&[20, 12], laws.weight());
        let config = SimConfig::new(1.0, vec![1.0]).unwrap().with_event_log();
        let a = simulate(&laws, &spec, &init, &config, &RngStream::new(21, 4)).unwrap();
        let b = simulate(&laws, &spec, &init, &config, &RngStream::new(21, 4)).unwrap();
        assert_eq!(a.events, b.events);
        assert_eq!(a.snapshots, b.snapshots);
        let c = simulate(&laws, &spec, &init, &config, &RngStream::new(21, 5)).unwrap();
        assert_ne!(a.events, c.events);
    }

    #[test]
    fn rebirth_population_is_nondecreasing() {
        let spec = LimitSystemSpec::new(
            space(2),
            MotionGenerator::immobile(2),
            LocalMechanism::new(vec![-1.0, -1.0], vec![0.0, 0.0], vec![Vec::new(); 2]).unwrap(),
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
        .unwrap()
        .with_rebirth()
        .unwrap();
        let laws = spec.particle_laws(16).unwrap();
        let init = Population::from_counts(&[16, 0], laws.weight());
        let times: Vec<f64> = (1..=10).map(|i| i as f64 * 0.1).collect();
        let config = SimConfig::new(1.0, times).unwrap();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(17, 0)).unwrap();
        let mut last = 16;
        for snap in &out.snapshots {
            assert!(snap.len() >= last);
            last = snap.len();
        }
        assert!(last > 16, "rebirth system should have grown");
        for snap in &out.snapshots {
            for p in &snap.particles {
                // every retained parent counts its branch events
                assert!(p.repro_count <= out.n_events as u32);
            }
        }
    }

    #[test]
    fn motion_jumps_relax_to_uniform() {
        let spec = LimitSystemSpec::new(
            space(2),
            MotionGenerator::new(vec![vec![-1.0, 1.0], vec![1.0, -1.0]]).unwrap(),
            LocalMechanism::zero(2),
            NonlocalMechanism::none(2),
        )
        .unwrap();
        let laws = spec.particle_laws(1).unwrap();
        let init = Population::from_counts(&[4000, 0], 1.0);
        let config = SimConfig::new(3.0, vec![3.0]).unwrap();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(5, 0)).unwrap();
        let counts = out.snapshots[0].site_counts(2);
        let frac = counts[0] as f64 / 4000.0;
        let expect = (1.0 + (-6.0f64).exp()) / 2.0;
        let se = (expect * (1.0 - expect) / 4000.0).sqrt();
        assert!((frac - expect).abs() < 4.0 * se, "frac {frac}");
    }

    #[test]
    fn age_death_is_exact_and_ages_stay_below_lifetime() {
        let spec = null_spec(1).with_age(AgeConfig::new(0.75).unwrap());
        let laws = spec.particle_laws(4).unwrap();
        let init = Population::from_counts(&[12], laws.weight());
        let config = SimConfig::new(1.0, vec![0.5, 0.75, 1.0]).unwrap();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(2, 0)).unwrap();
        assert_eq!(out.snapshots[0].len(), 12); // age 0.5 < 0.75
        assert_eq!(out.snapshots[1].len(), 0); // removed exactly at age L
        assert_eq!(out.snapshots[2].len(), 0);
        assert_eq!(out.n_events, 12);
    }

    #[test]
    fn mass_flow_is_exact_at_snapshots() {
        let flow = MassFlow::new(core::f64::consts::LN_2, 0.5).unwrap();
        let spec = LimitSystemSpec::new(
            space(1),
            MotionGenerator::immobile(1).with_mass_flow(flow),
            LocalMechanism::quadratic(1, 0.5).unwrap(),
            NonlocalMechanism::none(1),
        )
        .unwrap();
        let laws = spec.particle_laws(8).unwrap();
        let init = Population::from_counts(&[32], laws.weight()).with_initial_mass(2.0);
        let config = SimConfig::new(1.0, vec![1.0]).unwrap().with_event_log();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(13, 0)).unwrap();
        let snap = &out.snapshots[0];
        let mut generations_seen = 0;
        for p in &snap.particles {
            let expect = flow.eval(snap.time - p.birth_time, p.birth_mass);
            assert_eq!(p.mass(snap.time, Some(&flow)), expect);
            // masses are 2 * 0.5^g * 2^t for the branch generation g, so the
            // ratio to the root flow recovers the offspring factor chain
            let ratio = p.mass(snap.time, Some(&flow)) / flow.eval(snap.time, 2.0);
            let g = (-ratio.log2()).round();
            assert!(g >= 0.0);
            assert!(
                (ratio - 0.5f64.powi(g as i32)).abs() < 1e-12,
                "mass ratio {ratio} is not a power of the factor"
            );
            if g > 0.0 {
                generations_seen += 1;
            }
        }
        assert!(generations_seen > 0, "no branch events hit the snapshot");
    }

    #[test]
    fn truncation_carries_partial_results() {
        let spec = swap_spec();
        let laws = spec.particle_laws(16).unwrap();
        let init = Population::from_counts(&[16, 0], laws.weight());
        let config = SimConfig::new(10.0, vec![0.05, 10.0])
            .unwrap()
            .with_guards(10, 1_000_000)
            .unwrap();
        match simulate(&laws, &spec, &init, &config, &RngStream::new(23, 0)) {
            Err(SimError::Truncated {
                reason: TruncationReason::MaxEvents,
                partial,
                ..
            }) => {
                assert_eq!(partial.n_events, 10);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn empirical_laplace_examples() {
        // X(f) = ln 2 and ln 4 across two replicates.
        let f = TestFunction::new(vec![core::f64::consts::LN_2]).unwrap();
        let mk = |count: u64| {
            vec![Population {
                time: 1.0,
                weight: 1.0,
                particles: (0..count)
                    .map(|id| Particle {
                        id,
                        site: 0,
                        birth_time: 0.0,
                        birth_mass: 1.0,
                        repro_count: 0,
                    })
                    .collect(),
            }]
        };
        let reps = vec![mk(1), mk(2)];
        let (est, _) = empirical_laplace(&reps, &f, 1.0).unwrap();
        assert!((est - 0.375).abs() < 1e-12);

        let zero = TestFunction::zero(1);
        let (est, se) = empirical_laplace(&reps, &zero, 1.0).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(se, 0.0);

        let empty = vec![mk(0), mk(0)];
        let (est, se) = empirical_laplace(&empty, &f, 1.0).unwrap();
        assert_eq!(est, 1.0);
        assert_eq!(se, 0.0);

        assert!(matches!(
            empirical_laplace(&reps, &f, 0.5),
            Err(SimError::MissingSnapshot { .. })
        ));
    }

    #[test]
    fn replicates_are_deterministic_and_independent() {
        let spec = swap_spec();
        let laws = spec.particle_laws(16).unwrap();
        let mu = SiteMeasure::new(vec![1.0, 0.0]).unwrap();
        let config = SimConfig::new(1.0, vec![1.0]).unwrap().with_event_log();
        let a = run_one_replicate(&laws, &spec, &mu, &config, 42, 0).unwrap();
        let b = run_one_replicate(&laws, &spec, &mu, &config, 42, 0).unwrap();
        assert_eq!(a.events, b.events);
        let c = run_one_replicate(&laws, &spec, &mu, &config, 42, 1).unwrap();
        assert_ne!(a.events, c.events);

        let f = TestFunction::new(vec![1.0, 1.0]).unwrap();
        let result = run_replicates(&laws, &spec, &mu, &config, 50, 42, &[f]).unwrap();
        assert_eq!(result.values[0][0].len(), 50);
        // critical swap: every replicate conserves its initial mass exactly
        for (r, &v) in result.values[0][0].iter().enumerate() {
            let init =
                sample_poisson_initial(&mu, 16, 1_000_000, &RngStream::new(42, r as u64)).unwrap();
            assert_eq!(v, init.total_mass(), "replicate {r}");
        }
    }

    #[test]
    fn thinning_respects_age_profile() {
        // Rate profile 0 below age 0.5: a fresh population sees no accepted
        // non-local events before its particles reach that age.
        let profile = crate::mechanism::AgeProfile::Steps {
            cuts: vec![0.5],
            values: vec![0.0, 1.0],
        };
        let spec = LimitSystemSpec::new(
            space(1),
            MotionGenerator::immobile(1),
            LocalMechanism::new(vec![-1.0], vec![0.0], vec![Vec::new()]).unwrap(),
            NonlocalMechanism::simple(1, 1.0, |_| vec![1.0], 1.0, Vec::new()).unwrap(),
        )
        .unwrap()
        .with_rebirth()
        .unwrap()
        .with_age(
            AgeConfig::new(f64::INFINITY)
                .unwrap()
                .with_rate_profile(profile)
                .unwrap(),
        );
        let laws = spec.particle_laws(8).unwrap();
        let init = Population::from_counts(&[64], laws.weight());
        let config = SimConfig::new(0.4, vec![0.4]).unwrap().with_event_log();
        let out = simulate(&laws, &spec, &init, &config, &RngStream::new(31, 0)).unwrap();
        assert_eq!(out.snapshots[0].len(), 64, "no births below age 0.5");
        assert_eq!(out.nonlocal_event_counts[0], 0);
        let log = out.events.unwrap();
        assert!(log.iter().all(|e| matches!(e.kind, EventKind::Thinned)));
        assert!(!log.is_empty(), "clocks still fire, thinning rejects them");
    }
}
