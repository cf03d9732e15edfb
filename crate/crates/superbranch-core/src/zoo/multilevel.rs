//! Two-level (stepping-stone) systems: level-2 particles whose internal
//! state is itself a population over a site space `S`, evolving as an
//! independent critical binary branching system and killed at extinction.
//! Level-2 branch events replace the parent by offspring whose internal
//! populations come from one of two non-local mechanisms: the empirical
//! measure of a sample from the parent (total count conserved exactly) or
//! the restriction of the parent to a fixed subset of `S`.
//!
//! At desk scale the level-1 objects are integer-count particle systems —
//! the pre-limit of the measure-valued picture — which keeps both mechanism
//! identities exact.

use alloc::boxed::Box;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::engine::{SimConfig, SimError, TruncationReason};
use crate::mechanism::{MechanismError, MotionGenerator, SiteMeasure, SiteSpace};
use crate::rng::{domain, RngStream, StreamRng};

type Result<T> = core::result::Result<T, SimError>;

/// Integer-count population over `S`; the internal state of one level-2
/// particle. Kept non-empty while alive (extinction kills the carrier).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubPopulation {
    counts: Vec<u64>,
}

impl SubPopulation {
    pub fn new(counts: Vec<u64>) -> Self {
        Self { counts }
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn is_extinct(&self) -> bool {
        self.total() == 0
    }
}

/// Offspring count law for the empirical-sample mechanism.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleSize {
    Fixed(u32),
    /// Uniform on `lo..=hi`.
    Uniform {
        lo: u32,
        hi: u32,
    },
}

impl SampleSize {
    fn draw(&self, rng: &mut StreamRng) -> u32 {
        match *self {
            SampleSize::Fixed(n) => n,
            SampleSize::Uniform { lo, hi } => lo + (rng.next_u64() % (hi - lo + 1) as u64) as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Level2Mechanism {
    /// Offspring is the parent's total count multinomially placed over `N`
    /// locations sampled from the normalized parent, conserving the total
    /// exactly.
    EmpiricalSample { sample_size: SampleSize },
    /// Offspring keeps only the individuals inside `keep`; an empty result
    /// suppresses the offspring (death), which the simulator reports in its
    /// diagnostics.
    Restriction { keep: Vec<bool> },
}

/// One level-2 branch: the offspring internal populations produced from a
/// parent state. Empty when a restriction wipes the population out.
pub fn level2_offspring(
    parent: &SubPopulation,
    mechanism: &Level2Mechanism,
    rng: &mut StreamRng,
) -> Vec<SubPopulation> {
    match mechanism {
        Level2Mechanism::EmpiricalSample { sample_size } => {
            let total = parent.total();
            if total == 0 {
                return Vec::new();
            }
            let n = sample_size.draw(rng).max(1);
            // locations Z_1..Z_n i.i.d. from the normalized parent
            let weights: Vec<f64> = parent.counts.iter().map(|&c| c as f64).collect();
            let locations: Vec<usize> = (0..n).map(|_| rng.pick_weighted(&weights)).collect();
            // place `total` unit atoms uniformly over the sampled locations
            let mut counts = vec![0u64; parent.counts.len()];
            for _ in 0..total {
                let pick = (rng.next_u64() % n as u64) as usize;
                counts[locations[pick]] += 1;
            }
            vec![SubPopulation::new(counts)]
        }
        Level2Mechanism::Restriction { keep } => {
            let counts: Vec<u64> = parent
                .counts
                .iter()
                .zip(keep)
                .map(|(&c, &k)| if k { c } else { 0 })
                .collect();
            let restricted = SubPopulation::new(counts);
            if restricted.is_extinct() {
                Vec::new()
            } else {
                vec![restricted]
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level2Particle {
    pub id: u64,
    pub island: usize,
    pub birth_time: f64,
    pub sub: SubPopulation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Level2Population {
    pub time: f64,
    pub weight: f64,
    pub particles: Vec<Level2Particle>,
}

impl Level2Population {
    pub fn len(&self) -> usize {
        self.particles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.particles.is_empty()
    }
}

/// Model description: islands `E` with clan migration, critical binary
/// level-1 branching over `S` at `level1_rate` per individual, level-2
/// branching at `level2_beta` per carrier.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelModel {
    pub islands: SiteSpace,
    pub sites: SiteSpace,
    pub island_motion: MotionGenerator,
    pub level1_rate: f64,
    pub level2_beta: f64,
    pub mechanism: Level2Mechanism,
}

pub fn make_multilevel(
    islands: SiteSpace,
    sites: SiteSpace,
    island_motion: MotionGenerator,
    level1_rate: f64,
    level2_beta: f64,
    mechanism: Level2Mechanism,
) -> core::result::Result<MultilevelModel, MechanismError> {
    if island_motion.n_sites() != islands.len() {
        return Err(MechanismError::Dimension {
            what: "island motion",
            expected: islands.len(),
            got: island_motion.n_sites(),
        });
    }
    if !(level1_rate >= 0.0) || !(level2_beta >= 0.0) {
        return Err(MechanismError::Invalid {
            what: "multilevel rates",
            detail: format!("must be >= 0, got ({level1_rate}, {level2_beta})"),
        });
    }
    if let Level2Mechanism::Restriction { keep } = &mechanism {
        if keep.len() != sites.len() {
            return Err(MechanismError::Dimension {
                what: "restriction set",
                expected: sites.len(),
                got: keep.len(),
            });
        }
    }
    Ok(MultilevelModel {
        islands,
        sites,
        island_motion,
        level1_rate,
        level2_beta,
        mechanism,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelOutput {
    pub snapshots: Vec<Level2Population>,
    pub n_events: u64,
    /// Level-2 offspring suppressed because the mechanism produced an empty
    /// population.
    pub suppressed_offspring: u64,
    /// Level-2 particles removed by level-1 extinction.
    pub extinctions: u64,
}

/// Exact Gillespie realization of the two-level system. Within a replicate
/// the timeline is single-threaded; all draws come from the replicate's
/// level-2 substream.
pub fn simulate_multilevel(
    model: &MultilevelModel,
    init: &Level2Population,
    config: &SimConfig,
    stream: &RngStream,
) -> Result<MultilevelOutput> {
    if init.time != 0.0 {
        return Err(SimError::InitialTime { t: init.time });
    }
    let mut rng = stream.substream(domain::LEVEL2, 0);
    let mut particles: Vec<Level2Particle> = init.particles.clone();
    let mut next_id = particles.iter().map(|p| p.id + 1).max().unwrap_or(0);
    let mut time = 0.0;
    let mut n_events = 0u64;
    let mut suppressed = 0u64;
    let mut extinctions = 0u64;
    let mut snapshots = Vec::with_capacity(config.snapshot_times.len());
    let mut snap_ix = 0;

    loop {
        let rates: Vec<f64> = particles.iter().map(|p| self_rate(model, p)).collect();
        let total: f64 = rates.iter().sum();
        let next_event = if total > 0.0 {
            time + rng.exponential(total)
        } else {
            f64::INFINITY
        };
        while snap_ix < config.snapshot_times.len()
            && config.snapshot_times[snap_ix] < next_event.min(config.horizon)
        {
            snapshots.push(Level2Population {
                time: config.snapshot_times[snap_ix],
                weight: init.weight,
                particles: particles.clone(),
            });
            snap_ix += 1;
        }
        if !next_event.is_finite() || next_event > config.horizon {
            break;
        }
        time = next_event;
        n_events += 1;

        let slot = rng.pick_weighted(&rates);
        let motion_rate = model.island_motion.jump_rate(particles[slot].island);
        let level1 = model.level1_rate * particles[slot].sub.total() as f64;
        let pick = rng.uniform() * rates[slot];
        if pick < motion_rate {
            let to = model
                .island_motion
                .sample_jump(particles[slot].island, &mut rng);
            particles[slot].island = to;
        } else if pick < motion_rate + level1 {
            // one level-1 individual branches: critical binary
            let weights: Vec<f64> = particles[slot]
                .sub
                .counts()
                .iter()
                .map(|&c| c as f64)
                .collect();
            let site = rng.pick_weighted(&weights);
            let mut counts = particles[slot].sub.counts().to_vec();
            if rng.bernoulli(0.5) {
                counts[site] += 1;
            } else {
                counts[site] -= 1;
            }
            particles[slot].sub = SubPopulation::new(counts);
            if particles[slot].sub.is_extinct() {
                particles.swap_remove(slot);
                extinctions += 1;
            }
        } else {
            // level-2 branch: parent replaced by mechanism offspring
            let parent = particles.swap_remove(slot);
            let offspring = level2_offspring(&parent.sub, &model.mechanism, &mut rng);
            if offspring.is_empty() {
                suppressed += 1;
            }
            for sub in offspring {
                particles.push(Level2Particle {
                    id: next_id,
                    island: parent.island,
                    birth_time: time,
                    sub,
                });
                next_id += 1;
            }
        }

        if n_events >= config.max_events || particles.len() > config.max_population {
            let reason = if n_events >= config.max_events {
                TruncationReason::MaxEvents
            } else {
                TruncationReason::MaxPopulation
            };
            return Err(SimError::Truncated {
                reason,
                at_time: time,
                partial: Box::new(crate::engine::SimOutput {
                    snapshots: Vec::new(),
                    n_events,
                    events: None,
                    site_occupancy: Vec::new(),
                    nonlocal_event_counts: Vec::new(),
                }),
            });
        }
    }
    while snap_ix < config.snapshot_times.len() {
        snapshots.push(Level2Population {
            time: config.snapshot_times[snap_ix],
            weight: init.weight,
            particles: particles.clone(),
        });
        snap_ix += 1;
    }
    Ok(MultilevelOutput {
        snapshots,
        n_events,
        suppressed_offspring: suppressed,
        extinctions,
    })
}

fn self_rate(model: &MultilevelModel, p: &Level2Particle) -> f64 {
    model.island_motion.jump_rate(p.island)
        + model.level2_beta
        + model.level1_rate * p.sub.total() as f64
}

/// Aggregated measure over `E x S` (island-major: index `island * |S| + s`):
/// `Y(e, s) = weight * sum_{carriers on e} sub(s)`.
pub fn aggregate_level(pop: &Level2Population, n_islands: usize, n_sites: usize) -> SiteMeasure {
    let mut values = vec![0.0; n_islands * n_sites];
    for p in &pop.particles {
        for (s, &c) in p.sub.counts().iter().enumerate() {
            values[p.island * n_sites + s] += pop.weight * c as f64;
        }
    }
    SiteMeasure::new(values).expect("counts are non-negative")
}
