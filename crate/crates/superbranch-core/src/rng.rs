//! Counter-derived random number streams.
//!
//! Every random quantity in a simulation is drawn from a stream keyed by
//! `(master_seed, stream_index, domain, id)`. Streams with distinct keys are
//! statistically independent, and a particle's draws depend only on its own
//! key and draw ordinal, so no execution schedule can reorder them. This is
//! what makes replicate output bitwise reproducible under any parallelism.
//!
//! The generator is a SplitMix64 chain seeded through the same finalizer, a
//! standard counter-based construction. Not cryptographic.

#[cfg(not(feature = "std"))]
use num_traits::Float;

const GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn combine(state: u64, word: u64) -> u64 {
    mix(state
        .wrapping_add(GAMMA)
        .wrapping_add(word.wrapping_mul(0xD6E8_FEB8_6659_FD93)))
}

/// Key of a replicate-level stream: `(master_seed, stream_index)`.
///
/// `stream_index` is the replicate number in multi-replicate runs. Substreams
/// are derived per domain (initial condition, particle, ...) and per id, so
/// the draws of one particle never depend on how many draws any other
/// particle made.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngStream {
    pub master_seed: u64,
    pub stream_index: u64,
}

/// Substream domains. Keeping these distinct guarantees that e.g. particle 7
/// and initial-condition site 7 do not share a stream.
pub mod domain {
    pub const INIT: u64 = 1;
    pub const PARTICLE: u64 = 2;
    pub const LEVEL2: u64 = 3;
    pub const GENERIC: u64 = 4;
}

impl RngStream {
    pub fn new(master_seed: u64, stream_index: u64) -> Self {
        Self {
            master_seed,
            stream_index,
        }
    }

    /// Derive the draw stream for `(domain, id)` under this key.
    pub fn substream(&self, domain: u64, id: u64) -> StreamRng {
        let mut s = mix(self.master_seed ^ GAMMA);
        s = combine(s, self.stream_index);
        s = combine(s, domain);
        s = combine(s, id);
        StreamRng { state: s }
    }
}

/// Sequential draw stream; the `n`-th draw is a pure function of the key and
/// `n` (the event ordinal).
#[derive(Debug, Clone)]
pub struct StreamRng {
    state: u64,
}

impl StreamRng {
    pub fn from_seed(seed: u64) -> Self {
        Self {
            state: mix(seed ^ GAMMA),
        }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GAMMA);
        mix(self.state)
    }

    /// Uniform in `[0, 1)` with 53 random bits.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Exponential waiting time with the given rate (mean `1/rate`).
    #[inline]
    pub fn exponential(&mut self, rate: f64) -> f64 {
        debug_assert!(rate > 0.0);
        // -ln(1 - U) keeps the argument in (0, 1].
        -(-self.uniform()).ln_1p() / rate
    }

    #[inline]
    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Index drawn proportionally to the (non-negative) weights.
    pub fn pick_weighted(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut target = self.uniform() * total;
        for (i, w) in weights.iter().enumerate() {
            target -= w;
            if target < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Poisson sample. Inversion by sequential search for small means, the
    /// PTRS transformed-rejection sampler (Hörmann 1993) for large ones.
    pub fn poisson(&mut self, lambda: f64) -> u64 {
        debug_assert!(lambda >= 0.0);
        if lambda == 0.0 {
            0
        } else if lambda < 10.0 {
            self.poisson_inversion(lambda)
        } else {
            self.poisson_ptrs(lambda)
        }
    }

    fn poisson_inversion(&mut self, lambda: f64) -> u64 {
        let mut k = 0u64;
        let mut p = (-lambda).exp();
        let mut cum = p;
        let u = self.uniform();
        while u > cum {
            k += 1;
            p *= lambda / k as f64;
            cum += p;
            if k > 200 {
                break; // cum ~ 1 within f64 by here for lambda < 10
            }
        }
        k
    }

    fn poisson_ptrs(&mut self, lambda: f64) -> u64 {
        let slam = lambda.sqrt();
        let loglam = lambda.ln();
        let b = 0.931 + 2.53 * slam;
        let a = -0.059 + 0.02483 * b;
        let inv_alpha = 1.1239 + 1.1328 / (b - 3.4);
        let v_r = 0.9277 - 3.6224 / (b - 2.0);
        loop {
            let u = self.uniform() - 0.5;
            let v = self.uniform();
            let us = 0.5 - u.abs();
            let k = ((2.0 * a / us + b) * u + lambda + 0.43).floor();
            if us >= 0.07 && v <= v_r {
                return k as u64;
            }
            if k < 0.0 || (us < 0.013 && v > us) {
                continue;
            }
            let lhs = (v * inv_alpha / (a / (us * us) + b)).ln();
            let rhs = k * loglam - lambda - libm::lgamma(k + 1.0);
            if lhs <= rhs {
                return k as u64;
            }
        }
    }
}
