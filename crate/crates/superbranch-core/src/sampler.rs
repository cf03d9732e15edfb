//! Random valid systems for property and convergence tests.
//!
//! The sampling distribution is part of the test contract, so it is spelled
//! out here rather than left to ad-hoc generators:
//!
//! * sites: uniform on {1, 2, 3};
//! * motion: each off-diagonal q-rate uniform on [0, 1.5], diagonal set to
//!   minus the row sum;
//! * local mechanism per site: drift `b` uniform on [-1, 1], diffusion `c`
//!   uniform on [0, 1], and 0-2 jump atoms with size `u = j/64` for `j`
//!   uniform on 8..=64 and intensity uniform on [0.1, 1];
//! * non-local mechanism per site: rate `beta` uniform on [0, 1.5], one or
//!   two mixture components with normalized weights, displacement laws drawn
//!   from the uniform simplex, deterministic part `d` uniform on [0, 0.9],
//!   and 0-1 count atoms with dyadic size as above and intensity filling at
//!   most 80% of the subcriticality budget `1 - d`.
//!
//! Atom sizes are dyadic (multiples of 1/64) on purpose: `k u` is then an
//! integer at the doubled densities k = 128, 256, ..., so the integer
//! rounding in the particle-law construction cannot jitter the O(1/k) bias
//! that convergence tests measure. Every sampled system has `k_min <= 8`.

use alloc::format;
use alloc::vec::Vec;

use crate::mechanism::{
    CountAtom, DisplacementComponent, JumpAtom, LimitSystemSpec, LocalMechanism, MotionGenerator,
    NonlocalMechanism, SiteSpace, TestFunction,
};
use crate::rng::StreamRng;

fn uniform_in(rng: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.uniform()
}

fn dyadic_size(rng: &mut StreamRng) -> f64 {
    let j = 8 + (rng.next_u64() % 57) as i32; // 8..=64
    j as f64 / 64.0
}

fn simplex(rng: &mut StreamRng, n: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| rng.exponential(1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.iter().map(|x| x / total).collect()
}

/// Draw a valid system from the documented distribution.
pub fn random_spec(rng: &mut StreamRng) -> LimitSystemSpec {
    let n = 1 + (rng.next_u64() % 3) as usize;
    let space = SiteSpace::new((0..n).map(|i| format!("s{i}")).collect()).unwrap();

    let mut qmatrix = alloc::vec![alloc::vec![0.0; n]; n];
    for i in 0..n {
        let mut row_sum = 0.0;
        for j in 0..n {
            if i != j {
                let rate = uniform_in(rng, 0.0, 1.5);
                qmatrix[i][j] = rate;
                row_sum += rate;
            }
        }
        qmatrix[i][i] = -row_sum;
    }

    let mut b = Vec::with_capacity(n);
    let mut c = Vec::with_capacity(n);
    let mut jumps = Vec::with_capacity(n);
    for _ in 0..n {
        b.push(uniform_in(rng, -1.0, 1.0));
        c.push(uniform_in(rng, 0.0, 1.0));
        let n_atoms = (rng.next_u64() % 3) as usize;
        jumps.push(
            (0..n_atoms)
                .map(|_| JumpAtom {
                    size: dyadic_size(rng),
                    intensity: uniform_in(rng, 0.1, 1.0),
                })
                .collect(),
        );
    }

    let mut beta = Vec::with_capacity(n);
    let mut mixtures = Vec::with_capacity(n);
    for _ in 0..n {
        beta.push(uniform_in(rng, 0.0, 1.5));
        let n_comp = 1 + (rng.next_u64() % 2) as usize;
        let weights = simplex(rng, n_comp);
        let comps: Vec<DisplacementComponent> = weights
            .into_iter()
            .map(|weight| {
                let d = uniform_in(rng, 0.0, 0.9);
                let counts = if rng.bernoulli(0.5) {
                    let size = dyadic_size(rng);
                    let intensity = uniform_in(rng, 0.1, 0.8) * (1.0 - d) / size;
                    alloc::vec![CountAtom { size, intensity }]
                } else {
                    Vec::new()
                };
                DisplacementComponent {
                    weight,
                    pi: simplex(rng, n),
                    deterministic: d,
                    counts,
                }
            })
            .collect();
        mixtures.push(comps);
    }

    LimitSystemSpec::new(
        space,
        MotionGenerator::new(qmatrix).unwrap(),
        LocalMechanism::new(b, c, jumps).unwrap(),
        NonlocalMechanism::new(beta, mixtures).unwrap(),
    )
    .unwrap()
}

/// Random test function with values uniform on `[0, sup]`.
pub fn random_test_function(rng: &mut StreamRng, n: usize, sup: f64) -> TestFunction {
    TestFunction::new((0..n).map(|_| uniform_in(rng, 0.0, sup)).collect()).unwrap()
}
