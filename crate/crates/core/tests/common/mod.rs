//! Shared generators for the randomized suites.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use singsmooth::penalties::{Penalty, PenaltyKind};
use singsmooth::{Problem, TimeStep};

pub fn rng(seed: u64) -> StdRng {
    StdRng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut StdRng, rows: usize, cols: usize, scale: f64) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
}

pub fn random_vector(rng: &mut StdRng, len: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(len, |_, _| rng.gen_range(-scale..scale))
}

/// Well-conditioned square factor: a contraction plus the identity.
pub fn conditioned_factor(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
    random_matrix(rng, n, n, 0.3) + DMatrix::identity(n, n)
}

/// Random transition with spectral radius safely below one.
pub fn stable_transition(rng: &mut StdRng, n: usize) -> DMatrix<f64> {
    let raw = random_matrix(rng, n, n, 1.0);
    let scale = 0.9 / raw.norm().max(1e-6) * (n as f64).sqrt();
    raw * scale.min(0.95)
}

/// Nonsingular Gaussian model: full-rank factors, quadratic penalties.
pub fn random_nonsingular_problem(
    rng: &mut StdRng,
    n_steps: usize,
    n: usize,
    m: usize,
) -> Problem {
    let steps: Vec<TimeStep> = (0..n_steps)
        .map(|k| {
            TimeStep::new(
                if k == 0 { DMatrix::identity(n, n) } else { stable_transition(rng, n) },
                conditioned_factor(rng, n),
                random_matrix(rng, m, n, 1.0),
                conditioned_factor(rng, m),
                random_vector(rng, m, 2.0),
            )
        })
        .collect();
    Problem::new(random_vector(rng, n, 1.0), steps).unwrap()
}

/// Singular model: process factors of rank `n / 2`, plus exact measurement
/// rows pinning one state component midway through the horizon.
pub fn random_singular_problem(rng: &mut StdRng, n_steps: usize, n: usize, m: usize) -> Problem {
    assert!(n_steps >= 5);
    let r = n / 2;
    let steps: Vec<TimeStep> = (0..n_steps)
        .map(|k| {
            TimeStep::new(
                if k == 0 { DMatrix::identity(n, n) } else { stable_transition(rng, n) },
                random_matrix(rng, n, r, 1.0) + DMatrix::identity(n, n).columns(0, r) * 0.5,
                random_matrix(rng, m, n, 1.0),
                conditioned_factor(rng, m),
                random_vector(rng, m, 2.0),
            )
        })
        .collect();
    let problem = Problem::new(random_vector(rng, n, 1.0), steps).unwrap();
    let k = n_steps / 2 + 1;
    let idx = rng.gen_range(0..n);
    let value = rng.gen_range(-1.0..1.0);
    problem.add_exact_measurement(k, idx, value).unwrap()
}

/// A random scalar penalty of any kind, with randomized parameters and scale.
pub fn random_scalar_penalty(rng: &mut StdRng) -> Penalty {
    let scale = 10f64.powf(rng.gen_range(-1.0..1.0));
    let kind = match rng.gen_range(0..8) {
        0 => PenaltyKind::Quadratic,
        1 => PenaltyKind::L1,
        2 => PenaltyKind::Quantile { tau: rng.gen_range(0.05..0.95) },
        3 => PenaltyKind::Huber { kappa: rng.gen_range(0.1..5.0) },
        4 => PenaltyKind::QuantileHuber {
            tau: rng.gen_range(0.05..0.95),
            kappa: rng.gen_range(0.1..5.0),
        },
        5 => PenaltyKind::Vapnik { epsilon: rng.gen_range(0.0..2.0) },
        6 => PenaltyKind::Hubnik {
            epsilon: rng.gen_range(0.0..2.0),
            kappa: rng.gen_range(0.1..5.0),
        },
        _ => PenaltyKind::ElasticNet,
    };
    Penalty::new(kind, scale).unwrap()
}
