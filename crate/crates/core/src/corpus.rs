//! Random system generators shared by tests, the acceptance suite and
//! `selftest`.

use rand::Rng;

use crate::linalg::{CVec, C64};
use crate::ssm::DiagonalSsm;

/// Random asymptotically stable diagonal system of order `n`.
///
/// Poles sit at `Re in [-1, -0.1]` with imaginary parts spread about one unit
/// apart, and `|B_i|, |C_i|` lie in `[0.5, 1.5]`. That keeps the system
/// controllable and observable with Gramians conditioned well enough for the
/// balancing identities to be checked at tight tolerances.
pub fn random_stable_system(rng: &mut impl Rng, n: usize) -> DiagonalSsm {
    let mut lambda = Vec::with_capacity(n);
    for i in 0..n {
        let im = (i as f64 - 0.5 * n as f64) + rng.random_range(-0.3..0.3);
        lambda.push(C64::new(-rng.random_range(0.1..1.0), im));
    }
    let b = random_unit_scale(rng, n);
    let c = random_unit_scale(rng, n);
    let delta = rng.random_range(0.01..0.1);
    DiagonalSsm::new(lambda, b, c, delta).expect("generated system is valid")
}

/// Complex entries with modulus in `[0.5, 1.5]` and uniform phase.
pub fn random_unit_scale(rng: &mut impl Rng, n: usize) -> CVec {
    (0..n)
        .map(|_| C64::from_polar(rng.random_range(0.5..1.5), rng.random_range(0.0..std::f64::consts::TAU)))
        .collect()
}
