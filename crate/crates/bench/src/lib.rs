//! Shared fixtures for the benchmarks.

use nalgebra::{DMatrix, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use resple::estimator::BlockDiagonal;
use resple::so3::exp_at_identity;
use resple::spline::OrientationSegment;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn small_vec(r: &mut ChaCha8Rng, scale: f64) -> Vector3<f64> {
    Vector3::new(r.random_range(-scale..scale), r.random_range(-scale..scale), r.random_range(-scale..scale))
}

pub fn orientation_segment(seed: u64) -> OrientationSegment {
    let mut r = rng(seed);
    let base = exp_at_identity(&small_vec(&mut r, 2.0));
    let deltas = [small_vec(&mut r, 0.3), small_vec(&mut r, 0.3), small_vec(&mut r, 0.3), small_vec(&mut r, 0.3)];
    OrientationSegment::new(base, deltas).expect("increments are small")
}

/// Well-conditioned covariance `A Aᵀ + I` of size `n`.
pub fn spd(n: usize, seed: u64) -> DMatrix<f64> {
    let mut r = rng(seed);
    let a = DMatrix::from_fn(n, n, |_, _| r.random_range(-0.5..0.5));
    &a * a.transpose() + DMatrix::identity(n, n)
}

/// Dense `m × n` Jacobian and scalar measurement noise.
pub fn measurement(m: usize, n: usize, seed: u64) -> (DMatrix<f64>, BlockDiagonal) {
    let mut r = rng(seed);
    let h = DMatrix::from_fn(m, n, |_, _| r.random_range(-1.0..1.0));
    let noise = BlockDiagonal::new((0..m).map(|_| DMatrix::from_element(1, 1, 0.01)).collect());
    (h, noise)
}

/// Points scattered over the six faces of a 20 m box.
pub fn room_cloud(n: usize, seed: u64) -> Vec<Vector3<f64>> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let mut p = small_vec(&mut r, 10.0);
            let axis = r.random_range(0..3);
            p[axis] = if r.random_bool(0.5) { 10.0 } else { -10.0 };
            p
        })
        .collect()
}
