#![allow(dead_code)]

pub mod oracle;

use agcd::tensor::{Graph, Result, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// Uniform values with magnitude in `[lo, hi]` and random sign (away from kinks at 0).
pub fn away_from_zero<T: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let m = rng.random_range(lo..hi);
            if rng.random_bool(0.5) { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape.to_vec(), &data).unwrap()
}

/// `sum(v * R)` for a fixed pseudo-random `R`, so every output element
/// contributes a distinct weight to the gradient.
pub fn weighted_sum<T: Scalar>(g: &mut Graph<T>, v: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(v).to_vec();
    let w = away_from_zero::<T>(&mut rng(seed), &shape, 0.5, 1.0);
    let w = g.constant(w);
    let p = g.mul(v, w)?;
    g.sum(p)
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "index {i}: {x} vs {y} (tol {tol})");
    }
}
