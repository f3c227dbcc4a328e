//! Seeded initialisation.
//!
//! All randomness flows through [`Rng`], ChaCha8 seeded via
//! `SeedableRng::seed_from_u64`. Same seed, same stream, on every platform.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform Xavier/Glorot bound `sqrt(6 / (fan_in + fan_out))`.
///
/// `shape[0]` is fan-out and the product of the remaining extents is fan-in,
/// matching the `out × in` weight layout used throughout.
pub fn xavier_bound(shape: &[usize]) -> Result<f64> {
    if shape.len() < 2 || shape.contains(&0) {
        return Err(Error::InvalidShape {
            shape: shape.to_vec(),
            reason: "xavier init needs at least two positive extents".into(),
        });
    }
    let fan_out = shape[0] as f64;
    let fan_in = shape[1..].iter().product::<usize>() as f64;
    Ok((6.0 / (fan_in + fan_out)).sqrt())
}

pub fn xavier_init(shape: &[usize], seed: u64) -> Result<Tensor> {
    xavier_with(shape, &mut rng(seed))
}

pub fn xavier_with(shape: &[usize], rng: &mut Rng) -> Result<Tensor> {
    let bound = xavier_bound(shape)?;
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Standard normal samples scaled by `std` (Box-Muller).
pub fn normal_with(shape: &[usize], std: f64, rng: &mut Rng) -> Result<Tensor> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| std * standard_normal(rng)).collect();
    Tensor::new(shape.to_vec(), data)
}

pub fn standard_normal(rng: &mut Rng) -> f64 {
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}
