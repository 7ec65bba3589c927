//! Seeded random streams. Every consumer gets its own ChaCha stream so that
//! adding draws in one place never shifts the numbers seen elsewhere.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;

pub type Rng = ChaCha8Rng;

pub mod stream {
    pub const INIT: u64 = 1;
    pub const SHUFFLE: u64 = 2;
    pub const REPLAY: u64 = 3;
    pub const FISHER: u64 = 4;
    pub const DATA: u64 = 5;
    pub const PROTOTYPES: u64 = 6;
}

pub fn seeded(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Zero-mean normal tensor.
pub fn normal_tensor(rng: &mut Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("sized")
}
