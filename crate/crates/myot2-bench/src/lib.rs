//! Shared input builders for the criterion benchmarks.

use myot2_core::synth::{gen_phantom, PhantomSpec};
use myot2_core::{MultiEchoVolume, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Deterministic tensor filled with values in `[0, 1)`.
pub fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    Tensor::new(shape.to_vec(), data)
}

/// Single-slice phantom volume at the standard network input size.
pub fn phantom_volume(seed: u64) -> MultiEchoVolume {
    gen_phantom(&PhantomSpec::randomized(seed)).unwrap().volume
}
