//! Seeded inputs shared by the benchmarks.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sparks_core::{select_random, Codebook, ConvGeometry, SignMap, SubCodebook};

/// A random `±1` map of `c×h×w`.
pub fn sign_map(c: usize, h: usize, w: usize, seed: u64) -> SignMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<i8> = (0..c * h * w).map(|_| if rng.random() { 1 } else { -1 }).collect();
    SignMap::new(c, h, w, data).expect("±1 values")
}

/// Random 3×3 sub-codebook of `n` words and per-kernel indices for `geom`.
pub fn coded_layer(geom: &ConvGeometry, n: usize, seed: u64) -> (SubCodebook, Vec<u32>) {
    let book = Codebook::new(3).expect("K=3");
    let sub = select_random(seed, n, &book).expect("n <= 512");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5);
    let idx = (0..geom.c_out * geom.c_in).map(|_| rng.random_range(0..n as u32)).collect();
    (sub, idx)
}

pub fn uniform_matrix(n: usize, half_width: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, n), |_| rng.random_range(-half_width..half_width))
}
