//! Seeded inputs shared by the benchmarks.

use densemtl_core::data::Intrinsics;
use densemtl_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn features(b: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::randn(vec![b, c, h, w], 1.0, &mut rng(seed))
}

/// Depth of a tilted plane seen through `k`, row-major `h * w`.
pub fn plane_depth(h: usize, w: usize, k: &Intrinsics) -> Vec<f64> {
    (0..h * w)
        .map(|i| {
            let (u, v) = ((i % w) as f64, (i / w) as f64);
            6.0 / (1.0 - 0.3 * (u - k.cx) / k.fx + 0.2 * (v - k.cy) / k.fy)
        })
        .collect()
}
