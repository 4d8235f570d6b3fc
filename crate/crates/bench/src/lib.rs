//! Fixed inputs shared by the benchmarks.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zoomnet_core::boxes::BBox;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` scored boxes clustered so NMS has real work to do.
pub fn scored_boxes(n: usize, seed: u64) -> Vec<BBox> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let (cx, cy) = (r.random_range(0.0..256.0), r.random_range(0.0..256.0));
            let (w, h) = (r.random_range(8.0..96.0), r.random_range(8.0..96.0));
            BBox::from_center(cx, cy, w, h).with_score(r.random())
        })
        .collect()
}
