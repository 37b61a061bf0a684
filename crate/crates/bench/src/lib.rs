//! Fixtures shared by the benchmarks.

use std::sync::Arc;

use mlvc_core::entropy::{GaussianConditional, TableSet};
use mlvc_core::media::{synth_motion_clip, SynthMotion};
use mlvc_core::Frame;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A smoothly moving synthetic clip.
pub fn clip(frames: usize, size: (usize, usize)) -> Vec<Frame> {
    synth_motion_clip(SynthMotion::shift(1.5, 0.5), frames, size, 1).frames
}

/// `n` rounded Gaussian symbols with their scale-table ids.
pub fn gaussian_symbols(n: usize, seed: u64) -> (Vec<i32>, Vec<usize>, Arc<TableSet>) {
    let tables = GaussianConditional::new().tables();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..n).map(|_| rng.random_range(0..tables.len())).collect();
    let values = ids
        .iter()
        .map(|&i| {
            let spread = 1 + i as i32 / 4;
            rng.random_range(-spread..=spread)
        })
        .collect();
    (values, ids, tables)
}
