//! Shared fixtures for the criterion benches.

use dvr_core::synthgen::{generate_sample, DeskBenchmark, SamplePair};

/// First desk-benchmark pair, regenerated at `size` pixels.
pub fn desk_pair(size: usize) -> SamplePair {
    let mut desk = DeskBenchmark::default();
    desk.gen.out_size = size;
    desk.pool_size = 4;
    generate_sample(&desk.gen, &desk.pool(), 0).expect("desk pair")
}
