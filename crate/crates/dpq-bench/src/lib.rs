//! Shared fixtures for the pipeline benchmarks: one mid-sized descriptor
//! set, a fitted codebook, a decoder, and a scene, all deterministic so
//! bench runs are comparable across machines and sessions.

use dpq_core::{
    fit_codebook, synth_descriptors, synth_scene, Codebook, DecoderWeights, DescriptorSet, Matrix,
    Rng, ScenePointSet,
};

pub const DIM: usize = 32;
pub const M: usize = 4;
pub const K: usize = 16;
pub const HIDDEN: usize = 64;
pub const BATCH: usize = 256;
pub const SEED: u64 = 7;

/// 800 descriptors in 8 clusters, the corpus every benchmark draws from.
pub fn descriptor_set() -> DescriptorSet {
    synth_descriptors(8, 100, DIM, 0.1, SEED).expect("synth descriptors")
}

pub fn codebook(set: &DescriptorSet) -> Codebook {
    fit_codebook(set, M, K, 10, SEED).expect("fit codebook")
}

pub fn decoder() -> DecoderWeights {
    DecoderWeights::init(DIM, HIDDEN, SEED).expect("decoder init")
}

/// A dense random batch, independent of the cluster structure.
pub fn random_batch(rows: usize) -> Matrix {
    let mut rng = Rng::seeded(SEED ^ 0x5eed);
    let mut m = Matrix::zeros(rows, DIM);
    for i in 0..rows {
        for v in m.row_mut(i) {
            *v = rng.normal();
        }
    }
    m
}

pub fn scene(points: usize) -> ScenePointSet {
    synth_scene(points, 8, SEED).expect("synth scene")
}
