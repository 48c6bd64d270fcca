//! Fixtures shared by the benchmarks.

use nriqa_core::{synth, ImageTensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A distorted synthetic scene, quantized like a decoded PNG.
pub fn scene(seed: u64, size: usize) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = synth::pristine(&mut rng, size, size);
    synth::distort(&p, synth::Distortion::Noise, 0.3, &mut rng).quantized()
}
