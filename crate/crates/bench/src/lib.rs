//! Shared fixtures for the benchmarks.

use rtlab_core::data::{gaussian_noise_inputs, synth_glyphs, Dataset, GlyphParams};
use rtlab_core::Tensor;

/// Standard normal tensor of the given shape.
pub fn noise(shape: &[usize], seed: u64) -> Tensor {
    let ds = gaussian_noise_inputs(shape[0], &shape[1..], 1.0, seed).expect("valid noise shape");
    ds.inputs
}

/// Glyph images as used by the desk-scale experiments.
pub fn glyphs(n: usize) -> Dataset {
    synth_glyphs(n, &GlyphParams::default(), 7).expect("valid glyph parameters")
}
