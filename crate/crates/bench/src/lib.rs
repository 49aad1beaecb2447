//! Deterministic inputs shared by the benchmarks.

use crashseq_core::dataio::FeatureSequence;
use image::{Rgb, RgbImage};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// A smooth colour texture shifted right by `shift` pixels.
pub fn texture(size: u32, shift: f32) -> RgbImage {
    RgbImage::from_fn(size, size, |x, y| {
        let (x, y) = (x as f32 - shift, y as f32);
        let t = (x * 0.11).sin() * (y * 0.09).cos() + 0.6 * (x * 0.05 + y * 0.07).sin();
        let g = (127.5 + 75.0 * t) as u8;
        Rgb([g, g / 2 + 60, 255 - g])
    })
}

/// `n` random sequences with lengths cycling through `min_len..=max_len`.
pub fn sequences(n: usize, dim: usize, min_len: usize, max_len: usize, seed: u64) -> Vec<FeatureSequence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let t = min_len + i % (max_len - min_len + 1);
            let data = Array2::from_shape_simple_fn((t, dim), || rng.random_range(-1.0f32..1.0));
            FeatureSequence::new(format!("s{i}"), data).expect("finite features")
        })
        .collect()
}
