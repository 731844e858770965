//! Shared fixtures for the criterion benches.

use advlab::network::{IMAGE_PIXELS, IMAGE_SIDE};
use advlab::Tensor;

/// Deterministic pseudo-random images in `[0, 1]`.
pub fn synthetic_batch(n: usize) -> Tensor {
    let data = (0..n * IMAGE_PIXELS)
        .map(|i| (i as f64 * 0.618_033_988_75).fract())
        .collect();
    Tensor::new(vec![n, 1, IMAGE_SIDE, IMAGE_SIDE], data).expect("valid batch shape")
}

pub fn synthetic_labels(n: usize) -> Vec<usize> {
    (0..n).map(|i| i % 10).collect()
}
