//! Contrastive product-embedding training at desk scale.
//!
//! Dual MLP encoders map product titles and images into one unit-sphere
//! embedding space, trained with a catalog-aware soft-label InfoNCE loss so
//! duplicate listings stop fighting each other as false negatives. Around
//! that core: category-guided hard-negative batching, a growing batch-size
//! schedule in place of learning-rate decay, two-stream gradient
//! accumulation that rebuilds exact full-batch gradients from micro-batches,
//! a manifest cleaning pipeline (validity rules, perceptual-hash and
//! embedding dedup), and the downstream evaluation protocols (zero-shot
//! transfer, linear probe, fine-tuning, top-1 matching, PCA + k-means
//! clustering with ACC/NMI/ARI, binary F1).
//!
//! Everything is `f64`, hand-differentiated, and checked against independent
//! oracles; see [`verify`] for the self-check suite. Data-parallel paths
//! (feature `parallel`) split over independent outputs and merge in fixed
//! order, so they are bit-identical to the sequential mode.

// Index loops mirror the matrix math they implement.
#![allow(clippy::needless_range_loop)]

pub mod checkpoint;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod exec;
pub mod gradcheck;
pub mod loss;
pub mod manifest;
pub mod matrix;
pub mod optim;
pub mod oracle;
pub mod param;
pub mod pixmap;
pub mod preprocess;
pub mod sampling;
pub mod schedule;
pub mod synth;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use matrix::Matrix;

/// Deterministic rng for tests and benches.
#[doc(hidden)]
pub fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random matrix in [-scale, scale].
#[doc(hidden)]
pub fn random_matrix(rng: &mut impl rand::Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data: Vec<f64> = (0..rows * cols)
        .map(|_| (rng.random::<f64>() * 2.0 - 1.0) * scale)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("finite by construction")
}

/// Random matrix with unit-normalized rows.
#[doc(hidden)]
pub fn random_unit_rows(rng: &mut impl rand::Rng, rows: usize, cols: usize) -> Matrix {
    loop {
        let m = random_matrix(rng, rows, cols, 1.0);
        if let Ok((unit, _)) = encoder::normalize_rows(&m) {
            return unit;
        }
    }
}
