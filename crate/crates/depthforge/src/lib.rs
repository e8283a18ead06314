//! Synthetic depth-face generation and evaluation toolkit.
//!
//! The pipeline has four stages: a conditional DCGAN trained with an
//! EMA-teacher consistency loss, a genetic algorithm that evolves latent
//! vectors per emotion class, handcrafted-feature emotion classification
//! (HOG, LBP, Sobel and intensity histograms), and a synthetic-data quality
//! report (Fréchet distance over a PCA feature embedding, an inception-score
//! proxy, SSIM and PSNR).
//!
//! Everything runs on the CPU, stores network math as `f32`, accumulates
//! statistics in `f64`, and is deterministic for a fixed seed.

pub mod baselines;
pub mod classify;
pub mod config;
pub mod dataio;
pub mod distill;
pub mod error;
pub mod features;
pub mod ga;
pub mod gan;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Derives a sub-seed from a base seed and a domain tag so independent
/// components (fixture, weight init, GA, splits, ...) get distinct streams.
pub fn derive_seed(base: u64, domain: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = base ^ domain.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
