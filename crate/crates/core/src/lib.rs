//! overmark — a desk-scale laboratory for watermark overwrite attacks.
//!
//! Encoder–decoder image watermarkers hide a bit string in a carrier image
//! and recover it after everyday distortions. This crate demonstrates a
//! failure mode of that design: embedding a *second* watermark into an
//! already protected image largely destroys the first payload, because the
//! imperceptibility objective teaches every encoder to treat existing
//! watermark perturbations as disposable texture. It also implements the
//! countermeasure: a fine-tuning stage that simulates the overwrite attack
//! inside the training loop and adds a resilience loss so the original
//! payload stays decodable after repeated re-embeddings.
//!
//! The pieces:
//! - [`codec`]: tiny differentiable encoder/decoder/discriminator models,
//!   watermark embedding and extraction;
//! - [`distortion`]: the differentiable noise channel applied between
//!   embedding and decoding;
//! - [`attacks`]: re-embedding attack chains and evaluation suites
//!   (same-model and cross-model);
//! - [`training`]: task and resilience losses, baseline training and
//!   resilience fine-tuning, gradient verification;
//! - [`metrics`]: bit error rate, PSNR, SSIM, residual visualization;
//! - [`harness`]: configs, datasets, CSV/chart reports and the CLI plumbing.
//!
//! Everything is CPU-only `f64`, fully seeded and deterministic on a given
//! platform.

pub mod attacks;
pub mod autodiff;
pub mod checkpoint;
pub mod codec;
pub mod distortion;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod training;

pub use error::{Error, Result};
