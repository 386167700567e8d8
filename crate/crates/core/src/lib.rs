//! Desk-scale machinery for diffusion-based dense prediction.
//!
//! The crate bundles the numerical pieces needed to run and verify a
//! diffusion depth/normals pipeline end to end without pretrained weights:
//!
//! - [`grid`] — dense scalar/vector fields with validity masks, order
//!   statistics, bilinear resampling, and least-squares fitting;
//! - [`schedule`] — DDPM noise schedules, DDIM stepping with leading/trailing
//!   spacing, zero-terminal-SNR rescaling, parameterization conversions, and
//!   the consistency-distillation math (boundary coefficients, Pseudo-Huber
//!   loss, EMA updates);
//! - [`normalize`] — affine-invariant depth normalization and channel
//!   plumbing for single-channel modalities;
//! - [`ensemble`] — test-time ensembling of affine-invariant predictions and
//!   the nearest-to-mean selection rule for normals;
//! - [`metrics`] — depth, normals, edge, and image-similarity metrics;
//! - [`tiling`] — overlapping-tile fusion and the two-stage high-resolution
//!   pipeline;
//! - [`toy`] — procedural scenes, analytic oracle denoisers, and a small
//!   trainable denoiser with hand-verified gradients, used to exercise the
//!   training and distillation loops at desk scale.
//!
//! All operations are deterministic given their inputs and seeds.

pub mod ensemble;
pub mod error;
pub mod grid;
pub mod metrics;
pub mod normalize;
pub mod schedule;
pub mod tiling;
pub mod toy;

pub use error::{Error, Result};
