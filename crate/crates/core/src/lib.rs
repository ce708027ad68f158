//! Non-rigid 3D point-cloud registration built around density-aware
//! "surface attention".
//!
//! A Perceiver-style encoder compresses a target cloud into a small set of
//! latent vectors through cross-attention from learnable probes; a decoder
//! conditions the source cloud on those latents and emits deformed
//! coordinates that fit the target geometry. Every attention computed over
//! point-cloud keys reweights its softmax by the keys' estimated local
//! surface area (the inverse of the local point density), which keeps the
//! learned maps stable across sampling densities.
//!
//! The crate contains the full pipeline: a minimal reverse-mode autodiff
//! core with Adam, point-cloud geometry (normalization, density/area
//! estimation, Chamfer distance, nearest-neighbor matching, graph
//! geodesics, resampling), the attention blocks and encoder/decoder model,
//! training with supervised / sparse / unsupervised Chamfer losses,
//! test-time latent refinement, bidirectional dense matching, latent
//! interpolation, attention-stability analysis, synthetic deformable shape
//! families, and plain-text file formats.
//!
//! Data-parallel inner loops (batch members, pairwise-distance kernels,
//! neighbor counting, per-pair refinement) run on rayon when the default
//! `parallel` feature is enabled and fall back to sequential code without
//! it; both paths produce bit-identical results.

pub mod attention;
pub mod autodiff;
pub mod error;
pub mod evaluate;
pub mod geometry;
pub mod io;
pub mod kernels;
pub mod matching;
pub mod model;
pub mod refine;
pub mod scalar;
pub mod stability;
pub mod training;

pub use error::Error;
pub use scalar::{Real, Scalar};

pub type Result<T, E = Error> = std::result::Result<T, E>;
