//! Adaptive context normalization with batch- and mixture-normalization
//! baselines, a minimal manually-differentiated training stack, dataset
//! plumbing, and an experiment runner.
//!
//! The crate is organized around the normalization math:
//!
//! - [`tensor`] — dense `(N, C, H, W)` / `(N, C, L)` activation tensors and
//!   the per-channel reductions the transforms share.
//! - [`gmm`] — diagonal-covariance Gaussian mixtures with EM fitting.
//! - [`norm`] — the transforms under comparison: batch normalization,
//!   mixture normalization, context normalization (direct table and
//!   embedding-based variants), and collective inference.
//! - [`net`] — dense/conv/ReLU layers with hand-written backward passes,
//!   AdamW, presets, and a finite-difference gradient checker.
//! - [`data`] — IDX parsing, synthetic generators, context assignment,
//!   batching.
//! - [`metrics`] / [`runner`] — confusion-matrix metrics, gradient-variance
//!   tracking, and the experiment driver behind the CLI.

pub mod data;
pub mod error;
pub mod gmm;
pub mod metrics;
pub mod net;
pub mod norm;
pub mod rng;
pub mod runner;
pub mod tensor;

pub use error::{Error, Result};
