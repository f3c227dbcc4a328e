//! Hierarchical cross-attention tracking.
//!
//! A compact, CPU-only implementation of an efficient Siamese tracker built
//! around full cross-attention fusion:
//!
//! - [`numerics`]: `f64` tensors with a reverse-mode gradient tape
//! - [`attention`]: multi-head cross-attention and 2-D sine position codes
//! - [`fusion`]: feature sparsification, CFA blocks and hierarchical layers
//! - [`model`]: toy backbone, prediction heads and the assembled network
//! - [`loss`]: sample assignment, weighted BCE, ℓ1 and GIoU
//! - [`tracker`]: crop geometry, window penalty and the online loop
//! - [`profiler`]: analytic MAC accounting and latency benchmarks
//! - [`synthetic`] and [`train`]: generated data and a small SGD trainer

pub mod attention;
mod error;
pub mod fusion;
mod layers;
pub mod loss;
pub mod model;
pub mod numerics;
pub mod profiler;
pub mod synthetic;
pub mod tokens;
pub mod tracker;
pub mod train;

pub use error::{Error, Result};
pub use layers::{Linear, Mlp};
pub use tokens::{Grid, TokenSet, Tokens};
