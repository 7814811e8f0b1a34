//! Multi-scale convolutional building blocks, built from scratch.
//!
//! The crate provides:
//!
//! - [`tensor`] — a dense rank-1..4 tensor engine with reverse-mode
//!   automatic differentiation and a finite-difference gradient oracle;
//! - [`blocks`] — hierarchical multi-branch blocks with inverted-bottleneck
//!   branch operators and global-query gating;
//! - [`arch`] — executable model graphs: stem, four backbone stages with a
//!   per-stage kernel protocol, spatial pyramid pooling, a path-aggregation
//!   neck, and a light per-level head;
//! - [`analysis`] — parameter/MAC cost model, effective-receptive-field
//!   contribution maps, inter-branch feature diversity, and a conv kernel
//!   micro-benchmark;
//! - [`train`] — SGD with momentum and a synthetic overfit task exercising
//!   the full graph end to end;
//! - [`io`] — a binary weight container, JSON model configs, PPM/PGM images,
//!   and the command-line interface.
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod analysis;
pub mod arch;
pub mod blocks;
pub mod checks;
pub mod cli;
pub mod error;
pub mod io;
pub mod nn;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{backward, Element, Gradients, Tensor};
