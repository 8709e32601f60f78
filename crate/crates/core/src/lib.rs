//! Class-distribution-guided (CDG) feature gating for human parsing.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that does not
//! touch the filesystem:
//!
//! - [`autodiff`]: tensors, a recording graph with reverse-mode gradients and
//!   a finite-difference checker.
//! - [`labels`]: label maps, one-hot encoding, horizontal/vertical class
//!   distributions, edge labels and mirrored-label flipping.
//! - [`cdg`]: the CDG module (axis pooling, distribution heads, gating maps,
//!   fusion) and its parameters.
//! - [`loss`] and [`metrics`]: training objectives and segmentation scores.
//! - [`pipeline`]: synthetic data, a small encoder/decoder network, SGD with a
//!   polynomial schedule, training and multi-scale flip inference.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod cdg;
pub mod error;
pub mod labels;
pub mod loss;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use autodiff::{Axis, Graph, Mode, NodeId};
pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
