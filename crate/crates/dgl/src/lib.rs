//! Decoupled greedy learning for layered networks.
//!
//! Each module of a partitioned network trains against its own auxiliary
//! classifier, so updates never wait for a global backward pass
//! (update unlocking). A replay buffer between adjacent modules lets them run
//! asynchronously under simulated speed differences (forward unlocking), and
//! an online vector-quantization codec compresses both the activations sent
//! between modules and the buffers that store them, with exact bit
//! accounting.
//!
//! Start from [`presets`] for ready-made desk-scale experiments, or run the
//! `dgl` binary (`train`, `compress-report`, `check-grad`, `theory-probe`).

pub mod buffer;
pub mod config;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod layers;
pub mod loss;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod presets;
pub mod scheduler;
pub mod seed;
pub mod sync;
pub mod tensor;
pub mod vq;

pub use error::{Error, Result};
pub use tensor::{Scalar, Shape, Tensor};
