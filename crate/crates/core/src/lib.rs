//! Progressive depth completion on an inverse Laplacian pyramid.
//!
//! The crate is self-contained: [`tensor`] provides the dense value type and
//! a tape-based reverse-mode engine, and everything above it (pyramids,
//! pooling, fusion, the feature modules, the network and its training loop)
//! is written against that engine.

pub mod baseline;
pub mod config;
pub mod error;
pub mod fusion;
pub mod io;
pub mod loss;
pub mod metrics;
pub mod mfp;
pub mod network;
pub mod nn;
pub mod optim;
pub mod pyramid;
pub mod scene;
pub mod sdf;
pub mod seeds;
pub mod selfcheck;
pub mod sparse;
pub mod sweep;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
