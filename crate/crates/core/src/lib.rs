//! Structured-matrix parameter-efficient fine-tuning for point-cloud
//! models.
//!
//! The crate is organized around five pieces:
//!
//! * [`tensor`] / [`rng`] / [`autodiff`] / [`optim`] — dense f64 tensors,
//!   seeded generation, a reverse-mode tape over a fixed op set, and
//!   optimizers;
//! * [`structured`] — block-diagonal factors and the Monarch operator,
//!   with dense / low-rank / Kronecker block parameterizations;
//! * [`geometry`] — farthest point sampling, KNN graphs, inverse-distance
//!   weights, and K-Rectify token mixing;
//! * [`peft`] — the Point Monarch operator, reparameterized linear layers,
//!   inference-time merging, and the multi-layer fusion head;
//! * [`backbone`] — a small deterministic point-cloud transformer with
//!   checkpointing, the host for PEFT injection.

pub mod autodiff;
pub mod backbone;
pub mod error;
pub mod geometry;
pub mod optim;
pub mod params;
pub mod peft;
pub mod rng;
pub mod structured;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
