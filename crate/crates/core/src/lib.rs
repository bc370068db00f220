//! Desk-scale content-based image retrieval built around a miniature dilated
//! residual embedding network.
//!
//! The crate is organized as a pipeline:
//!
//! - [`tensor`]: dense row-major `f64` tensors and the dilated convolution
//!   kernels (forward and backward).
//! - [`tape`]: a single-use reverse-mode autodiff tape over the tensor ops.
//! - [`layers`]: generalized-mean pooling, L2 normalization, fully connected
//!   projection, and the residual block used by the backbone.
//! - [`model`]: the embedding network itself — config, initialization,
//!   deterministic multi-scale region grid, forward embedding, checkpoints.
//! - [`miner`]: online triplet mining over a batch of embeddings, the hinge
//!   loss, and its hand-derived gradient.
//! - [`trainer`]: SGD with momentum and weight decay, label-balanced batch
//!   construction, and the training loop.
//! - [`retrieval`]: exact cosine-distance search, ranking metrics, and the
//!   binary index format.
//! - [`data`]: PPM image I/O, the synthetic labeled dataset generator, and
//!   simple geometric transforms (resize, crops).
//! - [`gradcheck`]: finite-difference verification of every analytic
//!   gradient in the crate.
//! - [`pipeline`]: glue that turns the pieces into end-to-end runs
//!   (train, index, evaluate, compare mining strategies).

pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod miner;
pub mod model;
pub mod pipeline;
pub mod retrieval;
pub mod tape;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{ConvSpec, Tensor};
