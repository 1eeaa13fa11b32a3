//! MSFPT: full-reference image quality assessment with multi-scale features
//! and parallel transformer encoder–decoders.
//!
//! The crate is organized bottom-up:
//! - [`tensor`]: dense tensors with reverse-mode autodiff and a
//!   finite-difference gradient oracle;
//! - [`nn`]: linear / attention / MLP blocks, parameter store,
//!   initialization, and binary checkpoints;
//! - [`backbone`]: image pyramid, frozen feature extraction, difference
//!   features, and interpolation to the canonical grid;
//! - [`model`]: the per-scale transformer encoder–decoder with quality head
//!   and cross-scale score averaging;
//! - [`train`]: L1 loss, Adam with decoupled weight decay, cosine annealing,
//!   augmentation, and the training loop;
//! - [`metrics`]: PLCC / SRCC / KRCC and the challenge main score;
//! - [`data`]: dataset manifests, image decoding, feature-volume files, and
//!   evaluation reports.

pub mod backbone;
pub mod config;
pub mod data;
pub mod elem;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod tensor;
pub mod train;

pub use config::{ModelConfig, Scale};
pub use elem::Elem;
pub use tensor::{finite_diff_grad, Tensor, TensorError};
