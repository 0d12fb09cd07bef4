//! Listwise training and evaluation for image-retrieval embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: unit-sphere normalization, cosine similarity, GeM pooling
//!   and the dense matrix type shared by everything else.
//! - [`io`]: the `DESC1` descriptor format, label CSVs and ground-truth JSON.
//! - [`exact`]: exact AP / mAP and protocol-aware retrieval evaluation.
//! - [`quantized`]: the histogram-binned, differentiable AP (`AP_Q`) and the
//!   batch loss `1 - mAP_Q`.
//! - [`gradients`]: closed-form gradient of the loss with respect to the
//!   descriptors, plus a finite-difference checker.
//! - [`multistage`] and [`embed`]: three-stage backpropagation over a
//!   pluggable embedder, with forward/backward/update accounting.
//! - [`training`]: Adam, the learning-rate schedule, batch sampling, the
//!   triplet baseline and a synthetic dataset.
//! - [`retrieval`]: PCA whitening, alpha query expansion and top-k reports.

pub mod embed;
pub mod error;
pub mod exact;
pub mod gradients;
pub mod io;
pub mod multistage;
pub mod numerics;
pub mod quantized;
pub mod retrieval;
pub mod training;

pub use error::{Error, Result};
pub use numerics::{DescriptorMatrix, Matrix};
