// SPDX-License-Identifier: Apache-2.0

//! Credal attention: attention weights read as the mean of a Dirichlet whose
//! concentrations are `exp(score) + 1`, with the per-query vacuity
//! `L / Σα` as an uncertainty signal.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`], [`autodiff`]: dense `f64` tensors and a reverse-mode tape.
//! * [`attention`]: standard and credal scaled dot-product attention, and the
//!   multi-head wrapper.
//! * [`model`]: a small pre-norm Transformer encoder classifier with a
//!   vacuity readout, plus checkpoints.
//! * [`data`]: seeded in-distribution, out-of-distribution and nonsense
//!   token sequences.
//! * [`train`]: cross-entropy, Adam, the training loop, uncertainty
//!   evaluation, abstention and the model-level gradient check.
//! * [`flops`], [`bench`]: analytic FLOP counts and wall-clock comparison of
//!   the two mechanisms.

pub mod attention;
pub mod autodiff;
pub mod bench;
pub mod data;
pub mod error;
pub mod flops;
pub(crate) mod kernels;
pub mod mask;
pub mod model;
pub mod rng;
pub mod tensor;
pub mod train;

pub use attention::{EvidenceFn, Mechanism};
pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use kernels::{gelu, sigmoid, softplus};
pub use mask::Mask;
pub use model::{ClassifierOutput, ModelConfig, ModelParams};
pub use tensor::Tensor;
pub use train::{TrainConfig, UncertaintyReport};
