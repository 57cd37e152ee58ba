//! Joint multimodal variational autoencoders.
//!
//! Trains and evaluates a joint generative model of two modalities (images x
//! and labels w) that conditions both on one latent variable, next to VAE and
//! CVAE baselines. Inference with a missing modality runs either by
//! zero-filling the joint encoder's absent input (`jmvae-zero`) or through
//! dedicated single-modality encoders regularized toward the joint encoder
//! (`jmvae-kl`).
//!
//! Everything runs on a small reverse-mode autodiff engine over dense
//! tensors ([`tape`]), with a run-level precision switch: `f64` for test
//! suites and numeric oracles, `f32` for training speed. Test-time
//! log-likelihoods are importance-weighted lower bounds ([`eval`]), checkable
//! against a trapezoid quadrature oracle on 1-D and 2-D latent spaces.

pub mod checkpoint;
pub mod data;
pub mod dist;
pub mod eval;
pub mod model;
pub mod nn;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use data::BimodalDataset;
pub use dist::{DiagGaussian, GaussianParams, LikelihoodFamily, LikelihoodParams, ModalitySpec};
pub use eval::{BoundReport, BoundSpec, EncoderPath, QuadTarget, QuadratureGrid, Target};
pub use model::{EncoderRole, LossBreakdown, Modality, ModelConfig, ModelHandle, Variant};
pub use rng::RngHub;
pub use tape::{grad_check, Gradients, Tape, Var};
pub use tensor::{Scalar, Tensor, TensorError};
pub use train::{AdamState, MetricsRow, TrainConfig};
