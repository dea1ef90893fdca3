//! Multimodal segmentation with variational complementary-information exchange.
//!
//! One segmentation network ("segmentor") is trained per input modality; each
//! segmentor predicts only the target regions assigned to its modality.  At every
//! decoder stage the segmentors exchange encoder feature maps ("messages"),
//! gate them with learned attention, compress the gated features into Gaussian
//! latents, and re-inject sampled latents into their own decoding path.  A
//! KL penalty on the latents squeezes out information the receiving segmentor
//! already has, so the latents concentrate on what the other modalities can
//! contribute.
//!
//! The crate is organised around that pipeline:
//!
//! * [`config`] — modality/region vocabulary, task assignment, architecture and
//!   training hyperparameters, config-file parsing.
//! * [`autodiff`] — a small reverse-mode tape over dynamic-rank `f64` tensors
//!   (convolutions, normalisation, the usual pointwise ops, Adam).
//! * [`oracle`] — exact information-theoretic quantities on small discrete
//!   distributions, used to validate the bound structure the losses rely on.
//! * [`nn`] — encoder/decoder blocks, the message-gating units, checkpointing.
//! * [`losses`] / [`training`] — loss terms and the joint training loop.
//! * [`shapes`] — a two-modality 2-D composition task small enough to train in
//!   a test run, demonstrating that the latents localise complementary content.
//! * [`metrics`] — Dice, HD95 and multi-segmentor region ensembling.
//! * [`cam`] — gradient-weighted class activation maps over the exchanged
//!   latents, and per-modality contribution weights derived from them.
//! * [`data`] — on-disk volume format, dataset manifests, synthetic volumes.

pub mod autodiff;
pub mod cam;
pub mod config;
pub mod data;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod oracle;
pub mod shapes;
pub mod training;

pub use error::CimlError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, CimlError>;
