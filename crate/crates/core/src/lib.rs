//! Alignment-deformation talking-face synthesis at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`]: dense tensors with reverse-mode differentiation and
//!   finite-difference checking.
//! * [`audio`]: WAV ingestion, log-mel spectrograms and per-frame windows.
//! * [`encoders`]: audio, source, reference and landmark encoders.
//! * [`alignment`]: residual AdaIN conditioning and contrastive scoring.
//! * [`deformation`]: per-channel affine warping, decoding and blending.
//! * [`losses`]: the five training objectives and their weighted sum.
//! * [`metrics`]: PSNR, SSIM, MSE and lip-sync distance/confidence.
//! * [`pipeline`]: synthetic data, the forward pass, training and CLI plumbing.

pub mod alignment;
pub mod audio;
pub mod deformation;
pub mod encoders;
pub mod error;
pub mod gradsuite;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{backward, GradientMap, Tensor};
