//! Weight-normalized GAN toolkit.
//!
//! Implements a family of weight-normalized layers (strict and affine
//! weight-normalized linear/convolution layers, translated parametric ReLU,
//! weight-normalized addition), batch normalization baselines, declarative
//! DCGAN/ResNet builders with an exact vanilla-to-weight-normalized network
//! transformation, a GAN training loop, reconstruction-based evaluation by
//! gradient descent on the latent code, and Lipschitz bound checks for the
//! weight-normalized critic construction.

pub mod checkpoint;
pub mod data;
pub mod equivalence;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod layers;
pub mod lipschitz;
pub mod netbuild;
pub mod ppm;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::Tensor;
