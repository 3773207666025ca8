//! Compound-conditioned multimodal diffusion at desk scale.
//!
//! Three synthetic modalities (image, audio, text) rendered from a shared
//! hidden concept are encoded into one unit-sphere latent space; a UNet
//! denoiser generates each modality from an interpolated condition while a
//! zero-initialized trainable copy of its encoder injects per-condition
//! residuals into the skip connections.
//!
//! All models are generic over [`Scalar`] (`f32` for training, `f64` for
//! gradient verification); the aliases below name the common instantiations.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod control;
pub mod data;
pub mod diffusion;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod latent;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;
pub mod unet;

pub use autodiff::{Gradients, Graph, Primitive, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamSet};
pub use scalar::{DType, Scalar};
pub use tensor::Tensor;

pub type Tensor32 = Tensor<f32>;
pub type Tensor64 = Tensor<f64>;
pub type Graph32 = Graph<f32>;
pub type Graph64 = Graph<f64>;
pub type Encoder32 = encoders::AlignmentEncoder<f32>;
pub type Encoder64 = encoders::AlignmentEncoder<f64>;
pub type UNet32 = unet::UNet<f32>;
pub type UNet64 = unet::UNet<f64>;
pub type ControlNet32 = control::ControlNet<f32>;
pub type ControlNet64 = control::ControlNet<f64>;
