//! Relation LoRA triplet customization for a miniature multimodal diffusion
//! transformer.
//!
//! The numeric core is generic over [`Scalar`]; the aliases at the crate root
//! pin the `f64` instantiation every trainer and CLI path uses.

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod container;
pub mod datagen;
pub mod denoiser;
pub mod error;
pub mod latent;
pub mod lora;
pub mod mask;
pub mod optim;
pub mod pretrain;
pub mod rcl;
pub mod scalar;
pub mod schedule;
pub mod tensor;
pub mod trainer;
pub mod vocab;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Seeded generator used everywhere a random draw is made.
pub type Rng = rand_chacha::ChaCha8Rng;

pub type Tensor = tensor::Tensor<f64>;
pub type Graph = autodiff::Graph<f64>;
pub use autodiff::Var;
