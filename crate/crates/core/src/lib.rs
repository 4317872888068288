//! Latent-space compression for generative-model latents.

pub mod autodiff;
mod bytes;
pub mod codec;
pub mod entropy;
pub mod error;
pub mod flow;
pub mod irwin_hall;
pub mod latent;
pub mod nn;
pub mod rans;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Latent64 = latent::LatentCode<f64>;
pub type Latent32 = latent::LatentCode<f32>;
pub type Sequence64 = latent::LatentSequence<f64>;
pub type Sequence32 = latent::LatentSequence<f32>;
pub type Flow64 = flow::StagedFlow<f64>;
pub type Flow32 = flow::StagedFlow<f32>;
pub type Entropy64 = entropy::StagedEntropy<f64>;
pub type Entropy32 = entropy::StagedEntropy<f32>;
pub type Model64 = trainer::LearnedModel<f64>;
pub type Model32 = trainer::LearnedModel<f32>;
pub type Bundle64 = codec::CodecBundle<f64>;
pub type Bundle32 = codec::CodecBundle<f32>;
