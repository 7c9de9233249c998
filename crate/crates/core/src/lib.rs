//! Incomplete-multimodal rumor classification with three families of soft
//! prompts.
//!
//! Posts arrive as up to three precomputed feature vectors (text, image,
//! comments) plus a presence mask. The model encodes every observed modality
//! into a Gaussian latent, recovers missing latents from the mean of the
//! observed ones through prompt-conditioned decoders ([`ma`]), tags each latent
//! with an observed/recovered indicator prompt ([`mm`]), fuses the subjective
//! (text, image) and objective (comment) views through a small convolutional
//! pyramid ([`mv`]) and classifies the result ([`objective`]).
//!
//! Everything is differentiated by the tensor tape in [`autodiff`]; the
//! trainer in [`train`] uses bias-corrected Adam and [`gradcheck`] certifies
//! the analytic gradients against central finite differences.

pub mod autodiff;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod layers;
pub mod ma;
pub mod metrics;
pub mod mm;
pub mod model;
pub mod mv;
pub mod objective;
pub mod optim;
pub mod params;
pub mod protocol;
pub mod recon;
pub mod scalar;
pub mod seed;
pub mod synth;
pub mod train;

pub use data::{Dataset, Dims, FeatureRecord, ModalityKind, Mode, PresenceMask, Split};
pub use error::Error;
pub use model::{Ablation, ModelConfig, TriSPrompt};
pub use scalar::Scalar;
pub use train::TrainConfig;
