//! Multimodal semantic segmentation with a structured latent projection.
//!
//! The network consumes a stack of co-registered input modalities together
//! with a per-sample binary availability mask. Each modality runs through its
//! own gated multi-scale encoder; per-level fusion produces skip features;
//! per-modality transformers and a cross-source correlation block build a
//! fused deep representation, which is then split into one shared latent and
//! per-modality private latents. Private latents are hard-routed by the mask
//! before the decoder, so the decoder always sees the same input layout
//! regardless of which modalities are present.
//!
//! Besides the model itself the crate carries everything needed to exercise
//! it end to end on synthetic data: dataset generation, training with random
//! modality dropout, scenario evaluation (IoU/F1 per availability pattern),
//! probe-based information-gap analysis, and an exact discrete-entropy
//! harness for the alignment-penalty bound.

pub mod availability;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod infogap;
pub mod io;
pub mod model;
pub mod params;
pub mod probe;
pub mod rng;
pub mod tensor;
pub mod training;

mod attention;
mod correlation;
mod decoder;
mod encoder;
mod fusion;
mod layers;
mod slp;

pub use attention::AttentionConfig;
pub use encoder::EncoderConfig;
pub use error::{Error, Result};
pub use model::{Model, ModelConfig, Variant};

