//! Hotspot-centric multimodal emotion recognition in conversations.
//!
//! Per-utterance text, audio and video features are fused with their hotspot
//! counterparts by a learned sigmoid gate, encoded to a shared width, and then
//! processed by two parallel pathways: a routed mixture of cross-modal
//! attention aligners and a relation-typed conversational graph network. The
//! two pathway outputs are concatenated per utterance and classified.
//!
//! Everything runs on a small reverse-mode differentiation engine in
//! [`tensor`], so every component can be checked against finite differences.

pub mod error;
pub mod graph;
pub mod hgf;
pub mod metrics;
pub mod model;
pub mod moa;
pub mod nn;
pub mod par;
pub mod params;
pub mod suite;
pub mod synth;
pub mod tensor;
pub mod train;

mod modality;

pub use error::{Error, Result};
pub use modality::Modality;
pub use par::Parallelism;
