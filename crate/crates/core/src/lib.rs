//! Personality-conditioned image captioning with a speaker-listener game.
//!
//! A decoder-only transformer reads an image feature grid and a trait
//! embedding through extra key/value rows injected into every attention
//! layer. A speaker head predicts the next token; a listener head scores how
//! well a caption fits an (image, trait) pair. Training runs in two phases:
//! cross-entropy plus listener ranking, then self-critical REINFORCE with
//! CIDEr-D and listener hinge rewards.

pub mod agents;
pub mod data;
pub mod error;
pub mod metrics;
pub mod model;
pub mod objectives;
pub mod par;
pub mod tensor;
pub mod tokenizer;
pub mod training;

pub use error::{Error, Result};
