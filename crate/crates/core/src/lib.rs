//! Retrieval-augmented sequential recommendation.
//!
//! A transformer encoder is pretrained contrastively so that a user's
//! interaction history and the browsing sessions it overlaps with land close
//! together. Browsing sessions are indexed for inner-product search, and a
//! fusion head combines the user's state with the retrieved sessions to
//! score the next item.

pub mod augmentation;
pub mod checkpoint;
pub mod config;
pub mod contrastive;
pub mod dataset;
pub mod encoder;
pub mod error;
pub mod evaluation;
pub mod fusion;
pub mod linalg;
pub mod params;
pub mod retrieval;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
