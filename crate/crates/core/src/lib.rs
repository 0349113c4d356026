//! Late-interaction multimodal retrieval over knowledge-base documents that
//! carry images of the entities they mention.
//!
//! Queries (image plus question) and documents (text plus main-entity image
//! plus related-entity images) are encoded into sets of unit vectors and
//! compared token by token with MaxSim.

pub mod augment;
mod binio;
pub mod datagen;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod index;
pub mod records;
pub mod rng;
pub mod scoring;
pub mod synth;
pub mod text;
pub mod train;
pub mod vector;

pub use error::{Error, ErrorClass, Result};
