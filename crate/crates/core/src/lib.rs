//! Desk-scale pipeline for culturally grounded contrastive training: curate
//! twin-card datasets, featurize them, fine-tune low-rank adapters over frozen
//! linear encoders with a concept-anchored loss, and score the result on
//! statement-ranking and retrieval tasks.

pub mod cli;
pub mod curate;
pub mod encoder;
pub mod error;
pub mod evaluate;
pub mod featurize;
pub mod hashing;
pub mod loss;
pub mod train;
pub mod twin_data;

pub use error::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
