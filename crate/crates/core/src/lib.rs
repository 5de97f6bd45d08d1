//! Top-k sparse autoencoders over cached embeddings, and steering of those
//! embeddings through their sparse codes for zero-shot classification.
//!
//! The crate works on precomputed embedding bundles (see [`bundle`]): it
//! trains SAEs ([`train`]), builds per-sample and retrieval-contrastive
//! steering vectors ([`steering`], [`retrieval`]) and measures their effect
//! on a cosine classifier head ([`eval`]).

pub mod bundle;
pub mod cli;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod retrieval;
pub mod sae;
pub mod steering;
pub mod synthetic;
pub mod train;

pub use bundle::{ClassifierHead, EmbeddingBundle};
pub use error::{Error, Result};
pub use sae::{SaeModel, Selection, SparseCode};
pub use steering::{SteeringConfig, SteeringVector};
