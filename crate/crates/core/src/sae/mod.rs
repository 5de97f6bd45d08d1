//! Sparse autoencoder mathematics and checkpoint I/O.

mod checkpoint;
mod model;

pub use checkpoint::{
    checkpoint_bytes, load_model, model_from_bytes, save_model, CheckpointInfo, VSSA_MAGIC,
    VSSA_VERSION,
};
pub use model::{fvu_of, select_topk, SaeModel, Selection, SparseCode};
