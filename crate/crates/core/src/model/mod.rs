//! The federated view of a classifier: feature extractor, classification
//! head, and client-side training.

mod checkpoint;
mod client;
mod params;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use client::{ClientState, LossMode};
pub use params::{init_model, FeatureLayer, ParamSet};
