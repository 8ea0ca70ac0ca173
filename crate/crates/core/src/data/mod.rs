//! Datasets, synthetic data, checkpoints and image/curve output.

pub mod checkpoint;
pub mod dataset;
pub mod render;

pub use checkpoint::{Checkpoint, CheckpointError};
pub use dataset::{load_folder, noise_texture, synth_dataset, Dataset, SynthConfig, SynthKind};
pub use render::{montage, read_curve, save_curve, save_montage};
