//! Data, training, inference and reporting around the core network.

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod plot;
pub mod predict;
pub mod synth;
pub mod train;

pub use checkpoint::{Manifest, Model, Stamp};
pub use config::{desk_model, NoiseMode, Normalization, TrainConfig};
pub use data::{ingest, DatasetSpec, Layout, Sample};
pub use predict::{predict, predict_many, Prediction};
pub use train::{finetune, train, validate, EpochRecord, Phase, TrainOutcome, ValScores};
