//! Semi-supervised volumetric segmentation by co-training a pretrained 2D
//! slice model with a 3D volume model on each other's pseudo-masks.
//!
//! Data flows `datagen` -> `batching` -> `cotrain` (which drives `models`,
//! `losses`, `schedule` and `optim`) -> `infer` -> `metrics`.

pub mod adapt;
pub mod autograd;
pub mod batching;
pub mod config;
pub mod cotrain;
pub mod datagen;
pub mod error;
pub mod infer;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod optim;
pub mod rng;
pub mod rvol;
pub mod schedule;
pub mod tensor;
pub mod volume;

pub use error::{Error, Result};
