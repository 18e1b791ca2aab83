//! Core library for the PreMixer forecasting engine.

pub mod checkpoint;
pub mod config;
pub mod encodings;
pub mod error;
pub mod data;
pub mod forecaster;
pub mod patch;
pub mod pretrain;
pub mod rng;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod optim;
pub mod tensor;
pub mod workflows;
