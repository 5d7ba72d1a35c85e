pub mod aggregation;
pub mod checkpoint;
pub mod classifier;
pub mod config;
pub mod data;
pub mod datagen;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod ner;
pub mod numerics;
pub mod padd;
pub mod par;
pub mod params;
pub mod tags;
pub mod training;

pub use error::{Error, Result};
