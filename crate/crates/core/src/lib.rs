pub mod autodiff;
pub mod config;
pub mod contrastive;
pub mod encoders;
pub mod error;
pub mod grounding;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod reasoning;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
