//! Image-text contrastive pretraining for echocardiography.

pub mod cli;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod exec;
pub mod guideline;
pub mod negation;
pub mod objectives;
pub mod synthetic;
pub mod training;

pub use error::{Error, Result};
pub use exec::Exec;
