//! Radio-frequency fingerprinting of UWB devices from channel impulse
//! responses: preprocessing, encoders trained with an angular-margin loss,
//! and open-set re-identification metrics.

pub mod autodiff;
pub mod datastore;
pub mod embedding;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod reid;
pub mod signal;

pub use error::{Error, Result};
