//! Joint forecasting of a person's intent to interact, attitude and upcoming
//! action from one second of whole-body pose keypoints.

mod attention;
pub mod augment;
pub mod autograd;
pub mod data;
pub mod encoder;
pub mod error;
pub mod heads;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod synthetic;
pub mod topology;
pub mod training;

pub use error::{Error, Result};
