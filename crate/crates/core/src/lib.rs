pub mod bucketing;
pub mod error;
pub mod gateway;
pub mod linalg;
pub mod noise;
pub mod sim;
pub mod softmax;
pub mod stats;
pub mod teacher;
pub mod verify;

pub use error::{LadsError, Result};
