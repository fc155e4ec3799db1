//! Weight-sharing neural architecture search at desk scale.

pub mod data;
pub mod error;
pub mod pipeline;
pub mod rank;
pub mod space;
pub mod split;
pub mod supernet;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
