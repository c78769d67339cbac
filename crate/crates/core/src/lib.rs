//! Soft contrastive learning of tracking representations from point annotations.

pub mod error;
pub mod geometry;
pub mod autodiff;
pub mod backbone;
pub mod cli;
pub mod data;
pub mod imaging;
pub mod socl;
pub mod top_prior;
pub mod tracker;
pub mod trainer;

pub use error::{Error, Result};
