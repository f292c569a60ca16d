//! Training-dynamics laboratory for semi-siamese and multi-agent
//! semi-siamese training on synthetic identity data.

pub mod cli;
pub mod curvature;
pub mod diffcore;
pub mod embedmodel;
pub mod error;
pub mod evalsuite;
pub mod losses;
pub mod rngs;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
