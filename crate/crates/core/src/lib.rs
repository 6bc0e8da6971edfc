pub mod cli;
pub mod dist;
pub mod equilibrium;
pub mod error;
pub mod experiments;
pub mod firstbest;
pub mod hardness;
pub mod market;
pub mod mcsim;
pub mod stardesign;

pub use error::{Error, Result};
