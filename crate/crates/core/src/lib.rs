//! Multitask visual localization on a desk-scale synthetic world.

pub mod autodiff;
pub mod dataio;
pub mod error;
pub mod eval;
mod fsutil;
pub mod fusion;
pub mod geometry;
pub mod gradsuite;
pub mod losses;
pub mod networks;
pub mod synthworld;
pub mod trainer;
pub mod warp;

pub use error::{Error, Result};
