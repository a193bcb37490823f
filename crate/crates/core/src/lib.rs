pub mod annulus;
pub mod blender;
pub mod cli;
pub mod config;
pub mod error;
pub mod linearization;
pub mod melnikov;
pub mod mixing;
pub mod nhim;
pub mod numerics;
pub mod reachability;
pub mod skew;

pub use error::{Error, Result};
