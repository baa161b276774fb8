pub mod analysis;
pub mod cli;
pub mod consist;
pub mod controller;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod seed;
pub mod sim;
pub mod sls;
pub mod topology;

pub use error::{Error, Result};
