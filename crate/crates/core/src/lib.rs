pub mod config;
pub mod episode;
pub mod error;
pub mod geometry;
pub mod heads;
pub mod nn;
pub mod oracle;
pub mod ppo;
pub mod render;
pub mod rng;
pub mod scene;
pub mod train;

pub use error::{Error, Result};
