pub mod dataio;
pub mod diffcore;
pub mod encoder;
pub mod eval;
pub mod error;
pub mod optim;
pub mod aam;
pub mod cli;
pub mod attention;
pub mod config;
pub mod model;
pub mod pooling;
pub mod synthetic;
pub mod train;

pub use error::{Error, Result};
