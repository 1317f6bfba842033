pub mod checkpoint;
pub mod config;
pub mod d3po;
pub mod diffusion;
pub mod embedder;
pub mod engine;
pub mod error;
pub mod explicit;
pub mod generator;
pub mod implicit;
pub mod nn;
pub mod pipeline;
pub mod scene;
pub mod session;
pub mod user;

pub use error::{Error, Result};
