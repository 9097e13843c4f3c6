pub mod assignment;
pub mod backbone;
pub mod data;
pub mod decoder;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod inference;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod query_engine;

pub use error::{Error, Result};
