pub mod error;
pub mod eval;
pub mod gibbs;
pub mod mlg;
pub mod models;
pub mod rng;
pub mod spatial;
pub mod stats;
pub mod survey;

pub use error::{Error, Result};
