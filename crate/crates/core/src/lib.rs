//! Speculative decoding on small CPU transformers.

pub mod attention;
pub mod distill;
pub mod drafttree;
pub mod engine;
pub mod error;
pub mod kvstore;
pub mod model;
pub mod numcore;
pub mod sampling;

pub use error::{Error, Result};
