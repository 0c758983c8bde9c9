pub mod acquisition;
pub mod diffkit;
pub mod embeddings;
pub mod error;
pub mod harness;
pub mod metafeatures;
pub mod surrogates;
pub mod taskgen;

pub use error::{Error, Result};
