//! Scene classification by searching a scene graph merged with a knowledge
//! graph of compound concepts.

pub mod error;
pub mod exec;
pub mod graph;
pub mod ingest;
pub mod kg;
pub mod merge;
pub mod search;
pub mod synth;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
