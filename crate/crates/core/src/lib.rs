pub mod binarize;
pub mod cluster;
pub mod error;
pub mod forest;
pub mod ingest;
pub mod landscape;
pub mod mem;
pub mod pipeline;
pub mod report;
pub mod stats;
pub mod synth;
pub mod table;
pub mod rng;

pub use error::{Error, Result};
