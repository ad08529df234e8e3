//! IO, file formats, corpus generation, training/evaluation drivers, and
//! the `mpn` CLI for the part-aware re-identification laboratory. The
//! numeric engine lives in `mpn-core`.

pub mod ablate;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod evaluate;
pub mod pnm;
pub mod priordebug;
pub mod settings;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
