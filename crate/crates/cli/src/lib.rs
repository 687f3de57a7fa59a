//! Reproducibility shell around the measure-valued diffusion laboratory:
//! configuration files, the experiment registry, CSV/JSON formats, run
//! manifests and the replica-parallel runner.

pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod registry;
pub mod runner;

pub use error::{Error, Result};
pub use manifest::RunManifest;
