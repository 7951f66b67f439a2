//! File formats, run configuration and the experiment pipeline around
//! `cdl-core`. The `cdl` binary is a thin wrapper over [`pipeline`].

pub mod config;
pub mod error;
pub mod formats;
pub mod model;
pub mod pipeline;
pub mod verify;
pub mod volume_io;

pub use error::{Error, Result};
