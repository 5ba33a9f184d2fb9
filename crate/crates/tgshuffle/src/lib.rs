//! File formats, run directories and the command line around
//! [`tgshuffle_core`].

pub mod cli;
pub mod config;
pub mod error;
pub mod io;
pub mod run;

pub use error::{Error, Result};
