//! Command-line front end: run configuration, file formats, checkpoints and
//! the train/infer/eval/ablate/gradcheck drivers.

pub mod checkpoint;
pub mod config;
pub mod io;
pub mod run;
