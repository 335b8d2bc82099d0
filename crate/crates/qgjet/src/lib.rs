//! File formats, configuration, reports, sweeps and the command line for
//! the `qgjet-core` jet-image toolkit.

pub mod cli;
pub mod config;
pub mod format;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod runtime;
pub mod stats_file;
pub mod sweep;
