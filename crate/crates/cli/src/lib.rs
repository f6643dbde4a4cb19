//! File formats, configuration, stage orchestration and the `vflow`
//! command-line front end over [`vflow_core`].

pub mod checkpoint;
pub mod config;
pub mod formats;
pub mod pipeline;
pub mod cli;
