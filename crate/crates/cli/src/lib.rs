//! Command-line pipeline around the `atomic-nli` library: datasets, run
//! directories, stage orchestration, reports, the rug plot, and the
//! annotation service.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod rugplot;
pub mod run;
pub mod server;
pub mod stages;
