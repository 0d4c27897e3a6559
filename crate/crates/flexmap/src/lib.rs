//! File formats, parallel sweeps, SVG rendering and the command line for
//! P-Q flexibility maps. The numerical core lives in [`flexmap_core`].

pub use flexmap_core as core;

pub mod cli;
pub mod io;
pub mod render;
pub mod report;
pub mod runner;
pub mod sweep_io;
