//! File formats, command line and demonstrations for `gvp-core`.

pub mod cli;
pub mod demos;
pub mod io;
