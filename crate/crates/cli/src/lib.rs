//! Library side of the `lic` command-line tool.

pub mod models;
pub mod report;
