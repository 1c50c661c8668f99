//! Library side of the experiment CLI: the record schema, the key=value
//! configuration format, the store pipeline, and every subcommand's
//! implementation (the binary in `main.rs` is a thin argument parser).

pub mod commands;
pub mod config;
pub mod jsonl;
pub mod outdir;
pub mod report;
pub mod store;
