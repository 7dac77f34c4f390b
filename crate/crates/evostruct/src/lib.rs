//! File formats, the embedding cache, checkpoints and the command-line driver
//! around `evostruct-core`.

pub mod cache;
pub mod checkpoint;
pub mod cli;
pub mod dump;
pub mod graph_dump;
pub mod manifest;
pub mod pdb;
pub mod report;
