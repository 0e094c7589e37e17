//! Simile recognition over heterogeneous sentence graphs.

pub mod artifact;
pub mod cli;
pub mod config;
pub mod corpus;
pub mod distill;
pub mod encoder;
pub mod evalkit;
pub mod heads;
pub mod hetgraph;
pub mod model;
pub mod tensor;
