//! Knowledge-prompted sequential recommendation.

pub mod compile;
pub mod config;
pub mod corpus;
pub mod eval;
pub mod generate;
pub mod ktree;
pub mod maskgen;
pub mod model;
pub mod pipeline;
pub mod prompts;
pub mod synth;
