pub mod config;
pub mod data;
pub mod error;
pub mod flownet;
pub mod graph;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod refine;
pub mod synthgen;
pub mod tensor;
pub mod viz;
pub mod warp;
