pub mod cli;
pub mod elements;
pub mod engine;
pub mod error;
pub mod geometry;
pub mod linegraph;
pub mod md;
pub mod neighborlist;
pub mod partitioner;
pub mod potential;
pub mod system;

pub use error::{Error, Result};
pub use system::AtomicSystem;
