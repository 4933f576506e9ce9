//! Run configuration, checkpoints, training and the command implementations
//! behind the `equidiff` binary.

#[global_allocator]
static ALLOC: mimalloc::MiMalloc = mimalloc::MiMalloc;

pub mod check;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod svg;
pub mod train;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
