//! Run configuration, checkpoints, metrics logs and the experiment drivers
//! behind the command-line tool.

mod checkpoint;
mod config;
mod eval;
mod log;
mod pretrain;
mod verify;

pub use checkpoint::*;
pub use config::*;
pub use eval::*;
pub use log::*;
pub use pretrain::*;
pub use verify::*;
