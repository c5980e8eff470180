//! Evaluation metrics over frozen representations.

mod graph;
mod probe;
mod robustness;
mod spread;

pub use graph::*;
pub use probe::*;
pub use robustness::*;
pub use spread::*;
