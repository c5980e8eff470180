//! Networks and their optimisation.

mod network;
mod optim;

pub use network::{encode, Activation, BoundNetwork, Gradients, Layer, NetworkSpec, Parameters};
pub use optim::{
    cosine_schedule, ema_blend, ema_tau, ema_update, lars_step, Lars, OptimizerConfig,
};
