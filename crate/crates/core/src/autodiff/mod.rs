//! Minimal learning machinery: a reverse-mode tape, small networks and Adam.

mod adam;
mod kernels;
mod fused;
mod nets;
mod tape;

pub use adam::{Adam, AdamConfig};
pub use nets::{
    stack_steps, Activation, Dense, FeedForwardNet, GruNet, GruShape, GruTrace, Parameterized,
};
pub use tape::{Gradients, Tape, Var};
