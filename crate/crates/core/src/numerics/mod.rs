//! Dense arrays, reverse-mode differentiation, small MLPs, Adam and EMA.

mod array;
pub mod checkpoint;
mod mlp;
mod optim;
mod params;
pub mod rng;
mod tape;

pub use array::Array;
pub use checkpoint::ParamCheckpoint;
pub use mlp::Mlp;
pub use optim::{AdamSnapshot, AdamState, EmaState};
pub use params::{grad_norm, NamedArray, ParamStore};
pub use rng::{RngSnapshot, RngStreams, Stream};
pub use tape::{Gradients, Tape, Var};

