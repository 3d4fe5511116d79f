//! Dense numerics: matrices, feed-forward layers, tape autodiff and Adam.

mod gradcheck;
mod matrix;
mod nn;
mod optim;
mod tape;

pub use gradcheck::{gradient_check, relative_error, FD_STEP, REL_ERR_FLOOR};
pub use matrix::{matmul, Matrix};
pub use nn::{ff_forward, Activation, BoundNet, FeedForwardNet, Layer};
pub use optim::{adam_step, AdamConfig, AdamState, DEFAULT_LR};
pub use tape::{sigmoid, softmax, softmax_cross_entropy, Gradients, ParamId, Tape, Var};
