//! Reverse-mode differentiation, parameters and the AdamW optimizer.

mod optim;
mod param;
mod tape;

pub use optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
pub use param::{ParamId, Parameter};
pub use tape::{Gradients, Tape, Var};
