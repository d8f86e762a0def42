//! Minimal dense-array engine with reverse-mode gradients.

mod attention;
pub mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use attention::multi_head_attention;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Init, Param, ParamStore, INIT_STD};
pub use tape::{Gradients, Tape, Var, NORM_FLOOR};
pub use tensor::Tensor;
