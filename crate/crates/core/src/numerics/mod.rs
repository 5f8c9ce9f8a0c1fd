//! Dense tensors, a reverse-mode tape, seeded randomness and SGD.

pub mod kernels;
mod optim;
mod param;
mod rng;
mod tape;
mod tensor;

pub use optim::Sgd;
pub use param::{Param, ParamId};
pub use rng::Rng;
pub use tape::{softmax_lastdim, ConvGeom, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::log_sum_exp;
