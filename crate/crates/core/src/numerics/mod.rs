//! Dense matrices, a reverse-mode tape, and a finite-difference oracle.

mod gradcheck;
mod matrix;
mod optim;
mod params;
mod streams;
mod tape;

pub use gradcheck::{
    grad_check, grad_check_inputs, relative_error, EntryCheck, GradCheckReport, ParamCheck,
    FD_STEP, REFINE_ABOVE, REL_EPS,
};
pub use matrix::Matrix;
pub use optim::AdamW;
pub use params::{Param, ParamGroup, ParamId, ParamStore};
pub use streams::{stream_rng, INIT_STREAM, PAIRS_STREAM, SAMPLER_STREAM, SHUFFLE_STREAM};
pub use tape::{softmax_vec, Gradients, Tape, Var, NORM_EPS};
