//! Dense tensors, a define-by-run reverse-mode tape, seeded randomness,
//! finite-difference checking and checkpoint I/O.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod ops;
mod rng;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_sampled, GradCheckReport, ParamCheck};
pub use graph::{Graph, NodeId};
pub use ops::{argmax, log_sum_exp, sigmoid, softmax};
pub use rng::SeededRng;
pub use tensor::{Gradients, ParamId, ParamSet, Tensor};
