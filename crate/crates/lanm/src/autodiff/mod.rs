//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! The design is a classic Wengert tape: forward values are computed eagerly
//! as operations are recorded, and [`Tape::backward`] replays the record in
//! reverse to accumulate adjoints. Everything is `f64`; gradient checks
//! against central finite differences demand the precision.
//!
//! A [`Tape`] is single-threaded and not shareable during construction or
//! backward; independent tapes may run on independent threads.

mod grad_check;
mod tape;
mod tensor;

pub(crate) use tensor::{mm_nn, mm_nt, mm_tn};

pub use grad_check::{
    central_difference_gradients, compare_to_finite_differences, grad_check, GradCheckReport,
    WorstCoordinate,
};
pub use tape::{Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;
