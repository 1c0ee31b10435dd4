//! Vanilla RNNs, their weight-norm profiles and norm-based
//! Rademacher-complexity generalization bounds.

// `!(x >= 0.0)` style checks also reject NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod capacity;
pub mod empirical;
pub mod error;
pub mod harness;
pub mod linalg;
pub mod losses;
pub mod rng;
pub mod rnn;

pub use capacity::{BoundOptions, BoundReport, Flavor, NormProfile};
pub use error::{Error, Result};
pub use linalg::Matrix;
pub use losses::LossSpec;
pub use rnn::{Activation, Checkpoint, Gradients, Labels, RnnParams, SequenceBatch};
