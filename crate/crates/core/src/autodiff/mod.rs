//! Dense tensors and a reverse-mode gradient tape.
//!
//! The op set is exactly what the model needs: dense products, elementwise
//! maps, row gathers, and a few graph-shaped ops driven by a
//! [`Neighborhoods`] pattern (segment softmax, weighted neighbor sums).
//! Values are computed eagerly when an op is recorded.

mod sparse;
mod tape;
mod tensor;

pub use sparse::Neighborhoods;
pub use tape::{Gradients, Tape, Var, NORM_EPS};
pub use tensor::Tensor;

pub(crate) use tape::neg_log_sigmoid;
