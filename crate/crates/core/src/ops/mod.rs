//! Differentiable layer ops, each implemented as a method on [`Graph`](crate::Graph).

mod conv;
mod elementwise;
mod norm;

pub use elementwise::sigmoid_scalar;
pub use norm::RunningStats;

/// Whether batch norm uses batch statistics (and updates its running
/// estimates) or the stored running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}
