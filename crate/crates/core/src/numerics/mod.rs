//! Dense-array numerics with tape-based reverse-mode differentiation.
//!
//! [`Array`] is a row-major f64 tensor. [`Graph`] records operations on
//! [`Var`] handles; [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients for every ancestor of a scalar loss, exactly
//! once per use. Forward evaluation is pure; a graph built with
//! [`Graph::inference`] skips recording entirely so rollouts pay no
//! tape cost.

mod array;
mod gradcheck;
pub mod rng;
mod scan;
mod tape;

pub use array::Array;
pub use gradcheck::{finite_diff_check, finite_diff_check_coords};
pub use scan::ssm_scan;
pub use tape::{Gradients, Graph, Var};
