//! Dense reverse-mode automatic differentiation over `f64` matrices.
//!
//! The crate is deliberately small: a tape ([`Graph`]), the layer set needed
//! for feed-forward policies and critics ([`Network`]), an [`Adam`] optimizer
//! and a finite-difference checker used by the test suites.

mod adam;
mod error;
pub mod gradcheck;
mod graph;
mod network;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::AutodiffError;
pub use gradcheck::{check_gradients, finite_diff_check, GradCheckReport};
pub use graph::{BatchStats, Gradients, Graph, Var};
pub use network::{Bound, Layer, Mode, Network, NetworkSpec, BATCH_NORM_EPS, BATCH_NORM_MOMENTUM};
pub use tensor::Tensor;
