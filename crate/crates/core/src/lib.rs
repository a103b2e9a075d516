pub mod error;
pub mod estimator;
pub mod ledger;
#[allow(clippy::needless_range_loop)]
pub mod linalg;
pub mod matrix;
pub mod projector;
pub mod train;

pub use error::{Error, Result};
pub use matrix::Matrix;
