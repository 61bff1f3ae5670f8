//! Numerical substrate: normal distribution functions, seeded streams,
//! reverse-mode gradients and a first-order optimizer.

mod normal;
mod optim;
mod rng;
pub mod tape;

pub use normal::{normal_cdf, normal_log_pdf, normal_pdf, normal_quantile};
pub(crate) use normal::{log_upper_tail, phi};
pub use optim::Adam;
pub use rng::RngStream;
pub use tape::{Gradients, Tape, Var};

/// Row-major dense matrix used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;

/// Glorot-style initialization for a dense layer.
pub(crate) fn init_dense(rows: usize, cols: usize, rng: &mut RngStream) -> Matrix {
    let scale = (2.0 / (rows + cols).max(1) as f64).sqrt();
    Matrix::from_shape_fn((rows, cols), |_| scale * rng.normal())
}
