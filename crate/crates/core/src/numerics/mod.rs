//! Dense matrices, the temperature softmax family and the seeded RNG.

mod matrix;
mod rng;
mod softmax;

pub use matrix::{
    argmax, batch_max, batch_mean, batch_mean_over_column, batch_min, row_max, row_mean, row_min,
    row_sum, std_dev, Matrix,
};
pub use rng::SeededRng;
pub use softmax::{
    log_softmax_row, log_softmax_row_excluding, log_softmax_temp, softmax_row, softmax_temp,
};
