//! Dense matrices and reverse-mode differentiation.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{
    check_gradients, relative_error, Entry, GradCheck, FD_ABS_TOLERANCE, FD_RESOLUTION, FD_STEP, FD_TOLERANCE,
};
pub use matrix::Matrix;
pub use tape::{Gradients, Tape, Var, FEATURE_NORM_EPS};

#[cfg(test)]
mod tests;
