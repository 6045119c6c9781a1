//! Dense arrays, a reverse-mode autodiff tape, and a finite-difference
//! gradient checker.

mod array;
pub mod gradcheck;
mod tape;

pub use array::{matmul, Array};
pub use gradcheck::{finite_diff_check, finite_diff_check_with, relative_error, GradCheckReport, Stencil};
pub use tape::{sigmoid, Gradients, Tape, Var};

pub(crate) use tape::{bce, population_variance};

/// Row-wise softmax of `x / scale` on a plain array.
pub fn softmax_rows(x: &Array, scale: f64) -> crate::Result<Array> {
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let y = tape.softmax_rows(v, scale)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests;
