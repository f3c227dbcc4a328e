//! Dense `f64` tensors, a reverse-mode tape, seeded init and gradient checks.

mod gemm;
pub mod gradcheck;
pub mod init;
mod param;
mod tape;
mod tensor;

pub use gradcheck::{check_gradient, finite_diff_check, GradCheckReport};
pub use init::{rng, xavier_bound, xavier_init, Rng};
pub use param::{Param, Parameterized};
pub use tape::{sigmoid, Tape, Var};
pub use tensor::Tensor;

/// Plain (non-recorded) matrix product, `m×k · k×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    let mut tape = Tape::inference();
    let av = tape.constant(a.clone())?;
    let bv = tape.constant(b.clone())?;
    let out = tape.matmul(av, bv)?;
    Ok(tape.value(out).clone())
}

#[cfg(test)]
mod tests;
