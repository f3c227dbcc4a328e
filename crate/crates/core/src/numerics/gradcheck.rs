//! Central finite-difference verification of tape gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Worst elementwise error, see [`compare_gradients`].
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= self.tol
    }
}

/// Checks the tape gradient of scalar `f` at `x` against central differences.
///
/// `f` builds its graph on whatever tape it is handed, reading its input
/// from the given variable.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let xv = tape.variable(x.clone())?;
    let out = f(&mut tape, xv)?;
    if tape.value(out).len() != 1 {
        return Err(Error::NotScalar(tape.shape(out).to_vec()));
    }
    tape.backward(out)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let eval = |t: &Tensor| -> Result<f64> {
        let mut tape = Tape::inference();
        let v = tape.constant(t.clone())?;
        let out = f(&mut tape, v)?;
        Ok(tape.value(out).item())
    };
    check_gradient(&analytic, eval, x, step, tol)
}

/// Compares a supplied gradient with central differences of `eval`.
pub fn check_gradient<E>(analytic: &[f64], eval: E, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    E: Fn(&Tensor) -> Result<f64>,
{
    if analytic.len() != x.len() {
        return Err(Error::shape("check_gradient", x.shape(), &[analytic.len()]));
    }
    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((plus - minus) / (2.0 * step));
    }
    let (max_rel_error, worst_index) = compare_gradients(analytic, &numeric);
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        tol,
        analytic: analytic.to_vec(),
        numeric,
    })
}

/// Elementwise relative error `|a - n| / max(|a|, |n|, 1e-3 * scale)` where
/// `scale` is the largest gradient magnitude in either vector. Components
/// three orders of magnitude below the largest one are judged against that
/// floor instead of their own size.
pub fn compare_gradients(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let floor = 1e-3 * scale;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .enumerate()
        .fold((0.0, 0), |(best, bi), (i, e)| if e > best { (e, i) } else { (best, bi) })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::new(vec![2, 3], vec![0.3, -1.2, 2.5, 0.0, 4.0, -0.7]).unwrap();
        let report = finite_diff_check(
            |t, x| {
                let sq = t.mul(x, x)?;
                let s = t.sum(sq)?;
                t.scale(s, 0.5)
            },
            &x,
            1e-4,
            1e-8,
        )
        .unwrap();
        assert!(report.passed(), "{}", report.max_rel_error);
        for (a, v) in report.analytic.iter().zip(x.data()) {
            assert!((a - v).abs() < 1e-15);
        }
    }

    #[test]
    fn wrong_gradient_is_caught() {
        let x = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let eval = |t: &Tensor| Ok(0.5 * t.data().iter().map(|v| v * v).sum::<f64>());
        let mut wrong = x.data().to_vec();
        wrong[1] *= 1.5;
        let report = check_gradient(&wrong, eval, &x, 1e-4, 1e-4).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error > 0.1);
        assert_eq!(report.worst_index, 1);
    }

    #[test]
    fn nondeterminism_detected() {
        use std::cell::Cell;
        let calls = Cell::new(0.0);
        let eval = |_: &Tensor| {
            calls.set(calls.get() + 1.0);
            Ok(calls.get())
        };
        let x = Tensor::scalar(1.0);
        let err = check_gradient(&[0.0], eval, &x, 1e-4, 1e-4).unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }
}
