use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Compares the reverse-mode gradient of a scalar function against central
/// differences and returns the largest relative error over all coordinates:
///
/// `max_i |analytic_i - fd_i| / max(1e-8, |fd_i|)`
///
/// `f` receives a fresh tape and the leaf holding `x`; it must be
/// deterministic.
pub fn finite_diff_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("finite-difference step {step} must be > 0")));
    }
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone(), true);
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = match tape.grad(leaf) {
        Some(g) => g.data().to_vec(),
        None => vec![0.0; x.len()],
    };

    let eval = |point: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(point, false);
        let root = f(&mut tape, leaf)?;
        Ok(tape.value(root).item())
    };

    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let fd = (eval(plus)? - eval(minus)?) / (2.0 * step);
        let err = (analytic[i] - fd).abs() / fd.abs().max(1e-8);
        worst = worst.max(err);
    }
    Ok(worst)
}
