//! Finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` receives a fresh tape and the input registered on it, and must return
/// a scalar loss. The result is the worst relative error over all entries,
/// `|g_auto - g_fd| / max(1e-8, |g_auto| + |g_fd|)`.
pub fn gradient_check<F>(f: F, x: &Tensor, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone().with_requires_grad(true));
    let loss = f(&mut tape, leaf)?;
    if tape.value(loss).len() != 1 {
        return Err(Error::contract(format!(
            "gradient_check needs a scalar loss, got shape {:?}",
            tape.shape(loss)
        )));
    }
    tape.backward(loss)?;
    let g_auto = tape
        .grad(leaf)
        .ok_or_else(|| Error::contract("gradient_check: no gradient reached the input"))?
        .to_vec();

    let eval = |values: &[f64]| -> Result<f64> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::new(x.shape().to_vec(), values.to_vec())?);
        let loss = f(&mut tape, leaf)?;
        Ok(tape.value(loss).item())
    };

    let mut worst = 0.0f64;
    let mut probe = x.values().to_vec();
    for i in 0..probe.len() {
        let original = probe[i];
        probe[i] = original + epsilon;
        let plus = eval(&probe)?;
        probe[i] = original - epsilon;
        let minus = eval(&probe)?;
        probe[i] = original;
        let g_fd = (plus - minus) / (2.0 * epsilon);
        let rel = (g_auto[i] - g_fd).abs() / (1e-8f64).max(g_auto[i].abs() + g_fd.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}
