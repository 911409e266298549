use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `|a − n| / max(|a|, |n|, 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Compares the tape gradient of a scalar function against central finite
/// differences with the given step and returns the worst relative error over
/// all elements of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |t: Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(t);
        let out = f(&mut tape, v)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&mut tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic = grads.wrt(xv).expect("x requires grad");

    let mut worst: f64 = 0.0;
    for i in 0..x.numel() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(Error::Usage(format!("grad_check needs a scalar function, got {:?}", t.shape())));
    }
    Ok(t.item())
}
