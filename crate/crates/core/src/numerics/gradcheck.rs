use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Largest relative error between autodiff and central differences.
///
/// `f` maps a tape and an input variable to a scalar. Relative error uses
/// `max(|analytic|, |numeric|, 1e-8)` as denominator.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape, &Var) -> Result<Var>,
{
    let analytic = {
        let tape = Tape::new();
        let xv = tape.param(x.clone());
        let loss = f(&tape, &xv)?;
        tape.backward(&loss)?.get_or_zeros(&xv)
    };
    let eval = |point: Tensor| -> Result<f64> {
        let tape = Tape::inference();
        let xv = tape.constant(point);
        f(&tape, &xv)?.value().item()
    };
    let mut worst: f64 = 0.0;
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
