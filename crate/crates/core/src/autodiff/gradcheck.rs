//! Central finite differences as an oracle for the tape.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Denominator floor for the relative error.
pub const ABS_FLOOR: f64 = 1e-8;

/// Compares the tape gradient of a scalar function against central
/// differences `(f(x+eps·e_i) − f(x−eps·e_i)) / 2eps` and returns the
/// largest relative error `|a − n| / max(|a|, |n|, 1e-8)`.
///
/// `f` records its computation on the supplied tape, starting from the
/// handle of `x`, and returns the scalar result.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Usage(format!(
            "finite difference step must be positive, got {eps}"
        )));
    }
    let leaf = Tensor::new(x.shape().to_vec(), x.values().to_vec())?.requiring_grad();
    let mut tape = Tape::new();
    let v = tape.leaf(&leaf);
    let out = f(&mut tape, v)?;
    let grads = tape.backward(out)?;
    let analytic = grads
        .get(v)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |values: Vec<f64>| -> Result<f64> {
        let t = Tensor::new(x.shape().to_vec(), values)?;
        let mut tape = Tape::new();
        let v = tape.leaf(&t);
        let out = f(&mut tape, v)?;
        tape.scalar(out)
    };

    let mut worst = 0.0f64;
    for (i, &a) in analytic.iter().enumerate() {
        let mut plus = x.values().to_vec();
        plus[i] += eps;
        let mut minus = x.values().to_vec();
        minus[i] -= eps;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * eps);
        let denom = a.abs().max(numeric.abs()).max(ABS_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}
