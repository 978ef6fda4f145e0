//! Central finite-difference gradient checks.

use crate::error::{Error, Result};

use super::{Tape, Tensor, Var};

/// Largest relative disagreement between reverse-mode and central-difference
/// gradients of `f` at `params`.
///
/// Relative error per coordinate is `|a - n| / max(|a|, |n|, 1e-12)`. When
/// `max_coords` is smaller than the total parameter count an evenly strided
/// subset of coordinates is checked.
pub fn finite_difference_check<F>(f: F, params: &[Tensor<f64>], eps: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let evaluate = |ps: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ps.iter().map(|p| tape.param(p.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(Error::NonScalarLoss(v.shape().to_vec()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(Error::NonFinite("finite_difference_check"));
        }
        Ok(v)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    if !tape.value(loss).is_finite() {
        return Err(Error::NonFinite("finite_difference_check"));
    }
    let analytic = tape.grad(loss, &vars)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(i, p)| (0..p.numel()).map(move |j| (i, j)))
        .collect();
    let stride = match max_coords {
        Some(m) if m > 0 && coords.len() > m => coords.len().div_ceil(m),
        _ => 1,
    };

    let mut worst: f64 = 0.0;
    let mut work = params.to_vec();
    for &(i, j) in coords.iter().step_by(stride) {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = evaluate(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = evaluate(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i].data()[j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
