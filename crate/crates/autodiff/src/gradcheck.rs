//! Central finite-difference check of tape gradients.

use crate::error::{AdError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: f64,
    /// `(parameter, flat index)` where the maximum was attained.
    pub worst: (usize, usize),
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    f(&tape, &vars)?.item()
}

/// Compares the reverse-mode gradient of the scalar `f` at `params` with
/// central differences of step `h`.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&tape, &vars)?;
    let grads = tape.backward(&root)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(v)).collect();

    let mut work: Vec<Tensor> = params.to_vec();
    let mut numeric = Vec::with_capacity(params.len());
    let mut max_rel_error = 0.0;
    let mut worst = (0, 0);
    for (pi, p) in params.iter().enumerate() {
        let mut num = vec![0.0; p.numel()];
        for (k, slot) in num.iter_mut().enumerate() {
            let x = p.data()[k];
            work[pi].data_mut()[k] = x + h;
            let fp = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = x - h;
            let fm = evaluate(&f, &work)?;
            work[pi].data_mut()[k] = x;
            if !fp.is_finite() || !fm.is_finite() {
                return Err(AdError::NonFinite {
                    context: format!("grad_check: f at parameter {pi}, coordinate {k}"),
                });
            }
            *slot = (fp - fm) / (2.0 * h);
            let a = analytic[pi].data()[k];
            let rel = (a - *slot).abs() / slot.abs().max(1.0);
            if rel > max_rel_error || rel.is_nan() {
                max_rel_error = if rel.is_nan() { f64::INFINITY } else { rel };
                worst = (pi, k);
            }
        }
        numeric.push(Tensor::from_parts(p.shape().to_vec(), num));
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst,
        analytic,
        numeric,
    })
}
