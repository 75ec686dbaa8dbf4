//! Central-difference verification of tape gradients.

use crate::tape::{Tape, Var};
use crate::tensor::{Result, Tensor, TensorError};

/// Outcome of a gradient check. The relative error of a coordinate is
/// |analytic − numeric| / max(1, |analytic|, |numeric|).
///
/// A central difference is only meaningful when `θ ± eps` stay on the same
/// smooth branch as `θ`. Coordinates whose perturbation flips the side of a
/// `relu`, `abs` or clamp breakpoint are counted in `kink_crossings` and
/// left out of `max_rel_error`; `max_rel_error_all` includes them.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) where `max_rel_error` occurred
    pub worst: (usize, usize),
    pub max_rel_error_all: f64,
    pub kink_crossings: usize,
    pub coordinates: usize,
}

fn evaluate<F>(f: &F, thetas: &[Tensor]) -> Result<(f64, Vec<bool>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = thetas
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(TensorError::NonScalarLoss(value.shape().to_vec()));
    }
    let v = value.item();
    if !v.is_finite() {
        return Err(TensorError::NonFinite { op: "grad_check" });
    }
    Ok((v, tape.branch_pattern()))
}

/// Compares the tape gradient of `f` w.r.t. every entry of every tensor in
/// `thetas` against central differences with step `eps`.
pub fn grad_check_many<F>(f: F, thetas: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = thetas
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.tensor(&tape, v)).collect();
    let base_pattern = tape.branch_pattern();
    drop(tape);

    let mut work: Vec<Tensor> = thetas.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        max_rel_error_all: 0.0,
        kink_crossings: 0,
        coordinates: 0,
    };
    for (ti, an) in analytic.iter().enumerate() {
        for ci in 0..an.len() {
            let orig = work[ti].data()[ci];
            work[ti].data_mut()[ci] = orig + eps;
            let (plus, plus_pattern) = evaluate(&f, &work)?;
            work[ti].data_mut()[ci] = orig - eps;
            let (minus, minus_pattern) = evaluate(&f, &work)?;
            work[ti].data_mut()[ci] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = an.data()[ci];
            let err = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            report.max_rel_error_all = report.max_rel_error_all.max(err);
            if plus_pattern != base_pattern || minus_pattern != base_pattern {
                report.kink_crossings += 1;
                continue;
            }
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ci);
            }
        }
    }
    Ok(report)
}

/// Single-tensor form of [`grad_check_many`]; returns the max relative error.
pub fn grad_check<F>(f: F, theta: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(theta), eps).map(|r| r.max_rel_error)
}
