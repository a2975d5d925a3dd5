//! Central finite-difference verification of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Step used by the gradient suite in 64-bit precision.
pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Relative error above which a coordinate fails.
    pub tolerance: f64,
    /// Floor on the relative-error denominator, so near-zero gradients are
    /// compared absolutely.
    pub denominator_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: DEFAULT_STEP, tolerance: 1e-4, denominator_floor: 1e-7 }
    }
}

/// Identifies one scalar among the checked inputs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub input: usize,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst: Option<Coord>,
    pub checked: usize,
    /// Coordinates where `f` is not differentiable within one step (a ReLU
    /// kink) and the tape gradient matches one of the one-sided slopes.
    pub kinks_excluded: usize,
    /// Set when an evaluation produced a non-finite value.
    pub failure: Option<String>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_rel_err < self.tolerance
    }
}

pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Evaluates `f` on fresh tape leaves for `inputs` and returns the scalar.
fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.constant(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.scalar(out))
}

/// Tape gradients of `f` for every input.
pub fn tape_gradients<F>(f: &F, inputs: &[Tensor], prepare: impl FnOnce(&mut Tape)) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    prepare(&mut tape);
    let vars = inputs.iter().map(|t| tape.param(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let grads = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();
    Ok((tape.scalar(out), grads))
}

/// Checks every coordinate of every input.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let coords: Vec<Coord> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |index| Coord { input: i, index }))
        .collect();
    let opts = GradCheckOptions { step, ..GradCheckOptions::default() };
    grad_check_coords(f, inputs, &coords, opts, |_| {})
}

/// Checks the listed coordinates. `prepare` runs on the tape used for the
/// analytic pass (the fault-injection hook uses it).
pub fn grad_check_coords<F>(
    f: F,
    inputs: &[Tensor],
    coords: &[Coord],
    opts: GradCheckOptions,
    prepare: impl FnOnce(&mut Tape),
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (_, grads) = tape_gradients(&f, inputs, prepare)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        kinks_excluded: 0,
        failure: None,
        tolerance: opts.tolerance,
    };
    let h = opts.step;
    let mut work: Vec<Tensor> = inputs.to_vec();
    for &c in coords {
        let orig = inputs[c.input].data()[c.index];
        let at = |x: f64, work: &mut Vec<Tensor>| -> Result<f64> {
            work[c.input].data_mut()[c.index] = x;
            let r = eval(&f, work);
            work[c.input].data_mut()[c.index] = orig;
            r
        };
        let probe = (|| -> Result<(f64, f64, f64)> { Ok((at(orig + h, &mut work)?, at(orig - h, &mut work)?, at(orig, &mut work)?)) })();
        let (fp, fm, f0) = match probe {
            Ok(v) => v,
            Err(e @ Error::NonFinite { .. }) => {
                report.failure = Some(format!("input {} coordinate {}: {e}", c.input, c.index));
                return Ok(report);
            }
            Err(e) => return Err(e),
        };
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads[c.input][c.index];
        let err = rel_err(analytic, numeric, opts.denominator_floor);
        report.checked += 1;
        if err >= opts.tolerance {
            let fwd = (fp - f0) / h;
            let bwd = (f0 - fm) / h;
            let kink = (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(opts.denominator_floor);
            let one_sided_match = rel_err(analytic, fwd, opts.denominator_floor) < 1e-3
                || rel_err(analytic, bwd, opts.denominator_floor) < 1e-3;
            if kink && one_sided_match {
                report.kinks_excluded += 1;
                report.checked -= 1;
                continue;
            }
        }
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = err;
            report.worst = Some(c);
        }
    }
    Ok(report)
}
