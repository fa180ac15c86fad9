//! Analytic-versus-numeric gradient comparison in 64-bit precision.

use std::fmt;

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-5;

/// One compared element.
#[derive(Clone, Debug)]
pub struct GradCheckEntry {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub abs_err: f64,
    pub rel_err: f64,
}

impl GradCheckEntry {
    /// Absolute error for gradients of magnitude below one, relative error above.
    pub fn error(&self) -> f64 {
        self.abs_err / self.analytic.abs().max(self.numeric.abs()).max(1.0)
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub checked: usize,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    /// Largest [`GradCheckEntry::error`] seen.
    pub max_err: f64,
    /// Elements whose error exceeded `tol`.
    pub failures: Vec<GradCheckEntry>,
}

impl GradCheckReport {
    pub fn new(tol: f64) -> Self {
        Self {
            tol,
            checked: 0,
            max_abs_err: 0.0,
            max_rel_err: 0.0,
            max_err: 0.0,
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Adds one analytic/numeric pair to the summary.
    pub fn record(&mut self, input: usize, index: usize, analytic: f64, numeric: f64) {
        let abs_err = (analytic - numeric).abs();
        let scale = analytic.abs().max(numeric.abs());
        let rel_err = if scale > 0.0 { abs_err / scale } else { 0.0 };
        let entry = GradCheckEntry {
            input,
            index,
            analytic,
            numeric,
            abs_err,
            rel_err,
        };
        self.checked += 1;
        self.max_abs_err = self.max_abs_err.max(abs_err);
        self.max_rel_err = self.max_rel_err.max(rel_err);
        self.max_err = self.max_err.max(entry.error());
        if entry.error() >= self.tol || !entry.error().is_finite() {
            self.failures.push(entry);
        }
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "checked={} max_abs={:.3e} max_rel={:.3e} max_err={:.3e} tol={:.1e} failures={}",
            self.checked,
            self.max_abs_err,
            self.max_rel_err,
            self.max_err,
            self.tol,
            self.failures.len()
        )
    }
}

/// Compares the tape gradient of `f` against central differences for every
/// element of every input.
///
/// `f` receives the inputs as tracked leaves and must return a one-element value.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.variable(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if tape.value(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check needs a scalar function, got shape {:?}",
            tape.shape(out)
        )));
    }
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(tape);

    let eval = |probe: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport::new(tol);
    let mut probe = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        for index in 0..grad.len() {
            let orig = inputs[input].data()[index];
            probe[input].data_mut()[index] = orig + step;
            let plus = eval(&probe)?;
            probe[input].data_mut()[index] = orig - step;
            let minus = eval(&probe)?;
            probe[input].data_mut()[index] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            report.record(input, index, grad.data()[index], numeric);
        }
    }
    Ok(report)
}
