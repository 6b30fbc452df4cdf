use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Denominator floor for relative errors, so that gradients that are zero
/// on both sides do not divide by zero.
const REL_FLOOR: f64 = 1e-6;

const ROUNDOFF_FACTOR: f64 = 4.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ElementFailure {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// `rel_errors[i][k]` for element `k` of input `i`.
    pub rel_errors: Vec<Vec<f64>>,
    pub failures: Vec<ElementFailure>,
    /// Elements whose central difference straddled a kink (relu, hinge):
    /// the analytic value matched a one-sided difference instead.
    pub kinks: usize,
    /// Elements whose discrepancy is below the rounding noise of the
    /// difference quotient, `ε·max(|f(x±h)|, 1)/h`.
    pub roundoff: usize,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    /// Largest relative error outside kink crossings and rounding noise.
    pub fn max_rel_err(&self) -> f64 {
        let worst_fail = self.failures.iter().map(|f| f.rel_err).fold(0.0, f64::max);
        let worst_ok = self
            .rel_errors
            .iter()
            .flatten()
            .filter(|&&e| e <= self.tol)
            .fold(0.0_f64, |a, &b| a.max(b));
        worst_fail.max(worst_ok)
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+h) − f(x−h)) / 2h`, element by element.
pub fn gradient_check<F>(f: F, inputs: &[Tensor], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if h <= 0.0 {
        return Err(Error::usage("gradient_check: step must be positive"));
    }
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.param(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_scalar() {
        return Err(Error::usage(format!(
            "gradient_check: function must return a scalar, got {:?}",
            tape.value(out).shape()
        )));
    }
    let f0 = tape.value(out).item();
    // A function that ignores its inputs has an all-zero gradient.
    let has_graph = tape.requires_grad(out) && tape.len() > inputs.len();
    if has_graph {
        tape.backward(out)?;
    }
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| match (has_graph, tape.grad(v)) {
            (true, Some(g)) => g.data().to_vec(),
            _ => vec![0.0; t.numel()],
        })
        .collect();

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut report = GradCheckReport {
        rel_errors: Vec::with_capacity(inputs.len()),
        failures: Vec::new(),
        kinks: 0,
        roundoff: 0,
        tol,
    };
    for i in 0..inputs.len() {
        let mut errs = Vec::with_capacity(inputs[i].numel());
        for k in 0..inputs[i].numel() {
            let x0 = inputs[i].data()[k];
            work[i].data_mut()[k] = x0 + h;
            let fp = eval(&f, &work)?;
            work[i].data_mut()[k] = x0 - h;
            let fm = eval(&f, &work)?;
            work[i].data_mut()[k] = x0;
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[i][k];
            let e = rel_err(a, numeric);
            errs.push(e);
            let noise = ROUNDOFF_FACTOR * f64::EPSILON * fp.abs().max(fm.abs()).max(1.0) / h;
            if e > tol && (a - numeric).abs() <= noise {
                report.roundoff += 1;
            } else if e > tol {
                let fwd = (fp - f0) / h;
                let bwd = (f0 - fm) / h;
                let straddles = rel_err(fwd, bwd) > 10.0 * tol;
                if straddles && (rel_err(a, fwd) < 1e-3 || rel_err(a, bwd) < 1e-3) {
                    report.kinks += 1;
                } else {
                    report.failures.push(ElementFailure {
                        input: i,
                        index: k,
                        analytic: a,
                        numeric,
                        rel_err: e,
                    });
                }
            }
        }
        report.rel_errors.push(errs);
    }
    Ok(report)
}
