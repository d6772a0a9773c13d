use super::{Float, Tape, Tensor, Var};
use crate::error::Result;

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all checked scalars of `|analytic − numeric| / (|numeric| + 1e-12)`.
    pub max_rel_error: f64,
    /// `(input, element)` attaining the maximum.
    pub worst: Option<(usize, usize)>,
    /// First `(input, element)` whose perturbed evaluation was not finite.
    pub non_finite: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.non_finite.is_none() && self.max_rel_error < tol
    }
}

/// Checks the tape gradient of `f` at `point` against central differences
/// with step `h`, element by element over every input tensor.
///
/// `f` receives a fresh tape with one leaf per input and must return a
/// scalar.
pub fn grad_check<F, Fun>(f: Fun, point: &[Tensor<F>], h: f64) -> Result<GradCheckReport>
where
    F: Float,
    Fun: Fn(&mut Tape<F>, &[Var]) -> Result<Var>,
{
    let eval = |inputs: &[Tensor<F>]| -> Result<f64> {
        let mut tape = Tape::inference();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0].as_f64())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = point.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        non_finite: None,
        checked: 0,
    };
    let mut work: Vec<Tensor<F>> = point.to_vec();
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for ei in 0..point[pi].numel() {
            let x0 = point[pi].data()[ei];
            work[pi].data_mut()[ei] = F::from_f64_lossy(x0.as_f64() + h);
            let fp = eval(&work)?;
            work[pi].data_mut()[ei] = F::from_f64_lossy(x0.as_f64() - h);
            let fm = eval(&work)?;
            work[pi].data_mut()[ei] = x0;
            if !fp.is_finite() || !fm.is_finite() {
                report.non_finite.get_or_insert((pi, ei));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic.data()[ei].as_f64();
            let rel = (a - numeric).abs() / (numeric.abs() + 1e-12);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((pi, ei));
                }
            }
        }
    }
    Ok(report)
}
