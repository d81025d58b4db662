use super::{Tape, Tensor, Var};
use crate::error::Result;

/// Magnitude floor of the relative-error denominator, so that gradients
/// which are analytically zero are compared on an absolute scale.
const REL_FLOOR: f64 = 1e-3;
const STEP: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst discrepancy.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

fn eval_loss<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    Ok(tape.value(loss).item())
}

/// Compares tape gradients of the scalar built by `f` against central
/// differences over every element of every input. Exceeding `tolerance` is
/// reported in the result, not raised.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        tolerance,
        passed: true,
    };
    let mut probe: Vec<Tensor<f64>> = inputs.to_vec();
    for (i, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("leaf gradient").clone();
        for j in 0..inputs[i].numel() {
            let x = inputs[i].data()[j];
            let h = STEP * x.abs().max(1.0);
            probe[i].data_mut()[j] = x + h;
            let up = eval_loss(&f, &probe)?;
            probe[i].data_mut()[j] = x - h;
            let down = eval_loss(&f, &probe)?;
            probe[i].data_mut()[j] = x;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = Some((i, j));
            }
        }
    }
    report.passed = report.max_rel_error < tolerance;
    Ok(report)
}
