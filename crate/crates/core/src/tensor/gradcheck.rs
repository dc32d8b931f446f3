use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// Max over elements of `|analytic − central difference| / max(1, |analytic|)`
/// for a scalar function of one tensor.
pub fn finite_diff_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let errs = finite_diff_check_inputs(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(errs[0])
}

/// Same check for a function of several tensors; returns one max relative
/// error per input.
pub fn finite_diff_check_inputs<F>(f: F, inputs: &[Tensor<f64>], step: f64) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    finite_diff_check_with_fault(f, inputs, step, None)
}

/// [`finite_diff_check_inputs`] with the analytic pass run on a tape whose
/// backward rule for `fault` is deliberately wrong.
#[doc(hidden)]
pub fn finite_diff_check_with_fault<F>(f: F, inputs: &[Tensor<f64>], step: f64, fault: Option<OpKind>) -> Result<Vec<f64>>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    if let Some(k) = fault {
        tape.inject_fault(k);
    }
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = f(&mut tape, &vars)?;
    let grads = tape.backward(loss)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(&tape, v)).collect();

    let eval = |values: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).item())
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for (i, a) in analytic.iter().enumerate() {
        let mut max_err = 0.0f64;
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let up = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let down = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * step);
            let analytic = a.data()[j];
            let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
            max_err = max_err.max(err);
        }
        out.push(max_err);
    }
    Ok(out)
}
