use super::{AdError, Tape, Tensor, Var};

/// Denominator floor for the relative error, so coordinates with vanishing
/// gradients are judged on absolute error instead.
const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter, coordinate)` of the worst checked entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    /// Coordinates whose perturbation crosses a relu/abs kink.
    pub excluded: Vec<(usize, usize)>,
    pub passed: bool,
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Var), AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    Ok((tape, out))
}

fn perturbed(params: &[Tensor], which: usize, coord: usize, delta: f64) -> Vec<Tensor> {
    let mut out = params.to_vec();
    let mut data = out[which].data().to_vec();
    data[coord] += delta;
    out[which] = Tensor::from_parts(out[which].shape().to_vec(), data);
    out
}

/// Compares tape gradients of `f` with central differences, coordinate by coordinate.
///
/// Shape errors from `f` propagate; numerical disagreement is reported, never raised.
pub fn grad_check<F>(f: F, params: &[Tensor], step: f64, tol: f64) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    let (tape, out) = evaluate(&f, params)?;
    let base_sig = tape.kink_signature();
    let grads = tape.backward(out)?;
    let vars: Vec<Var> = tape.leaves().iter().map(|&i| Var(i)).collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        excluded: Vec::new(),
        passed: true,
    };
    for (pi, var) in vars.iter().enumerate() {
        let analytic = grads.wrt(*var);
        for c in 0..params[pi].len() {
            let (tp, op) = evaluate(&f, &perturbed(params, pi, c, step))?;
            let (tm, om) = evaluate(&f, &perturbed(params, pi, c, -step))?;
            let at_kink = base_sig.contains(&0)
                || tp.kink_signature() != base_sig
                || tm.kink_signature() != base_sig;
            if at_kink {
                report.excluded.push((pi, c));
                continue;
            }
            let numeric = (tp.value(op).item() - tm.value(om).item()) / (2.0 * step);
            let a = analytic.data()[c];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, c));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}
