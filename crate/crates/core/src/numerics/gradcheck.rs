//! Central finite-difference verification of tape gradients (double precision).

use indexmap::IndexMap;

use crate::error::Result;

use super::tape::{Tape, Var};
use super::tensor::Tensor;

/// Outcome of comparing analytic and finite-difference gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Number of scalar entries compared.
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter, flat index, analytic, numeric)` of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
    /// Worst relative error per parameter name.
    pub per_param: IndexMap<String, f64>,
}

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Builds the loss with `loss_fn` over freshly registered parameters, runs
/// `backward`, then re-evaluates the loss at `theta +- step` for every entry
/// of the parameters named in `check` (all parameters when `check` is empty).
pub fn check_gradients<F>(
    params: &IndexMap<String, Tensor<f64>>,
    check: &[&str],
    step: f64,
    loss_fn: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &IndexMap<String, Var>) -> Result<Var>,
{
    let eval = |values: &IndexMap<String, Tensor<f64>>| -> Result<(Tape<f64>, Var)> {
        let mut tape = Tape::new();
        let vars: IndexMap<String, Var> = values
            .iter()
            .map(|(name, t)| (name.clone(), tape.param(name, t.clone())))
            .collect();
        let loss = loss_fn(&mut tape, &vars)?;
        Ok((tape, loss))
    };

    let (mut tape, loss) = eval(params)?;
    let analytic = tape.backward(loss)?;

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
        per_param: IndexMap::new(),
    };
    let mut perturbed = params.clone();
    for (name, tensor) in params {
        if !check.is_empty() && !check.contains(&name.as_str()) {
            continue;
        }
        let grad = analytic.get(name).expect("every registered parameter has a gradient");
        let mut worst_here = 0.0f64;
        for i in 0..tensor.len() {
            let original = tensor.data()[i];
            perturbed.get_mut(name).unwrap().data_mut()[i] = original + step;
            let (t_plus, l_plus) = eval(&perturbed)?;
            let f_plus = t_plus.value(l_plus).data()[0];
            perturbed.get_mut(name).unwrap().data_mut()[i] = original - step;
            let (t_minus, l_minus) = eval(&perturbed)?;
            let f_minus = t_minus.value(l_minus).data()[0];
            perturbed.get_mut(name).unwrap().data_mut()[i] = original;

            let numeric = (f_plus - f_minus) / (2.0 * step);
            let a = grad.data()[i];
            let err = relative_error(a, numeric);
            report.checked += 1;
            worst_here = worst_here.max(err);
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some((name.clone(), i, a, numeric));
            }
        }
        report.per_param.insert(name.clone(), worst_here);
    }
    Ok(report)
}
