use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Var};
use crate::scalar::Scalar;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
}

/// Compares reverse-mode gradients with central differences for every
/// trainable entry. The relative error of one entry is
/// `|a - n| / max(|a|, |n|, 1e-8)`.
///
/// `loss_fn` builds the forward pass on a fresh graph and returns the scalar
/// loss node; it must be a pure function of the parameters.
pub fn gradient_check<T, F>(loss_fn: F, params: &ParamStore<T>, eps: f64) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &ParamStore<T>) -> Result<Var>,
{
    let eval = |p: &ParamStore<T>, name: &str| -> Result<f64> {
        let mut g = Graph::new();
        let loss = loss_fn(&mut g, p).map_err(|e| match e {
            Error::NonFinite(_) => Error::NonFinite(name.to_string()),
            other => other,
        })?;
        let v = g.value(loss).data()[0].f64();
        if !v.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let loss = loss_fn(&mut g, params)?;
    if g.value(loss).len() != 1 {
        return Err(Error::contract("gradient_check needs a scalar loss"));
    }
    let analytic = g.backward(loss)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut probe = params.clone();
    for name in params.trainable_names() {
        let len = params.get(&name)?.len();
        let grad = analytic.get(&name);
        for i in 0..len {
            let orig = params.get(&name)?.data()[i];
            probe.get_mut_data(&name)?[i] = T::of(orig.f64() + eps);
            let plus = eval(&probe, &name)?;
            probe.get_mut_data(&name)?[i] = T::of(orig.f64() - eps);
            let minus = eval(&probe, &name)?;
            probe.get_mut_data(&name)?[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = grad.map(|t| t.data()[i].f64()).unwrap_or(0.0);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                if rel >= report.max_rel_error {
                    report.worst = Some((name.clone(), i));
                }
            }
        }
    }
    Ok(report)
}
