use crate::{ParamStore, Session, TensorError, Var};

/// Outcome of comparing analytic gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-12)`.
    pub max_rel_error: f64,
    /// Parameter name and flat index attaining the maximum.
    pub worst: Option<(String, usize)>,
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    /// Number of scalar entries compared.
    pub checked: usize,
}

/// Compare `∂loss/∂θ` from [`Session::backward`] against
/// `(loss(θ + h) - loss(θ - h)) / 2h` for every scalar in `store`.
///
/// `loss` must build a scalar on the session it is given and must be a
/// deterministic function of the stored parameters.
pub fn finite_difference_check<F, E>(
    store: &mut ParamStore,
    step: f64,
    mut loss: F,
) -> std::result::Result<GradCheckReport, E>
where
    F: FnMut(&mut Session<'_>) -> std::result::Result<Var, E>,
    E: From<TensorError>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Contract(format!(
            "finite-difference step must be positive, got {step}"
        ))
        .into());
    }
    let analytic = {
        let mut sess = Session::new(store);
        let l = loss(&mut sess)?;
        sess.backward(l)?;
        sess.gradients()
    };

    let mut eval = |store: &ParamStore| -> std::result::Result<f64, E> {
        let mut sess = Session::inference(store);
        let l = loss(&mut sess)?;
        Ok(sess.graph.value(l).item()?)
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        checked: 0,
    };
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for i in 0..store.get(id).len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store)?;
            store.get_mut(id).data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[id.index()][i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel;
                report.worst = Some((store.name(id).to_string(), i));
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    Ok(report)
}
