use crate::scalar::Scalar;

use super::{Graph, GraphError, ParamStore, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions<S> {
    /// Central-difference step.
    pub step: S,
    /// Also check frozen parameters (their gradients are computed either way).
    pub include_frozen: bool,
}

impl<S: Scalar> Default for GradCheckOptions<S> {
    fn default() -> Self {
        Self {
            step: S::lit(1e-5),
            include_frozen: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamError<S> {
    pub name: String,
    pub max_abs_diff: S,
    pub rel_err: S,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport<S> {
    pub worst_rel_err: S,
    pub worst_param: Option<String>,
    pub params: Vec<ParamError<S>>,
    pub checked_elements: usize,
}

/// Compares reverse-mode gradients of `objective` with central finite
/// differences, one parameter tensor at a time.
///
/// The error for a parameter is `max|analytic - numeric| / max(max|analytic|, max|numeric|)`,
/// taken as zero when both gradients vanish.
pub fn grad_check<S, E, F>(
    store: &mut ParamStore<S>,
    mut objective: F,
    opts: GradCheckOptions<S>,
) -> Result<GradCheckReport<S>, E>
where
    S: Scalar,
    E: From<GraphError>,
    F: FnMut(&mut Graph<S>, &ParamStore<S>) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let loss = objective(&mut g, store)?;
    if !g.value(loss).item().is_finite() {
        return Err(GraphError::NonFiniteObjective.into());
    }
    let grads = g.backward(loss)?;
    let mut analytic = store.clone();
    analytic.zero_grad();
    grads.accumulate_into(&mut analytic);

    let mut eval = |store: &ParamStore<S>| -> Result<S, E> {
        let mut g = Graph::new();
        let l = objective(&mut g, store)?;
        let v = g.value(l).item();
        if v.is_finite() {
            Ok(v)
        } else {
            Err(GraphError::NonFiniteObjective.into())
        }
    };

    let two_h = opts.step + opts.step;
    let ids: Vec<_> = store.ids().collect();
    let mut report = GradCheckReport {
        worst_rel_err: S::zero(),
        worst_param: None,
        params: Vec::new(),
        checked_elements: 0,
    };
    for id in ids {
        if store.get(id).frozen && !opts.include_frozen {
            continue;
        }
        let n = store.value(id).len();
        let mut max_diff = S::zero();
        let mut scale = S::zero();
        for e in 0..n {
            let orig = store.value(id).data()[e];
            store.get_mut(id).value.data_mut()[e] = orig + opts.step;
            let plus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig - opts.step;
            let minus = eval(store);
            store.get_mut(id).value.data_mut()[e] = orig;
            let numeric = (plus? - minus?) / two_h;
            let a = analytic.grad(id).data()[e];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        report.checked_elements += n;
        let rel_err = if scale > S::zero() { max_diff / scale } else { S::zero() };
        if rel_err > report.worst_rel_err || report.worst_param.is_none() {
            report.worst_rel_err = report.worst_rel_err.max(rel_err);
            if rel_err >= report.worst_rel_err {
                report.worst_param = Some(store.get(id).name.clone());
            }
        }
        report.params.push(ParamError {
            name: store.get(id).name.clone(),
            max_abs_diff: max_diff,
            rel_err,
        });
    }
    Ok(report)
}
