use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub entries_checked: usize,
}

fn evaluate<F>(store: &ParamStore, f: &F) -> Result<(Graph, Var, f64)>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let loss = f(&mut g, store)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Err(Error::Evaluation(format!("objective evaluated to {value}")));
    }
    Ok((g, loss, value))
}

/// Compare tape gradients of the scalar built by `f` against central finite
/// differences for every entry of the listed parameters.
pub fn grad_check<F>(store: &mut ParamStore, ids: &[ParamId], h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(store, ids, h, None, f)
}

/// Like [`grad_check`], but at most `limit` evenly spaced entries per
/// parameter when a limit is given.
pub fn grad_check_sampled<F>(
    store: &mut ParamStore,
    ids: &[ParamId],
    h: f64,
    limit: Option<usize>,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::config(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let (g, loss, _) = evaluate(store, &f)?;
    let back = g.backward(loss)?;
    drop(g);

    let mut report = GradCheckReport::default();
    for &id in ids {
        let n = store.get(id).numel();
        let analytic = back
            .params()
            .get(id)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; n]);
        let picks: Vec<usize> = match limit {
            Some(l) if l < n => (0..l).map(|j| j * n / l.max(1)).collect(),
            _ => (0..n).collect(),
        };
        for k in picks {
            let orig = store.get(id).data()[k];
            store.get_mut(id).data_mut()[k] = orig + h;
            let plus = evaluate(store, &f).map(|r| r.2);
            store.get_mut(id).data_mut()[k] = orig - h;
            let minus = evaluate(store, &f).map(|r| r.2);
            store.get_mut(id).data_mut()[k] = orig;
            let numeric = (plus? - minus?) / (2.0 * h);
            let err = relative_error(analytic[k], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = err;
                report.worst = Some((store.name(id).to_string(), k));
                report.analytic_at_worst = analytic[k];
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// [`grad_check`] over every registered parameter.
pub fn grad_check_all<F>(store: &mut ParamStore, h: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let ids: Vec<ParamId> = store.ids().collect();
    grad_check(store, &ids, h, f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn square_at_three() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_vec(vec![3.0])).unwrap();
        let r = grad_check_all(&mut store, 1e-5, |g, s| {
            let v = g.param(s, x);
            let sq = g.mul(v, v)?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-7, "{r:?}");
        assert!((r.analytic_at_worst - 6.0).abs() < 1e-12);
    }

    #[test]
    fn silu_at_half() {
        let mut store = ParamStore::new();
        let x = store.register("x", Tensor::from_vec(vec![0.5])).unwrap();
        let r = grad_check_all(&mut store, 1e-5, |g, s| {
            let v = g.param(s, x);
            let y = g.silu(v);
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
    }

    #[test]
    fn constant_objective_has_zero_error() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::from_vec(vec![1.0, 2.0])).unwrap();
        let r = grad_check_all(&mut store, 1e-5, |g, _| Ok(g.constant(Tensor::scalar(4.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.entries_checked, 2);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let mut store = ParamStore::new();
        store.register("x", Tensor::from_vec(vec![1.0])).unwrap();
        let r = grad_check_all(&mut store, 1e-5, |g, _| Ok(g.constant(Tensor::scalar(f64::NAN))));
        assert!(matches!(r, Err(Error::Evaluation(_))));
    }
}
