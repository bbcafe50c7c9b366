//! Central finite-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::param::{ParamId, ParamStore};
use crate::real::Real;

/// Outcome for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamCheck {
    pub name: String,
    pub numel: usize,
    pub frozen: bool,
    /// Largest relative error over entries; `None` for frozen parameters,
    /// which are not perturbed.
    pub max_rel_error: Option<f64>,
    pub worst_index: usize,
    /// Analytic and numeric derivative at `worst_index`.
    pub worst_pair: (f64, f64),
    /// Relative error of every entry (empty for frozen parameters).
    pub entry_errors: Vec<f64>,
    pub max_abs_analytic: f64,
    pub max_abs_numeric: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub loss: f64,
    pub eps: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Largest relative error over all checked (non-frozen) parameters.
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().filter_map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.params.iter().all(|p| p.max_rel_error.is_none_or(|e| e <= tol))
    }

    pub fn failures(&self, tol: f64) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error.is_some_and(|e| e > tol))
    }
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares the tape gradient of the scalar produced by `f` against
/// `(f(θ + ε) - f(θ - ε)) / 2ε` for every entry of the selected parameters.
///
/// The base evaluation records its branch decisions and every perturbed
/// evaluation replays them, so the two sides differentiate the same piece of
/// a piecewise-smooth function.
pub fn finite_difference_check<T, F>(f: F, store: &ParamStore<T>, ids: &[ParamId], eps: f64) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract { op: "finite_difference_check", msg: format!("eps must be positive, got {eps}") });
    }
    let mut g = Graph::recording();
    let loss_var = f(store, &mut g)?;
    let loss = g.value(loss_var).data()[0].as_f64();
    if !loss.is_finite() {
        return Err(Error::NonFinite("loss at the unperturbed point".into()));
    }
    let log = g.branch_log();
    let grads = g.backward(loss_var)?;

    let eval = |work: &ParamStore<T>| -> Result<f64> {
        let mut g = Graph::replaying(log.clone()).with_grad(false);
        let v = f(work, &mut g)?;
        Ok(g.value(v).data()[0].as_f64())
    };

    let mut work = store.clone();
    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let p = store.get(id);
        let numel = p.value.numel();
        let analytic: Vec<f64> = match grads.params().get(id) {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; numel],
        };
        let max_abs_analytic = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
        if p.frozen {
            params.push(ParamCheck {
                name: p.name.clone(),
                numel,
                frozen: true,
                max_rel_error: None,
                worst_index: 0,
                worst_pair: (0.0, 0.0),
                entry_errors: Vec::new(),
                max_abs_analytic,
                max_abs_numeric: 0.0,
            });
            continue;
        }
        let mut worst = (0.0f64, 0usize, (0.0f64, 0.0f64));
        let mut max_abs_numeric = 0.0f64;
        let mut entry_errors = Vec::with_capacity(numel);
        for i in 0..numel {
            let orig = work.get(id).value.data()[i];
            let (up, down) = (T::lit(orig.as_f64() + eps), T::lit(orig.as_f64() - eps));
            work.get_mut(id).value.data_mut()[i] = up;
            let plus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = down;
            let minus = eval(&work)?;
            work.get_mut(id).value.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::NonFinite(format!("loss while perturbing {}[{i}]", p.name)));
            }
            let numeric = (plus - minus) / (up.as_f64() - down.as_f64());
            max_abs_numeric = max_abs_numeric.max(numeric.abs());
            let err = relative_error(analytic[i], numeric);
            entry_errors.push(err);
            if err > worst.0 {
                worst = (err, i, (analytic[i], numeric));
            }
        }
        params.push(ParamCheck {
            name: p.name.clone(),
            numel,
            frozen: false,
            max_rel_error: Some(worst.0),
            worst_index: worst.1,
            worst_pair: worst.2,
            entry_errors,
            max_abs_analytic,
            max_abs_numeric,
        });
    }
    Ok(GradCheckReport { loss, eps, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn detects_a_wrong_backward() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::from_f64([3], &[0.3, -0.8, 1.1]).unwrap()).unwrap();
        // Cube with a backward that drops the factor 3.
        let report = finite_difference_check(
            |s, g| {
                let x = g.param(s, id);
                let y = g.value(x).map(|v| v * v * v);
                let y = g.push(y, &[x], |ctx| {
                    vec![Some(ctx.inputs[0].data().iter().zip(ctx.grad).map(|(&v, &g)| g * v * v).collect())]
                });
                Ok(g.sum(y))
            },
            &s,
            &[id],
            1e-3,
        )
        .unwrap();
        assert!(!report.passes(1e-4));
        assert!((report.max_rel_error() - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn rejects_non_positive_eps() {
        let mut s = ParamStore::<f64>::new();
        let id = s.add("x", Tensor::zeros([1])).unwrap();
        let r = finite_difference_check(|s, g| Ok(g.param(s, id)), &s, &[id], 0.0);
        assert!(matches!(r, Err(Error::Contract { .. })));
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0) - 0.1).abs() < 1e-12);
    }
}
