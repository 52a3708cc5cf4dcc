//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::params::{GradMap, ParamStore};

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst entry.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// `|a - b| / max(1, |a|, |b|)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

/// Compares `analytic(params)` against central differences of `loss(params)`
/// for every scalar of every parameter that has an analytic gradient.
///
/// Both closures must be deterministic; any sampling noise has to be fixed by
/// the caller.
pub fn grad_check<L, A>(
    params: &ParamStore,
    loss: L,
    analytic: A,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    L: Fn(&ParamStore) -> Result<f64>,
    A: Fn(&ParamStore) -> Result<GradMap>,
{
    let grads = analytic(params)?;
    let mut probe = params.clone();
    let mut worst = None;
    let mut max_err = 0.0f64;
    let mut checked = 0;
    for (name, g) in &grads {
        for k in 0..g.len() {
            let orig = probe.get(name).expect("gradient names a parameter").data()[k];
            probe.get_mut(name).unwrap().data_mut()[k] = orig + step;
            let up = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig - step;
            let down = loss(&probe)?;
            probe.get_mut(name).unwrap().data_mut()[k] = orig;
            let numeric = (up - down) / (2.0 * step);
            let err = relative_error(g.data()[k], numeric);
            checked += 1;
            if err > max_err || worst.is_none() {
                max_err = max_err.max(err);
                worst = Some((name.clone(), k));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_err,
        worst,
        checked,
        tolerance,
        passed: max_err < tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Graph;
    use crate::tensor::Tensor;

    fn quad_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("x", Tensor::row(&[0.3, -1.2, 2.5]));
        s
    }

    // f(x) = x A x^T with A symmetric positive
    fn quad_loss(p: &ParamStore) -> Result<f64> {
        let x = p.get("x").unwrap().data();
        let a = [[2.0, 0.5, 0.0], [0.5, 1.0, -0.3], [0.0, -0.3, 3.0]];
        let mut s = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                s += x[i] * a[i][j] * x[j];
            }
        }
        Ok(s)
    }

    fn quad_grad(p: &ParamStore) -> Result<GradMap> {
        let mut g = Graph::with_store(p);
        let x = g.param("x")?;
        let a = g.leaf(
            Tensor::matrix(3, 3, vec![2.0, 0.5, 0.0, 0.5, 1.0, -0.3, 0.0, -0.3, 3.0]).unwrap(),
        );
        let xa = g.matmul(x, a)?;
        let prod = g.mul(xa, x)?;
        let loss = g.sum(prod);
        g.backward(loss)
    }

    #[test]
    fn quadratic_form_is_exact() {
        let r = grad_check(&quad_store(), quad_loss, quad_grad, 1e-4, 1e-10).unwrap();
        assert!(r.passed, "{r:?}");
        assert!(r.max_rel_error < 1e-10);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn wrong_rule_is_reported() {
        let bad = |p: &ParamStore| {
            let mut g = quad_grad(p)?;
            g.get_mut("x").unwrap().data_mut()[1] *= 1.5;
            Ok(g)
        };
        let r = grad_check(&quad_store(), quad_loss, bad, 1e-5, 1e-4).unwrap();
        assert!(!r.passed);
        assert_eq!(r.worst, Some(("x".to_string(), 1)));
    }
}
