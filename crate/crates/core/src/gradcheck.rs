//! Central finite-difference gradient oracle.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Compares reverse-mode gradients of `f` at `params` against central
/// differences with step `eps`, returning
/// `max |analytic - numeric| / max(1, |analytic|)` over every coordinate.
///
/// `f` builds its scalar output on the supplied graph from the parameter
/// leaves. It is evaluated twice at the unperturbed point; any bitwise
/// difference means it is not deterministic and the check is refused.
pub fn finite_diff_check<F>(params: &[Tensor], eps: f64, f: F) -> Result<f64>
where
    F: for<'g> Fn(&mut Graph<'g>, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Oracle(format!("step {eps} outside (0, 1e-2]")));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p, false)).collect();
        let out = f(&mut g, &vars)?;
        if g.value(out).len() != 1 {
            return Err(Error::Oracle("function output is not scalar".into()));
        }
        Ok(g.scalar(out))
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.leaf(p, true)).collect();
    let out = f(&mut g, &vars)?;
    let base = g.scalar(out);
    let grads = g.backward(out)?;

    let first = eval(params)?;
    if first.to_bits() != base.to_bits() || eval(params)?.to_bits() != first.to_bits() {
        return Err(Error::Oracle("function is not deterministic".into()));
    }

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("leaf requires grad").to_vec();
        for (i, &a) in analytic.iter().enumerate() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max((a - numeric).abs() / a.abs().max(1.0));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = Tensor::new(vec![4], vec![0.3, -1.2, 2.5, 0.0]).unwrap();
        let err = finite_diff_check(&[theta], 1e-5, |g, p| {
            let sq = g.mul(p[0], p[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(err <= 1e-9, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let theta = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let err = finite_diff_check(&[theta], 1e-5, |g, _| Ok(g.constant(Tensor::scalar(4.0))))
            .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn nondeterministic_function_is_rejected() {
        use std::sync::atomic::{AtomicU64, Ordering};
        let counter = AtomicU64::new(0);
        let theta = Tensor::new(vec![1], vec![1.0]).unwrap();
        let res = finite_diff_check(&[theta], 1e-5, |g, p| {
            let k = counter.fetch_add(1, Ordering::Relaxed) as f64;
            let s = g.sum(p[0]);
            Ok(g.scale(s, 1.0 + k))
        });
        assert!(matches!(res, Err(Error::Oracle(_))));
    }

    #[test]
    fn step_outside_range_is_rejected() {
        let theta = Tensor::scalar(1.0);
        assert!(finite_diff_check(&[theta], 0.5, |g, p| Ok(g.sum(p[0]))).is_err());
    }
}
