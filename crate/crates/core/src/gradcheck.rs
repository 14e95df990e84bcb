//! Central-difference gradient oracle.

use crate::error::{HorstError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all entries of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_error: f64,
    /// `(param index, flat entry index)` of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub entries: usize,
}

fn eval<F>(f: &F, params: &[Tensor], requires_grad: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone(), requires_grad))
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(HorstError::Graph(format!(
            "grad_check needs a scalar function, got shape {:?}",
            g.shape(out)
        )));
    }
    Ok((g, vars, out))
}

/// Compares reverse-mode gradients of the scalar function `f` against central
/// differences `(f(p + eps) - f(p - eps)) / 2 eps` for every entry of `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], epsilon: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if params.iter().any(|p| !p.all_finite()) {
        return Err(HorstError::Graph(
            "grad_check parameters must be finite".into(),
        ));
    }
    let (g, vars, out) = eval(&f, params, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(g);

    compare_numeric(params, &analytic, epsilon, |work| {
        let (g, _, out) = eval(&f, work, false)?;
        Ok(g.value(out).data()[0])
    })
}

/// Compares `analytic` gradients of `loss` at `params` against central
/// differences, perturbing one entry at a time.
pub fn compare_numeric<L>(
    params: &[Tensor],
    analytic: &[Tensor],
    epsilon: f64,
    loss: L,
) -> Result<GradCheckReport>
where
    L: Fn(&[Tensor]) -> Result<f64>,
{
    if params.len() != analytic.len()
        || params
            .iter()
            .zip(analytic)
            .any(|(p, a)| p.shape() != a.shape())
    {
        return Err(HorstError::Graph(
            "analytic gradients do not match parameter shapes".into(),
        ));
    }
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        entries: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, p) in params.iter().enumerate() {
        for i in 0..p.len() {
            let orig = p.data()[i];
            work[pi].data_mut()[i] = orig + epsilon;
            let fp = loss(&work)?;
            work[pi].data_mut()[i] = orig - epsilon;
            let fm = loss(&work)?;
            work[pi].data_mut()[i] = orig;

            let numeric = (fp - fm) / (2.0 * epsilon);
            let a = analytic[pi].data()[i];
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.entries += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = rel;
                report.worst = (pi, i);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let r = grad_check(
            |g, v| g.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!((r.analytic - 6.0).abs() < 1e-12);
        assert!(r.max_rel_error < 1e-8);
    }

    #[test]
    fn sigmoid_at_zero() {
        let r = grad_check(
            |g, v| Ok(g.sigmoid(v[0])),
            &[Tensor::scalar(0.0)],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert!((r.analytic - 0.25).abs() < 1e-15);
        assert!(r.max_rel_error < 1e-6);
    }

    #[test]
    fn relu_inactive_region() {
        let r = grad_check(
            |g, v| Ok(g.relu(v[0])),
            &[Tensor::scalar(-1.0)],
            DEFAULT_EPSILON,
        )
        .unwrap();
        assert_eq!(r.analytic, 0.0);
        assert_eq!(r.numeric, 0.0);
    }

    #[test]
    fn rejects_vector_output() {
        let out = grad_check(
            |g, v| Ok(g.relu(v[0])),
            &[Tensor::from_vec(vec![1.0, 2.0])],
            1e-5,
        );
        assert!(out.is_err());
    }
}
