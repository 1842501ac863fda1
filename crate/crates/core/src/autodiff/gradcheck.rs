use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AutodiffError, Graph, Tensor, Var};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub epsilon: f64,
    /// Coordinates checked per tensor; `None` checks every coordinate.
    pub coords_per_tensor: Option<usize>,
    pub seed: u64,
    /// Lower bound of the relative-error denominator, so that gradients
    /// that are zero up to rounding are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { epsilon: 1e-5, coords_per_tensor: None, seed: 0, floor: 1e-8 }
    }
}

/// Location of one checked coordinate: tensor index within `params`, flat index within it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Coordinate {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<Coordinate>,
    pub checked: usize,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

/// Compares reverse-mode gradients of `f` against central finite differences.
///
/// `f` receives a fresh graph and one leaf per entry of `params` and must
/// return a scalar node. The reported error at a coordinate is
/// `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
pub fn grad_check<S, E, F>(f: F, params: &[Tensor<S>], cfg: &GradCheckConfig) -> Result<GradCheckReport, E>
where
    S: Scalar,
    E: From<AutodiffError>,
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var, E>,
{
    let eval = |ps: &[Tensor<S>]| -> Result<(Graph<S>, Vec<Var>, Var), E> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let out = f(&mut g, &vars)?;
        Ok((g, vars, out))
    };

    let (graph, vars, out) = eval(params)?;
    let grads = graph.backward(out)?;
    let analytic: Vec<Tensor<S>> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(graph);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eps = S::lit(cfg.epsilon);
    let mut work: Vec<Tensor<S>> = params.to_vec();
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: None, checked: 0, analytic_at_worst: 0.0, numeric_at_worst: 0.0 };

    for (ti, param) in params.iter().enumerate() {
        let n = param.len();
        let coords: Vec<usize> = match cfg.coords_per_tensor {
            Some(k) if k < n => {
                let mut v = sample(&mut rng, n, k).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..n).collect(),
        };
        for index in coords {
            let base = param.data()[index];
            work[ti].data_mut()[index] = base + eps;
            let plus = scalar_of(&eval(&work)?);
            work[ti].data_mut()[index] = base - eps;
            let minus = scalar_of(&eval(&work)?);
            work[ti].data_mut()[index] = base;

            let numeric = (plus - minus) / (S::lit(2.0) * eps);
            let a = analytic[ti].data()[index];
            if !numeric.is_finite() || !a.is_finite() {
                return Err(AutodiffError::NonFinite { tensor: ti, index }.into());
            }
            let (a, numeric) = (a.as_f64(), numeric.as_f64());
            let denom = a.abs().max(numeric.abs()).max(cfg.floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some(Coordinate { tensor: ti, index });
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

fn scalar_of<S: Scalar>((g, _, out): &(Graph<S>, Vec<Var>, Var)) -> S {
    g.value(*out).data().iter().copied().sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let report = grad_check::<f64, AutodiffError, _>(
            |g, v| g.hadamard(v[0], v[0]).map(|y| g.sum(y)),
            &[Tensor::scalar(1.0)],
            &GradCheckConfig { epsilon: 1e-4, ..Default::default() },
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let report = grad_check::<f64, AutodiffError, _>(
            |g, _| Ok(g.constant(Tensor::scalar(7.0))),
            &[Tensor::row(vec![1.0, 2.0]).unwrap()],
            &GradCheckConfig::default(),
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
        assert_eq!(report.checked, 2);
    }

    #[test]
    fn non_finite_reports_location() {
        let err = grad_check::<f64, AutodiffError, _>(
            |g, v| {
                let l = g.log(v[0]);
                Ok(g.sum(l))
            },
            &[Tensor::row(vec![1.0, 0.0]).unwrap()],
            &GradCheckConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, AutodiffError::NonFinite { tensor: 0, .. }));
    }
}
