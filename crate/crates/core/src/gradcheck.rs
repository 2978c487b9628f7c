//! Central finite-difference verification of autodiff gradients.

use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(parameter index, flat entry)` of the worst entry.
    pub worst: (usize, usize),
    /// Autodiff and finite-difference values at `worst`.
    pub worst_values: (f64, f64),
    pub entries_checked: usize,
}

/// Denominator floor of [`relative_error`]. Entries smaller than this are
/// compared absolutely: f64 central differences resolve about 1e-10.
pub const MAGNITUDE_FLOOR: f64 = 1e-5;

/// `|a − b| / max(|a|, |b|, MAGNITUDE_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(MAGNITUDE_FLOOR)
}

/// Compares autodiff gradients of `f` against central differences
/// `(f(θ+ε) − f(θ−ε)) / 2ε` for every entry of every parameter.
///
/// `f` receives a fresh graph and one leaf per parameter and must return a
/// scalar. It is evaluated twice at the unperturbed point; differing values
/// mean `f` is not deterministic and the check is refused.
pub fn finite_difference_check<F>(mut f: F, params: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::Parameter(format!("eps must lie in [1e-7, 1e-3], got {eps}")));
    }
    let mut eval = |values: &[Tensor], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values
            .iter()
            .map(|t| {
                g.input(t.shape(), t.data().to_vec(), want_grad)
                    .expect("tensor shapes are valid")
            })
            .collect();
        let loss = f(&mut g, &vars)?;
        let value = g.value(loss);
        if value.len() != 1 {
            return contract("gradient check needs a scalar function");
        }
        let value = value[0];
        if !want_grad {
            return Ok((value, Vec::new()));
        }
        let grads = g.backward(loss)?;
        let per_param = vars
            .iter()
            .zip(values)
            .map(|(&v, t)| grads.get(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
            .collect();
        Ok((value, per_param))
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let (f0, analytic) = eval(&work, true)?;
    let (f1, _) = eval(&work, false)?;
    if f0.to_bits() != f1.to_bits() {
        return contract(format!(
            "function is not deterministic: {f0} then {f1} at the same point"
        ));
    }

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        worst_values: (0.0, 0.0),
        entries_checked: 0,
    };
    for p in 0..work.len() {
        for i in 0..work[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + eps;
            let (fp, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig - eps;
            let (fm, _) = eval(&work, false)?;
            work[p].data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let err = relative_error(analytic[p][i], numeric);
            report.entries_checked += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (p, i);
                report.worst_values = (analytic[p][i], numeric);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Tensor::randn(&[4, 4], 1.0, &mut rng);
        let x = Tensor::randn(&[4, 1], 1.0, &mut rng);
        // f(x) = xᵀ A x
        let report = finite_difference_check(
            |g, v| {
                let a = g.leaf(&a);
                let ax = g.matmul(a, v[0])?;
                let prod = g.mul(v[0], ax)?;
                Ok(g.sum(prod))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
        assert_eq!(report.entries_checked, 4);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::full(&[3], 2.0);
        let report = finite_difference_check(
            |g, _| g.constant(&[1], vec![7.0]),
            &[x],
            1e-5,
        )
        .unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn rejects_nondeterministic_function() {
        let x = Tensor::full(&[1], 1.0);
        let mut calls = 0.0;
        let res = finite_difference_check(
            |g, v| {
                calls += 1.0;
                let s = g.sum(v[0]);
                Ok(g.add_scalar(s, calls))
            },
            &[x],
            1e-5,
        );
        assert!(matches!(res, Err(Error::Contract(_))));
    }

    #[test]
    fn rejects_eps_out_of_range() {
        let x = Tensor::full(&[1], 1.0);
        assert!(finite_difference_check(|g, v| Ok(g.sum(v[0])), &[x.clone()], 1e-2).is_err());
        assert!(finite_difference_check(|g, v| Ok(g.sum(v[0])), &[x], 1e-9).is_err());
    }
}
