//! Finite-difference verification of tape gradients.

use super::{Graph, Tensor, Var};
use crate::error::{contract_err, Result};

/// Relative error used throughout: `|analytic - numeric| / (|numeric| + 1e-12)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (numeric.abs() + 1e-12)
}

/// Which input components to probe.
#[derive(Clone, Debug)]
pub enum Probe {
    All,
    /// Explicit `(input index, component index)` pairs.
    Components(Vec<(usize, usize)>),
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-7..=1e-3).contains(&eps) {
        return contract_err(format!("grad_check eps {eps} outside [1e-7, 1e-3]"));
    }
    Ok(())
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t)).collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return contract_err("grad_check builder must return a scalar");
    }
    Ok(g.value(out).data()[0])
}

/// Maximum relative error between tape gradients and central differences,
/// over the probed components of several inputs.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor], eps: f64, probe: &Probe) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            g.leaf(&t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.len()], <[f64]>::to_vec))
        .collect();

    let components: Vec<(usize, usize)> = match probe {
        Probe::All => inputs
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect(),
        Probe::Components(c) => c.clone(),
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for (i, j) in components {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&f, &work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        worst = worst.max(relative_error(analytic[i][j], numeric));
    }
    Ok(worst)
}

/// Single-input form: `f` receives the graph and the leaf for `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, v| f(g, v[0]), std::slice::from_ref(x), eps, &Probe::All)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_has_exact_gradient() {
        let x = Tensor::row(&[1.0, 2.0, 3.0]);
        // power-of-two step keeps the central difference exact
        let err = grad_check(|g, v| Ok(g.sum(v)), &x, 2f64.powi(-17)).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::row(&[1.0, 2.0]);
        let err = grad_check(
            |g, v| {
                let s = g.square(v);
                Ok(g.sum(s))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn eps_out_of_range() {
        let x = Tensor::row(&[1.0]);
        assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 1e-2).is_err());
    }
}
