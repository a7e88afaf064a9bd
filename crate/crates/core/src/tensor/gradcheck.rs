//! Finite-difference gradient checking.
//!
//! The oracle perturbs each parameter entry by `±eps`, re-evaluates the
//! function from scratch on a fresh graph, and compares the central
//! difference with the reverse-mode gradient.

use super::{Graph, Scalar, Tensor, TensorError, Var};

/// Outcome of a gradient check.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Index of the parameter and flat element with the largest relative error.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Relative error with denominator `max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Compares autodiff gradients of the scalar function `f` at `params` to
/// central differences with step `eps`.
///
/// `f` receives a fresh graph and the parameter handles (registered as
/// trainable leaves in order) and returns the scalar output.
pub fn grad_check<T, E, F>(f: F, params: &[Tensor<T>], eps: f64) -> Result<GradCheckReport, E>
where
    T: Scalar,
    E: From<TensorError>,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
{
    let (_, analytic) = value_and_grad(&f, params)?;
    let numeric = numeric_grad(&f, params, eps)?;
    Ok(compare(&analytic, &numeric))
}

/// Element-wise comparison of two gradient sets.
pub fn compare<A: Scalar, B: Scalar>(analytic: &[Tensor<A>], numeric: &[Tensor<B>]) -> GradCheckReport {
    let mut report = GradCheckReport { max_rel_error: 0.0, max_abs_error: 0.0, worst: None, checked: 0 };
    for (pi, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        for (j, (&a, &n)) in a.data().iter().zip(n.data()).enumerate() {
            let (a, n) = (a.as_f64(), n.as_f64());
            let rel = relative_error(a, n);
            report.max_abs_error = report.max_abs_error.max((a - n).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = rel.max(report.max_rel_error);
                report.worst = Some((pi, j));
            }
            report.checked += 1;
        }
    }
    report
}

/// Central differences `(f(p+eps) - f(p-eps)) / 2eps` for every entry.
pub fn numeric_grad<T, E, F>(f: &F, params: &[Tensor<T>], eps: f64) -> Result<Vec<Tensor<T>>, E>
where
    T: Scalar,
    E: From<TensorError>,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
{
    let mut probe: Vec<Tensor<T>> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for (pi, p) in params.iter().enumerate() {
        let mut d = Vec::with_capacity(p.numel());
        for j in 0..p.numel() {
            let orig = p.data()[j];
            probe[pi].data_mut()[j] = T::from_f64(orig.as_f64() + eps);
            let plus = eval(f, &probe)?;
            probe[pi].data_mut()[j] = T::from_f64(orig.as_f64() - eps);
            let minus = eval(f, &probe)?;
            probe[pi].data_mut()[j] = orig;
            d.push(T::from_f64((plus - minus) / (2.0 * eps)));
        }
        grads.push(Tensor::new(p.shape().to_vec(), d).map_err(E::from)?);
    }
    Ok(grads)
}

fn eval<T: Scalar, E, F>(f: &F, params: &[Tensor<T>]) -> Result<f64, E>
where
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item().as_f64())
}

/// Value of `f` and its gradient with respect to every parameter.
pub fn value_and_grad<T: Scalar, E, F>(f: &F, params: &[Tensor<T>]) -> Result<(f64, Vec<Tensor<T>>), E>
where
    E: From<TensorError>,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, E>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out).map_err(E::from)?;
    let grads = vars.iter().map(|&v| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))).collect();
    Ok((g.value(out).item().as_f64(), grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_matches_analytic() {
        let x = Tensor::<f64>::from_f64([3], &[0.3, -1.2, 2.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        };
        let r = grad_check(f, &[x.clone()], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
        let (_, grads) = value_and_grad(&f, &[x.clone()]).unwrap();
        for (g, x) in grads[0].data().iter().zip(x.data()) {
            assert_eq!(*g, 2.0 * x);
        }
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let unused = Tensor::<f64>::from_f64([2], &[5.0, 6.0]).unwrap();
        let f = |g: &mut Graph<f64>, v: &[Var]| g.sum(v[0]);
        let (_, grads) = value_and_grad(&f, &[x.clone(), unused.clone()]).unwrap();
        assert!(grads[1].data().iter().all(|&v| v == 0.0));
        let r = grad_check(f, &[x, unused], 1e-5).unwrap();
        assert!(r.max_rel_error < 1e-9);
    }
}
