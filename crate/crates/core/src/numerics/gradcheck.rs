//! Central finite-difference verification of reverse-mode gradients.

use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::params::ParamStore;

/// Denominator floor for the relative error, so exactly-zero gradients compare
/// on an absolute scale.
pub const REL_ERR_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient of scalar `f` at `x` with central differences;
/// returns the maximum elementwise relative error.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, step: f64) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, Var<'g, f64>) -> Result<Var<'g, f64>>,
{
    grad_check_many(|g, xs| f(g, xs[0]), std::slice::from_ref(x), step, None)
}

/// Multi-input variant. When `max_coords` is set, at most that many evenly
/// spaced coordinates per input are perturbed.
pub fn grad_check_many<F>(f: F, inputs: &[Tensor<f64>], step: f64, max_coords: Option<usize>) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    grad_check_with_params(f, &ParamStore::default(), inputs, step, max_coords)
}

/// Checks gradients with respect to the explicit `inputs` and to every tensor
/// of `store`, which `f` reaches through [`Graph::param`].
pub fn grad_check_with_params<F>(
    f: F,
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    step: f64,
    max_coords: Option<usize>,
) -> Result<f64>
where
    F: for<'g> Fn(&'g Graph<f64>, &[Var<'g, f64>]) -> Result<Var<'g, f64>>,
{
    if !(step > 0.0) {
        return Err(Error::Invalid(format!("finite-difference step must be positive, got {step}")));
    }
    let n_in = inputs.len();
    let mut all: Vec<Tensor<f64>> = inputs.to_vec();
    all.extend(store.tensors().iter().cloned());

    let scalar = |y: Var<'_, f64>| -> Result<f64> {
        if y.numel() != 1 {
            return Err(Error::shape("grad_check", format!("function must be scalar-valued, got {:?}", y.shape())));
        }
        let v = y.value().item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check function value".into()));
        }
        Ok(v)
    };
    let with_params = |ts: &[Tensor<f64>]| -> Result<ParamStore<f64>> {
        let mut s = store.clone();
        for (id, t) in store.ids().zip(&ts[n_in..]) {
            s.set(id, t.clone())?;
        }
        Ok(s)
    };
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let s = with_params(ts)?;
        let g = Graph::new(&s);
        let vars: Vec<Var<'_, f64>> = ts[..n_in].iter().map(|t| g.leaf(t.clone())).collect();
        scalar(f(&g, &vars)?)
    };

    let g = Graph::new(store);
    let vars: Vec<Var<'_, f64>> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let y = f(&g, &vars)?;
    scalar(y)?;
    let grads = g.backward(y)?;
    let mut analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.wrt_or_zero(v)).collect();
    analytic.extend(grads.param_grads(store));

    let mut worst = 0.0f64;
    let mut probe = all.clone();
    for (which, input) in all.iter().enumerate() {
        let n = input.numel();
        let stride = match max_coords {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(stride) {
            let mut plus = input.to_vec();
            let mut minus = input.to_vec();
            plus[i] += step;
            minus[i] -= step;
            probe[which] = Tensor::new(input.shape(), plus)?;
            let fp = eval(&probe)?;
            probe[which] = Tensor::new(input.shape(), minus)?;
            let fm = eval(&probe)?;
            let numeric = (fp - fm) / (2.0 * step);
            worst = worst.max(relative_error(analytic[which].data()[i], numeric));
        }
        probe[which] = input.clone();
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_sum() {
        let x = Tensor::from_f64(&[1], &[3.0]).unwrap();
        let err = grad_check(|_, x| Ok(x.mul(x)?.sum()), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // A deliberately broken op: forward x², claimed derivative 1.
        let x = Tensor::from_f64(&[2], &[1.5, -2.0]).unwrap();
        let err = grad_check(
            |g, x| {
                let v = x.value().map(|a| a * a);
                Ok(g.op(v, &[x], |gr| vec![Some(gr.clone())]).sum())
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn non_finite_function_is_an_error() {
        let x = Tensor::from_f64(&[1], &[0.0]).unwrap();
        let r = grad_check(|_, x| Ok(x.scale(f64::INFINITY).sum()), &x, 1e-5);
        assert!(matches!(r, Err(Error::NonFinite(_))));
    }
}
