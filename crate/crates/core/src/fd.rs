//! Central finite-difference checking of analytic gradients.

use alloc::vec::Vec;

use crate::graph::{Graph, GraphError, NodeId};
use crate::mathx;
use crate::tensor::Tensor;

/// Compares the graph gradient of a scalar function against central finite
/// differences, returning the worst relative error over all coordinates:
/// `|analytic - numeric| / (|analytic| + |numeric| + 1e-12)`.
///
/// `f` receives a fresh graph plus one param node per entry of `params` and
/// must return a scalar output node. It is re-invoked for every perturbed
/// evaluation, so it must be a pure function of the parameter values.
pub fn fd_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64, GraphError>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId, GraphError>,
{
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &ids)?;
    let out_val = g.value(out);
    if !out_val.is_scalar() {
        let (r, c) = out_val.shape();
        return Err(GraphError::NonScalarOutput { rows: r, cols: c });
    }
    let grad_ids = g.grad(out, &ids)?;
    let analytic: Vec<Tensor> = grad_ids.iter().map(|&id| g.value(id).clone()).collect();

    let eval = |tensors: &[Tensor]| -> Result<f64, GraphError> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &ids)?;
        Ok(g.value(out).scalar_value())
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut worst = 0.0_f64;
    for (pi, tensor) in params.iter().enumerate() {
        for j in 0..tensor.len() {
            let orig = tensor.values()[j];
            work[pi].values_mut()[j] = orig + h;
            let up = eval(&work)?;
            work[pi].values_mut()[j] = orig - h;
            let down = eval(&work)?;
            work[pi].values_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = analytic[pi].values()[j];
            let rel = mathx::abs(a - numeric) / (mathx::abs(a) + mathx::abs(numeric) + 1e-12);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_form_passes() {
        // f(x) = sum((A x)²) has a known smooth gradient.
        let x = Tensor::from_vec(3, 1, vec![0.5, -1.2, 0.8]);
        let err = fd_check(
            |g, p| {
                let a = g.constant(Tensor::from_vec(
                    2,
                    3,
                    vec![1.0, 2.0, -0.5, 0.3, -1.1, 0.7],
                ));
                let ax = g.matmul(a, p[0])?;
                g.l2_squared(ax)
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn two_layer_tanh_network_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut t = |r: usize, c: usize| {
            Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        };
        let params = vec![t(4, 3), t(1, 3), t(3, 1), t(1, 1)];
        let err = fd_check(
            |g, p| {
                let x = g.constant(Tensor::row(&[0.2, -0.4, 0.9, 0.1]));
                let h1 = g.matmul(x, p[0])?;
                let h1 = g.add_row_vec(h1, p[1])?;
                let h1 = g.tanh(h1)?;
                let o = g.matmul(h1, p[2])?;
                let o = g.add_row_vec(o, p[3])?;
                g.sum(o)
            },
            &params,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn constant_function_zero_gradient() {
        let x = Tensor::row(&[1.0, 2.0]);
        let mut g = Graph::new();
        let p = g.param(x);
        let c = g.scalar(5.0);
        let grads = g.grad(c, &[p]).unwrap();
        assert_eq!(g.value(grads[0]).values(), &[0.0, 0.0]);
    }

    #[test]
    fn second_order_grad_of_grad_passes() {
        // r(θ) = ‖∇(sum(tanh(θ)²))‖² checked against finite differences of r.
        let theta = Tensor::row(&[0.4, -0.9, 0.2]);
        let err = fd_check(
            |g, p| {
                let t = g.tanh(p[0])?;
                let s = g.l2_squared(t)?;
                let first = g.grad(s, &[p[0]])?[0];
                g.l2_squared(first)
            },
            &[theta],
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-3, "second-order relative error {err}");
    }
}
