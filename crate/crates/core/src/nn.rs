//! Small shared building blocks for the trainable aggregators.

use alloc::vec::Vec;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, GraphError, NodeId};
use crate::mathx;
use crate::tensor::Tensor;

/// A dense layer: weights `in_dim`×`out_dim` plus a 1×`out_dim` bias row.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    /// Weight init N(0, 1/in_dim), zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let scale = 1.0 / mathx::sqrt(in_dim as f64);
        let data: Vec<f64> = (0..in_dim * out_dim)
            .map(|_| {
                let x: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                x * scale
            })
            .collect();
        Linear {
            w: Tensor::from_vec(in_dim, out_dim, data),
            b: Tensor::zeros(1, out_dim),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.cols()
    }
}

/// Param node handles for one [`Linear`] inside a graph being built.
#[derive(Debug, Clone, Copy)]
pub struct LinearNodes {
    pub w: NodeId,
    pub b: NodeId,
}

impl LinearNodes {
    pub fn bind(layer: &Linear, g: &mut Graph) -> Self {
        LinearNodes {
            w: g.param(layer.w.clone()),
            b: g.param(layer.b.clone()),
        }
    }

    /// Binds the layer as constants: no gradient will flow into it.
    pub fn bind_const(layer: &Linear, g: &mut Graph) -> Self {
        LinearNodes {
            w: g.constant(layer.w.clone()),
            b: g.constant(layer.b.clone()),
        }
    }

    /// `x · W + b` for a B×in input.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId, GraphError> {
        let xw = g.matmul(x, self.w)?;
        g.add_row_vec(xw, self.b)
    }
}

/// Applies one SGD step: `param -= lr * grad` for each (param, grad) pair.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
    debug_assert_eq!(params.len(), grads.len());
    for (p, g) in params.iter_mut().zip(grads.iter()) {
        debug_assert_eq!(p.shape(), g.shape());
        for (pv, gv) in p.values_mut().iter_mut().zip(g.values().iter()) {
            *pv -= lr * gv;
        }
    }
}

/// Deterministic epoch shuffling: a Fisher-Yates permutation of `0..n`.
pub fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        idx.swap(i, j);
    }
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn linear_forward_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let layer = Linear::init(3, 2, &mut rng);
        let mut g = Graph::new();
        let nodes = LinearNodes::bind(&layer, &mut g);
        let x = g.constant(Tensor::zeros(4, 3));
        let y = nodes.forward(&mut g, x).unwrap();
        assert_eq!(g.value(y).shape(), (4, 2));
    }

    #[test]
    fn shuffle_is_deterministic_permutation() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let x = shuffled_indices(10, &mut a);
        let y = shuffled_indices(10, &mut b);
        assert_eq!(x, y);
        let mut sorted = x.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    }
}
