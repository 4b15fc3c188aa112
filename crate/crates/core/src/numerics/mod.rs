//! Tensors, reverse-mode autodiff, seeded randomness and the optimizer.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod params;
pub mod rng;
pub mod sum;
pub mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Gradients, Graph, Var};
pub use params::{ParamId, ParamStore};
pub use rng::PrngState;
pub use tensor::Tensor;

/// Dense affine layer `x·W + b` stored in a [`ParamStore`].
#[derive(Clone, Copy, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut PrngState,
    ) -> crate::Result<Self> {
        let weight = store.insert_glorot(format!("{name}.w"), fan_in, fan_out, rng)?;
        let bias = store.insert(format!("{name}.b"), Tensor::zeros([1, fan_out]))?;
        Ok(Self { weight, bias })
    }

    /// Applies to a matrix of row vectors.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> crate::Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let h = g.matmul(x, w)?;
        g.add(h, b)
    }

    pub fn fan_in(&self, store: &ParamStore) -> usize {
        store.get(self.weight).shape()[0]
    }
}
