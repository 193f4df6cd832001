//! Helpers shared by unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::numcore::{Graph, ParamStore, Tensor, Var};
use crate::Result;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Entries uniform in `[-1, 1)`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Overwrites every parameter with values uniform in `[-1, 1)`.
pub fn scramble(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
}

/// `sum(y * weights)`: a scalar loss with a dense, generic gradient.
pub fn projected(g: &Graph<f64>, y: &Var<f64>, weights: &Tensor<f64>) -> Result<Var<f64>> {
    g.sum(&g.mul(y, &g.constant(weights.clone()))?)
}
