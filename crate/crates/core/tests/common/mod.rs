#![allow(dead_code)]

use bevfuse::graph::{Graph, NodeId};
use bevfuse::rng::Rng;
use bevfuse::{Result, Tensor};

pub fn random_tensor(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.normal())
}

/// Scalar `Σ out ⊙ R` with a fixed random `R`, giving every output
/// element a distinct upstream gradient.
pub fn projected_loss(g: &mut Graph, out: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = Rng::new(seed, 99);
    let r = random_tensor(g.shape(out), &mut rng);
    let r = g.constant(r);
    let prod = g.mul(out, r)?;
    g.sum(prod)
}

pub mod oracles;
