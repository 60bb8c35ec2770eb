//! Dense arrays, reverse-mode differentiation, layers, Adam and checkpoints.

mod adam;
pub mod check;
pub mod checkpoint;
mod graph;
mod kernels;
pub mod nn;
mod params;
mod real;
mod tensor;

pub use adam::Adam;
pub use graph::{Graph, Var};
pub use kernels::NormEps;
pub use nn::standardize_weights;
pub use params::{AdamState, Gradients, ParameterSet};
pub use real::{gemm, Real};
pub use tensor::Tensor;

/// Evaluate a scalar loss built over `params` and return it with the
/// gradients of every parameter.
pub fn forward_backward<R: Real>(
    params: &ParameterSet<R>,
    loss: impl FnOnce(&mut Graph<R>) -> Var,
) -> crate::Result<(f64, Gradients<R>)> {
    let mut g = Graph::new();
    g.bind(params);
    let l = loss(&mut g);
    let grads = g.backward(l)?;
    Ok((g.value(l).data()[0].as_f64(), grads))
}
