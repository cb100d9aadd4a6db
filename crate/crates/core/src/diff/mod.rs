//! Reverse-mode differentiation over dense tensors.
//!
//! Every loss and attack gradient in the crate is computed here. The primitive
//! set is closed: losses are compositions of the ops on [`Graph`], with
//! cross-entropy and log-softmax as the only fused kernels.

mod check;
mod graph;
mod tensor;

use thiserror::Error;

pub use check::{finite_difference_check, finite_difference_check_at, graph_function};
pub use graph::{Gradients, Graph, TokensVar, Var};
pub use tensor::{Real, Tensor};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DiffError {
    #[error("tensor of shape {shape:?} cannot hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },
    #[error("node {node}: {op} shape mismatch: {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("node {node}: index {index} out of range for extent {bound}")]
    IndexOutOfRange { node: usize, index: usize, bound: usize },
    #[error("input `{0}` contains non-finite values")]
    NonFinite(String),
    #[error("unknown input `{0}`")]
    UnknownInput(String),
    #[error("input `{0}` is an integer input and has no gradient")]
    NotDifferentiable(String),
    #[error("input `{0}` was bound without gradient tracking")]
    Untracked(String),
    #[error("duplicate input name `{0}`")]
    DuplicateInput(String),
    #[error("node {node} is not a scalar (shape {shape:?})")]
    NotScalar { node: usize, shape: Vec<usize> },
}

/// Builds a graph over the given bindings (in order) and returns its output value.
pub fn evaluate<T, F>(build: F, bindings: &[(&str, Tensor<T>)]) -> Result<Tensor<T>, DiffError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars = bindings
        .iter()
        .map(|(name, t)| g.bind(name, t.clone(), false))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).clone())
}

/// Builds a graph and differentiates its scalar output with respect to `wrt`.
///
/// Returns the output value together with one gradient per requested name.
pub fn gradients<T, F>(
    build: F,
    bindings: &[(&str, Tensor<T>)],
    wrt: &[&str],
) -> Result<(T, std::collections::HashMap<String, Tensor<T>>), DiffError>
where
    T: Real,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var, DiffError>,
{
    let mut g = Graph::new();
    let vars = bindings
        .iter()
        .map(|(name, t)| g.bind(name, t.clone(), wrt.contains(name)))
        .collect::<Result<Vec<_>, _>>()?;
    let out = build(&mut g, &vars)?;
    let grads = g.gradients(out, wrt)?;
    Ok((g.value(out).item(), grads))
}
