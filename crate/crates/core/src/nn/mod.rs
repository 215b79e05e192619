//! Dense tensors, reverse-mode differentiation, recurrent/affine layers and Adam.

mod adam;
pub mod gradcheck;
mod graph;
mod layers;
mod params;
mod tensor;

pub use adam::AdamState;
pub use graph::{Binding, Gradients, Graph, Var};
pub use layers::{Activation, ElmanCell, GruCell, LstmCell, Mlp};
pub use params::{LayoutBuilder, ParamVector, Segment, SegmentLayout};
pub use tensor::Tensor;

pub(crate) use graph::{sigmoid_scalar, softplus_scalar};

use crate::error::Result;
use crate::scalar::Scalar;

/// `W·x + b` evaluated eagerly.
pub fn affine<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let (x, w, b) = (g.input(x.clone())?, g.input(w.clone())?, g.input(b.clone())?);
    let y = g.affine(x, w, b)?;
    Ok(g.value(y).clone())
}

pub fn softmax<T: Scalar>(v: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let x = g.input(v.clone())?;
    let y = g.softmax(x)?;
    Ok(g.value(y).clone())
}

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let (a, b) = (g.input(a.clone())?, g.input(b.clone())?);
    let l = g.mse(a, b)?;
    g.value(l).item()
}

pub fn kl_gauss<T: Scalar>(mu: &Tensor<T>, sigma: &Tensor<T>) -> Result<T> {
    let mut g = Graph::new();
    let (m, s) = (g.input(mu.clone())?, g.input(sigma.clone())?);
    let l = g.kl_gauss(m, s)?;
    g.value(l).item()
}

/// One GRU step with parameters read from `params` under `cell`'s segment names.
pub fn gru_cell<T: Scalar>(
    cell: &GruCell,
    h_prev: &Tensor<T>,
    x: &Tensor<T>,
    params: &ParamVector<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let b = g.bind(params);
    let (h, x) = (g.input(h_prev.clone())?, g.input(x.clone())?);
    let y = cell.step(&mut g, b, h, x)?;
    Ok(g.value(y).clone())
}

pub fn adam_update<T: Scalar>(p: &mut ParamVector<T>, st: &mut AdamState<T>, lr: T) -> Result<()> {
    st.update(p, lr)
}

#[cfg(test)]
mod tests;
