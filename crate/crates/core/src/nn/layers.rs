use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::graph::{Binding, Graph, Var};
use crate::nn::params::LayoutBuilder;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Tanh,
    Sigmoid,
    Softplus,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Result<Var> {
        match self {
            Activation::Identity => Ok(x),
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
            Activation::Softplus => g.softplus(x),
        }
    }
}

/// Stack of affine layers `{prefix}.l{k}.w` / `{prefix}.l{k}.b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    prefix: String,
    sizes: Vec<usize>,
}

impl Mlp {
    /// `sizes = [input, hidden.., output]`.
    pub fn new(prefix: impl Into<String>, sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Self {
            prefix: prefix.into(),
            sizes: sizes.to_vec(),
        }
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn declare(&self, mut b: LayoutBuilder) -> LayoutBuilder {
        for k in 0..self.sizes.len() - 1 {
            b = b
                .push(format!("{}.l{k}.w", self.prefix), &[self.sizes[k + 1], self.sizes[k]])
                .push(format!("{}.l{k}.b", self.prefix), &[self.sizes[k + 1]]);
        }
        b
    }

    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: Binding,
        x: Var,
        hidden: Activation,
        output: Activation,
    ) -> Result<Var> {
        let n = self.sizes.len() - 1;
        let mut h = x;
        for k in 0..n {
            let w = g.param(params, &format!("{}.l{k}.w", self.prefix))?;
            let b = g.param(params, &format!("{}.l{k}.b", self.prefix))?;
            h = g.affine(h, w, b)?;
            let act = if k + 1 == n { output } else { hidden };
            h = act.apply(g, h)?;
        }
        Ok(h)
    }
}

/// Gated recurrent unit over `[h_{t-1}, x_t]`:
/// `u = σ(W_u[h,x]+b_u)`, `r = σ(W_r[h,x]+b_r)`, `h̃ = tanh(W_h[r⊙h,x]+b_h)`,
/// `h_t = (1−u)⊙h + u⊙h̃`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GruCell {
    prefix: String,
    input: usize,
    hidden: usize,
}

impl GruCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden
    }

    fn name(&self, s: &str) -> String {
        format!("{}.{s}", self.prefix)
    }

    pub fn declare(&self, b: LayoutBuilder) -> LayoutBuilder {
        let cat = self.hidden + self.input;
        b.push(self.name("w_u"), &[self.hidden, cat])
            .push(self.name("w_r"), &[self.hidden, cat])
            .push(self.name("w_h"), &[self.hidden, cat])
            .push(self.name("b_u"), &[self.hidden])
            .push(self.name("b_r"), &[self.hidden])
            .push(self.name("b_h"), &[self.hidden])
    }

    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: Binding,
        h_prev: Var,
        x: Var,
    ) -> Result<Var> {
        if g.value(h_prev).last_dim() != self.hidden || g.value(x).last_dim() != self.input {
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "h {:?} / x {:?} for a cell with hidden {} input {}",
                    g.value(h_prev).shape(),
                    g.value(x).shape(),
                    self.hidden,
                    self.input
                ),
            ));
        }
        let w_u = g.param(params, &self.name("w_u"))?;
        let w_r = g.param(params, &self.name("w_r"))?;
        let w_h = g.param(params, &self.name("w_h"))?;
        let b_u = g.param(params, &self.name("b_u"))?;
        let b_r = g.param(params, &self.name("b_r"))?;
        let b_h = g.param(params, &self.name("b_h"))?;

        let hx = g.concat(&[h_prev, x])?;
        let u = g.affine(hx, w_u, b_u)?;
        let u = g.sigmoid(u)?;
        let r = g.affine(hx, w_r, b_r)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h_prev)?;
        let rhx = g.concat(&[rh, x])?;
        let cand = g.affine(rhx, w_h, b_h)?;
        let cand = g.tanh(cand)?;
        let keep = g.one_minus(u)?;
        let a = g.mul(keep, h_prev)?;
        let b = g.mul(u, cand)?;
        g.add(a, b)
    }
}

/// Plain recurrent cell `h_t = tanh(W[h,x] + b)`; comparison baseline.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ElmanCell {
    prefix: String,
    input: usize,
    hidden: usize,
}

impl ElmanCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn declare(&self, b: LayoutBuilder) -> LayoutBuilder {
        b.push(format!("{}.w", self.prefix), &[self.hidden, self.hidden + self.input])
            .push(format!("{}.b", self.prefix), &[self.hidden])
    }

    pub fn step<T: Scalar>(&self, g: &mut Graph<T>, params: Binding, h: Var, x: Var) -> Result<Var> {
        let w = g.param(params, &format!("{}.w", self.prefix))?;
        let b = g.param(params, &format!("{}.b", self.prefix))?;
        let hx = g.concat(&[h, x])?;
        let a = g.affine(hx, w, b)?;
        g.tanh(a)
    }
}

/// LSTM cell with gates stacked as `[i, f, o, g]` rows of one weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LstmCell {
    prefix: String,
    input: usize,
    hidden: usize,
}

impl LstmCell {
    pub fn new(prefix: impl Into<String>, input: usize, hidden: usize) -> Self {
        Self {
            prefix: prefix.into(),
            input,
            hidden,
        }
    }

    pub fn declare(&self, b: LayoutBuilder) -> LayoutBuilder {
        b.push(format!("{}.w", self.prefix), &[4 * self.hidden, self.hidden + self.input])
            .push(format!("{}.b", self.prefix), &[4 * self.hidden])
    }

    /// Returns `(h_t, c_t)`.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        params: Binding,
        h: Var,
        c: Var,
        x: Var,
    ) -> Result<(Var, Var)> {
        let w = g.param(params, &format!("{}.w", self.prefix))?;
        let b = g.param(params, &format!("{}.b", self.prefix))?;
        let hx = g.concat(&[h, x])?;
        let z = g.affine(hx, w, b)?;
        let n = self.hidden;
        let i = g.slice_last(z, 0, n)?;
        let i = g.sigmoid(i)?;
        let f = g.slice_last(z, n, n)?;
        let f = g.sigmoid(f)?;
        let o = g.slice_last(z, 2 * n, n)?;
        let o = g.sigmoid(o)?;
        let cand = g.slice_last(z, 3 * n, n)?;
        let cand = g.tanh(cand)?;
        let fc = g.mul(f, c)?;
        let ic = g.mul(i, cand)?;
        let c_next = g.add(fc, ic)?;
        let tc = g.tanh(c_next)?;
        let h_next = g.mul(o, tc)?;
        Ok((h_next, c_next))
    }
}
