//! Reverse-mode differentiation over a per-forward-pass tape.
//!
//! A [`Graph`] is built fresh for each forward pass. Parameters enter through
//! a [`Binding`] to a [`ParamVector`]; [`Graph::backward`] returns gradients
//! keyed by binding which the caller folds into the parameter vectors it owns.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::params::{ParamVector, SegmentLayout};
use crate::nn::tensor::Tensor;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Binding(usize);

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Param { binding: usize, offset: usize },
    Affine { x: usize, w: usize, b: usize },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    ScaleShift { x: usize, scale: T },
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Softmax(usize),
    Concat(Vec<usize>),
    SliceLast { x: usize, start: usize },
    Gather { table: usize, idx: Vec<usize> },
    SumAll(usize),
    MeanAll(usize),
    SumLast(usize),
    Mse(usize, usize),
    KlGauss { mu: usize, sigma: usize },
    Minimum(usize, usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

#[derive(Debug)]
struct BoundParams<T> {
    layout: Arc<SegmentLayout>,
    values: Vec<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bindings: Vec<BoundParams<T>>,
    seg_cache: HashMap<(usize, String), Var>,
}

/// Gradients of a scalar loss with respect to every bound parameter vector.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    per_binding: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, b: Binding) -> &[T] {
        &self.per_binding[b.0]
    }

    /// Adds these gradients into `pv.grads`.
    pub fn accumulate_into(&self, b: Binding, pv: &mut ParamVector<T>) -> Result<()> {
        let g = &self.per_binding[b.0];
        if g.len() != pv.len() {
            return Err(Error::Layout(format!(
                "binding has {} values, target has {}",
                g.len(),
                pv.len()
            )));
        }
        for (dst, &src) in pv.grads_mut().iter_mut().zip(g) {
            *dst += src;
        }
        Ok(())
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    sigmoid(x)
}

pub(crate) fn softplus_scalar<T: Scalar>(x: T) -> T {
    softplus(x)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            seg_cache: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn val(&self, i: usize) -> &Tensor<T> {
        &self.nodes[i].value
    }

    /// Registers a snapshot of `pv`'s values; segments are read through [`Graph::param`].
    pub fn bind(&mut self, pv: &ParamVector<T>) -> Binding {
        self.bindings.push(BoundParams {
            layout: pv.layout().clone(),
            values: pv.values().to_vec(),
        });
        Binding(self.bindings.len() - 1)
    }

    pub fn param(&mut self, b: Binding, name: &str) -> Result<Var> {
        if let Some(&v) = self.seg_cache.get(&(b.0, name.to_string())) {
            return Ok(v);
        }
        let bound = &self.bindings[b.0];
        let seg = bound.layout.get(name)?.clone();
        let value = Tensor::new(seg.shape.clone(), bound.values[seg.range()].to_vec())?;
        let v = self.push(
            value,
            Op::Param {
                binding: b.0,
                offset: seg.offset,
            },
            "param",
        )?;
        self.seg_cache.insert((b.0, name.to_string()), v);
        Ok(v)
    }

    /// Constant input; gradients stop here.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var> {
        self.push(t, Op::Leaf, "input")
    }

    pub fn constant(&mut self, v: T) -> Result<Var> {
        self.input(Tensor::scalar(v))
    }

    /// Copies `v`'s value into a new leaf, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let t = self.value(v).clone();
        self.input(t)
    }

    fn same_shape(&self, op: &'static str, a: usize, b: usize) -> Result<()> {
        if self.val(a).shape() != self.val(b).shape() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).shape(), self.val(b).shape()),
            ));
        }
        Ok(())
    }

    /// `x·Wᵀ + b` for `x` of shape `[n]` or `[rows, n]`, `W` of shape `[m, n]`, `b` of shape `[m]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xt, wt, bt) = (self.val(x.0), self.val(w.0), self.val(b.0));
        if wt.rank() != 2 || xt.rank() == 0 || xt.rank() > 2 {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, W {:?}", xt.shape(), wt.shape()),
            ));
        }
        let (m, n) = (wt.shape()[0], wt.shape()[1]);
        if xt.last_dim() != n || bt.len() != m || bt.rank() != 1 {
            return Err(Error::shape(
                "affine",
                format!("x {:?}, W {:?}, b {:?}", xt.shape(), wt.shape(), bt.shape()),
            ));
        }
        let rows = xt.rows();
        let (xd, wd, bd) = (xt.data(), wt.data(), bt.data());
        let mut out = Vec::with_capacity(rows * m);
        for r in 0..rows {
            let xr = &xd[r * n..(r + 1) * n];
            for i in 0..m {
                let wr = &wd[i * n..(i + 1) * n];
                out.push(bd[i] + dot(wr, xr));
            }
        }
        let shape = if xt.rank() == 1 { vec![m] } else { vec![rows, m] };
        self.push(
            Tensor::new(shape, out)?,
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
            },
            "affine",
        )
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (at, bt) = (self.val(a.0), self.val(b.0));
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(at.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a.0, b.0)?;
        let t = self.zip_with(a, b, |x, y| x + y);
        self.push(t, Op::Add(a.0, b.0), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a.0, b.0)?;
        let t = self.zip_with(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a.0, b.0), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a.0, b.0)?;
        let t = self.zip_with(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a.0, b.0), "mul")
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a.0, b.0)?;
        let t = self.zip_with(a, b, |x, y| x.min(y));
        self.push(t, Op::Minimum(a.0, b.0), "minimum")
    }

    /// `scale·x + shift`, elementwise.
    pub fn scale_shift(&mut self, x: Var, scale: T, shift: T) -> Result<Var> {
        let t = self.val(x.0).map(|v| scale * v + shift);
        self.push(t, Op::ScaleShift { x: x.0, scale }, "scale_shift")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        self.scale_shift(x, s, T::zero())
    }

    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        self.scale_shift(x, -T::one(), T::one())
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0).map(sigmoid);
        self.push(t, Op::Sigmoid(x.0), "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0).map(|v| v.tanh());
        self.push(t, Op::Tanh(x.0), "tanh")
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0).map(softplus);
        self.push(t, Op::Softplus(x.0), "softplus")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0).map(|v| v.exp());
        self.push(t, Op::Exp(x.0), "exp")
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0).map(|v| v.ln());
        self.push(t, Op::Ln(x.0), "ln")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let t = self.val(x.0).map(|v| v * v);
        self.push(t, Op::Square(x.0), "square")
    }

    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xt = self.val(x.0);
        if xt.is_empty() || xt.rank() == 0 {
            return Err(Error::Empty("softmax input"));
        }
        let c = xt.last_dim();
        let mut out = Vec::with_capacity(xt.len());
        for r in 0..xt.rows() {
            let row = xt.row(r);
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut z = T::zero();
            for &v in row {
                let e = (v - mx).exp();
                z += e;
                out.push(e);
            }
            for v in &mut out[start..start + c] {
                *v = *v / z;
            }
        }
        let t = Tensor::new(xt.shape().to_vec(), out)?;
        self.push(t, Op::Softmax(x.0), "softmax")
    }

    /// Concatenation along the last dimension; all inputs share leading dims.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Empty("concat inputs"));
        }
        let first = self.val(parts[0].0);
        let rank = first.rank().max(1);
        let rows = first.rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let t = self.val(p.0);
            if t.rank().max(1) != rank || t.rows() != rows {
                return Err(Error::shape(
                    "concat",
                    format!("{:?} vs {:?}", first.shape(), t.shape()),
                ));
            }
            widths.push(t.last_dim());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.val(p.0).row(r));
            }
        }
        let shape = if rank == 1 { vec![total] } else { vec![rows, total] };
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::Concat(parts.iter().map(|v| v.0).collect()), "concat")
    }

    /// Columns `start..start+len` of the last dimension.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xt = self.val(x.0);
        let c = xt.last_dim();
        if start + len > c || xt.rank() == 0 {
            return Err(Error::shape(
                "slice_last",
                format!("{start}+{len} outside width {c}"),
            ));
        }
        let mut out = Vec::with_capacity(xt.rows() * len);
        for r in 0..xt.rows() {
            out.extend_from_slice(&xt.row(r)[start..start + len]);
        }
        let shape = if xt.rank() == 1 {
            vec![len]
        } else {
            vec![xt.rows(), len]
        };
        let t = Tensor::new(shape, out)?;
        self.push(t, Op::SliceLast { x: x.0, start }, "slice_last")
    }

    /// Row lookup into an embedding table `[N, E]`. A single index yields `[E]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tt = self.val(table.0);
        if tt.rank() != 2 {
            return Err(Error::shape("gather_rows", format!("table {:?}", tt.shape())));
        }
        let (n, e) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(idx.len() * e);
        for &i in idx {
            if i >= n {
                return Err(Error::invalid(format!("embedding index {i} outside table of {n}")));
            }
            out.extend_from_slice(tt.row(i));
        }
        let shape = if idx.len() == 1 { vec![e] } else { vec![idx.len(), e] };
        let t = Tensor::new(shape, out)?;
        self.push(
            t,
            Op::Gather {
                table: table.0,
                idx: idx.to_vec(),
            },
            "gather_rows",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: T = self.val(x.0).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x.0), "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xt = self.val(x.0);
        if xt.is_empty() {
            return Err(Error::Empty("mean input"));
        }
        let s: T = xt.data().iter().copied().sum::<T>() / T::lit(xt.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(x.0), "mean")
    }

    /// Sum over the last dimension: `[rows, c] → [rows]`, `[c] → []`.
    pub fn sum_last(&mut self, x: Var) -> Result<Var> {
        let xt = self.val(x.0);
        let sums: Vec<T> = (0..xt.rows()).map(|r| xt.row(r).iter().copied().sum()).collect();
        let t = if xt.rank() <= 1 {
            Tensor::scalar(sums[0])
        } else {
            Tensor::vector(sums)
        };
        self.push(t, Op::SumLast(x.0), "sum_last")
    }

    /// Mean of squared elementwise differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a.0, b.0)?;
        let (at, bt) = (self.val(a.0), self.val(b.0));
        if at.is_empty() {
            return Err(Error::Empty("mse input"));
        }
        let s: T = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let v = s / T::lit(at.len() as f64);
        self.push(Tensor::scalar(v), Op::Mse(a.0, b.0), "mse")
    }

    /// `½ Σ (μ² + σ² − ln σ² − 1)` over every element.
    pub fn kl_gauss(&mut self, mu: Var, sigma: Var) -> Result<Var> {
        self.same_shape("kl_gauss", mu.0, sigma.0)?;
        let (mt, st) = (self.val(mu.0), self.val(sigma.0));
        if st.data().iter().any(|&s| s <= T::zero()) {
            return Err(Error::invalid("kl_gauss requires sigma > 0"));
        }
        let s: T = mt
            .data()
            .iter()
            .zip(st.data())
            .map(|(&m, &s)| m * m + s * s - (s * s).ln() - T::one())
            .sum();
        self.push(
            Tensor::scalar(s * T::half()),
            Op::KlGauss {
                mu: mu.0,
                sigma: sigma.0,
            },
            "kl_gauss",
        )
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.val(loss.0).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss has shape {:?}", self.val(loss.0).shape()),
            ));
        }
        let mut per_binding: Vec<Vec<T>> = self
            .bindings
            .iter()
            .map(|b| vec![T::zero(); b.values.len()])
            .collect();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        fn acc<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
            slot.get_or_insert_with(|| vec![T::zero(); len])
        }

        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {}
                Op::Param { binding, offset } => {
                    let dst = &mut per_binding[*binding][*offset..*offset + gy.len()];
                    for (d, &g) in dst.iter_mut().zip(&gy) {
                        *d += g;
                    }
                }
                Op::Affine { x, w, b } => {
                    let (xt, wt) = (self.val(*x), self.val(*w));
                    let (m, n) = (wt.shape()[0], wt.shape()[1]);
                    let rows = xt.rows();
                    let (xd, wd) = (xt.data(), wt.data());
                    if !matches!(self.nodes[*x].op, Op::Leaf) {
                        let gx = acc(&mut grads[*x], xt.len());
                        for r in 0..rows {
                            for i2 in 0..m {
                                let g = gy[r * m + i2];
                                if g == T::zero() {
                                    continue;
                                }
                                let wr = &wd[i2 * n..(i2 + 1) * n];
                                let gxr = &mut gx[r * n..(r + 1) * n];
                                for j in 0..n {
                                    gxr[j] += wr[j] * g;
                                }
                            }
                        }
                    }
                    {
                        let gw = acc(&mut grads[*w], wt.len());
                        for r in 0..rows {
                            let xr = &xd[r * n..(r + 1) * n];
                            for i2 in 0..m {
                                let g = gy[r * m + i2];
                                if g == T::zero() {
                                    continue;
                                }
                                let gwr = &mut gw[i2 * n..(i2 + 1) * n];
                                for j in 0..n {
                                    gwr[j] += g * xr[j];
                                }
                            }
                        }
                    }
                    let gb = acc(&mut grads[*b], m);
                    for r in 0..rows {
                        for i2 in 0..m {
                            gb[i2] += gy[r * m + i2];
                        }
                    }
                }
                Op::Add(a, b) => {
                    for (src, sign) in [(*a, T::one()), (*b, T::one())] {
                        let g = acc(&mut grads[src], gy.len());
                        for (d, &v) in g.iter_mut().zip(&gy) {
                            *d += sign * v;
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (src, sign) in [(*a, T::one()), (*b, -T::one())] {
                        let g = acc(&mut grads[src], gy.len());
                        for (d, &v) in g.iter_mut().zip(&gy) {
                            *d += sign * v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                    {
                        let g = acc(&mut grads[*a], gy.len());
                        for k in 0..gy.len() {
                            g[k] += gy[k] * bd[k];
                        }
                    }
                    let g = acc(&mut grads[*b], gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] * ad[k];
                    }
                }
                Op::Minimum(a, b) => {
                    let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                    let pick_a: Vec<bool> = ad.iter().zip(bd).map(|(x, y)| x <= y).collect();
                    {
                        let g = acc(&mut grads[*a], gy.len());
                        for k in 0..gy.len() {
                            if pick_a[k] {
                                g[k] += gy[k];
                            }
                        }
                    }
                    let g = acc(&mut grads[*b], gy.len());
                    for k in 0..gy.len() {
                        if !pick_a[k] {
                            g[k] += gy[k];
                        }
                    }
                }
                Op::ScaleShift { x, scale } => {
                    let g = acc(&mut grads[*x], gy.len());
                    for k in 0..gy.len() {
                        g[k] += *scale * gy[k];
                    }
                }
                Op::Sigmoid(x) => {
                    let g = acc(&mut grads[*x], gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] * y[k] * (T::one() - y[k]);
                    }
                }
                Op::Tanh(x) => {
                    let g = acc(&mut grads[*x], gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] * (T::one() - y[k] * y[k]);
                    }
                }
                Op::Softplus(x) => {
                    let xd = self.val(*x).data();
                    let g = acc(&mut grads[*x], gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] * sigmoid(xd[k]);
                    }
                }
                Op::Exp(x) => {
                    let g = acc(&mut grads[*x], gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] * y[k];
                    }
                }
                Op::Ln(x) => {
                    let xd = self.val(*x).data();
                    let g = acc(&mut grads[*x], gy.len());
                    for k in 0..gy.len() {
                        g[k] += gy[k] / xd[k];
                    }
                }
                Op::Square(x) => {
                    let xd = self.val(*x).data();
                    let g = acc(&mut grads[*x], gy.len());
                    for k in 0..gy.len() {
                        g[k] += T::two() * xd[k] * gy[k];
                    }
                }
                Op::Softmax(x) => {
                    let c = node.value.last_dim();
                    let g = acc(&mut grads[*x], gy.len());
                    for r in 0..node.value.rows() {
                        let ys = &y[r * c..(r + 1) * c];
                        let gs = &gy[r * c..(r + 1) * c];
                        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
                        for k in 0..c {
                            g[r * c + k] += ys[k] * (gs[k] - dot);
                        }
                    }
                }
                Op::Concat(parts) => {
                    let rows = node.value.rows();
                    let total = node.value.last_dim();
                    let mut col = 0;
                    for &p in parts {
                        let pt = self.val(p);
                        let w = pt.last_dim();
                        let g = acc(&mut grads[p], pt.len());
                        for r in 0..rows {
                            for k in 0..w {
                                g[r * w + k] += gy[r * total + col + k];
                            }
                        }
                        col += w;
                    }
                }
                Op::SliceLast { x, start } => {
                    let xt = self.val(*x);
                    let c = xt.last_dim();
                    let w = node.value.last_dim();
                    let g = acc(&mut grads[*x], xt.len());
                    for r in 0..xt.rows() {
                        for k in 0..w {
                            g[r * c + start + k] += gy[r * w + k];
                        }
                    }
                }
                Op::Gather { table, idx } => {
                    let tt = self.val(*table);
                    let e = tt.shape()[1];
                    let g = acc(&mut grads[*table], tt.len());
                    for (r, &row) in idx.iter().enumerate() {
                        for k in 0..e {
                            g[row * e + k] += gy[r * e + k];
                        }
                    }
                }
                Op::SumAll(x) => {
                    let n = self.val(*x).len();
                    let g = acc(&mut grads[*x], n);
                    for d in g.iter_mut() {
                        *d += gy[0];
                    }
                }
                Op::MeanAll(x) => {
                    let n = self.val(*x).len();
                    let s = gy[0] / T::lit(n as f64);
                    let g = acc(&mut grads[*x], n);
                    for d in g.iter_mut() {
                        *d += s;
                    }
                }
                Op::SumLast(x) => {
                    let xt = self.val(*x);
                    let c = xt.last_dim();
                    let g = acc(&mut grads[*x], xt.len());
                    for r in 0..xt.rows() {
                        for k in 0..c {
                            g[r * c + k] += gy[r];
                        }
                    }
                }
                Op::Mse(a, b) => {
                    let (ad, bd) = (self.val(*a).data(), self.val(*b).data());
                    let s = T::two() * gy[0] / T::lit(ad.len() as f64);
                    let diff: Vec<T> = ad.iter().zip(bd).map(|(&x, &y)| s * (x - y)).collect();
                    {
                        let g = acc(&mut grads[*a], diff.len());
                        for k in 0..diff.len() {
                            g[k] += diff[k];
                        }
                    }
                    let g = acc(&mut grads[*b], diff.len());
                    for k in 0..diff.len() {
                        g[k] -= diff[k];
                    }
                }
                Op::KlGauss { mu, sigma } => {
                    let (md, sd) = (self.val(*mu).data(), self.val(*sigma).data());
                    {
                        let g = acc(&mut grads[*mu], md.len());
                        for k in 0..md.len() {
                            g[k] += gy[0] * md[k];
                        }
                    }
                    let g = acc(&mut grads[*sigma], sd.len());
                    for k in 0..sd.len() {
                        g[k] += gy[0] * (sd[k] - T::one() / sd[k]);
                    }
                }
            }
        }
        Ok(Gradients { per_binding })
    }
}

/// Four independent partial sums so the reduction vectorizes.
fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut p = [T::zero(); 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for k in 0..4 {
            p[k] += x[k] * y[k];
        }
    }
    (p[0] + p[1]) + (p[2] + p[3]) + tail
}
