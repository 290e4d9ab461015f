use std::borrow::Cow;

use super::{matmul_raw, softmax_in_place, transpose_raw, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Relu,
    Exp,
    Log,
    Negate,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine {
        x: Var,
        scale: f64,
    },
    Unary(Unary, Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Embed {
        table: Var,
        ids: Vec<usize>,
    },
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ScatterCols {
        x: Var,
        index: Vec<usize>,
    },
    ClampMin {
        x: Var,
        floor: f64,
    },
    MaskedFill {
        x: Var,
        mask: Vec<bool>,
    },
    Reshape(Var),
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    requires_grad: bool,
    op: Op,
}

/// Append-only tape of operations.
///
/// Nodes are pushed in evaluation order, so every node's inputs precede it and a
/// single reverse sweep visits each node once. Operations whose inputs do not require
/// gradients are recorded as constants and carry no backward state.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    leaf_grads: Vec<Option<Vec<f64>>>,
    params: Option<&'p ParamStore>,
    trainable: bool,
    bound: Vec<Option<Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(slot: &mut Option<Vec<f64>>, contrib: &[f64]) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib.to_vec()),
    }
}

fn add_owned(slot: &mut Option<Vec<f64>>, contrib: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        None => *slot = Some(contrib),
    }
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: None,
            trainable: false,
            bound: Vec::new(),
        }
    }

    /// A graph that binds parameters from `store` by reference. When `trainable` is
    /// false the parameters are constants and no backward state is recorded.
    pub fn with_params(store: &'p ParamStore, trainable: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
            params: Some(store),
            trainable,
            bound: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            requires_grad,
            op,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Leaf that receives a gradient on [`Graph::backward`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, true, Op::Leaf)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, false, Op::Leaf)
    }

    /// Constant that borrows its value instead of copying it.
    pub fn constant_ref(&mut self, t: &'p Tensor) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            requires_grad: false,
            op: Op::Leaf,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Binds parameter `id`, reusing the same node on repeated calls.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let store = self.params.expect("graph was created without a parameter store");
        self.nodes.push(Node {
            value: Cow::Borrowed(store.get(id)),
            requires_grad: self.trainable,
            op: Op::Leaf,
        });
        self.leaf_grads.push(None);
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        v
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        self.leaf_grads[v.0]
            .as_ref()
            .map(|g| Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Gradients for every parameter of the bound store, indexed by [`ParamId`].
    /// Parameters never used in the forward pass, or not reached, get `None`.
    pub fn param_grads(&self) -> Vec<Option<Tensor>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| self.grad(v)))
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), rg, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<(Tensor, bool)> {
        let (ta, tb) = (self.value(a), self.value(b));
        let out = if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
            Tensor::from_parts(ta.shape().to_vec(), data)
        } else if tb.len() == 1 {
            let y = tb.item();
            Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|&x| f(x, y)).collect())
        } else if ta.len() == 1 {
            let x = ta.item();
            Tensor::from_parts(tb.shape().to_vec(), tb.data().iter().map(|&y| f(x, y)).collect())
        } else {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        };
        Ok((out, self.rg(a) || self.rg(b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, rg, Op::Mul(a, b)))
    }

    /// `scale · x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| scale * v + shift).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, rg, Op::Affine { x, scale })
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Var {
        self.affine(x, scale, 0.0)
    }

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let t = self.value(x);
        if kind == Unary::Log {
            if let Some(bad) = t.data().iter().find(|v| **v <= 0.0) {
                return Err(Error::Domain {
                    op: "log",
                    detail: format!("non-positive input {bad}"),
                });
            }
        }
        let f: fn(f64) -> f64 = match kind {
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => f64::tanh,
            Unary::Relu => |v| v.max(0.0),
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Negate => |v| -v,
        };
        let out = Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect());
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Unary(kind, x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x).expect("tanh is total")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(Unary::Relu, x).expect("relu is total")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x).expect("exp is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Negate, x).expect("negate is total")
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.shape().len() {
            return Err(Error::Domain {
                op: "softmax",
                detail: format!("axis {axis} invalid for shape {:?}", t.shape()),
            });
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = t.data().to_vec();
        let mut buf = vec![0.0; len];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                for (j, b) in buf.iter_mut().enumerate() {
                    *b = data[base + j * inner];
                }
                softmax_in_place(&mut buf);
                for (j, b) in buf.iter().enumerate() {
                    data[base + j * inner] = *b;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(out, rg, Op::Softmax { x, outer, len, inner }))
    }

    /// Normalises each last-axis vector to zero mean and unit variance, then applies
    /// `gain ⊙ · + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let t = self.value(x);
        let d = t.cols();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape("layer_norm", t.shape(), self.value(gain).shape()));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = t.rows();
        let mut xhat = vec![0.0; t.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; t.len()];
        for r in 0..rows {
            let row = t.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = g[j] * xh + b[j];
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Domain {
            op: "concat",
            detail: "no parts".into(),
        })?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::Domain {
                op: "concat",
                detail: format!("axis {axis} invalid for shape {base:?}"),
            });
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&shape, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, range: std::ops::Range<usize>) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape();
        if axis >= shape.len() || range.start >= range.end || range.end > shape[axis] {
            return Err(Error::Domain {
                op: "slice",
                detail: format!("range {range:?} on axis {axis} of shape {shape:?}"),
            });
        }
        let (outer, len, inner) = axis_split(shape, axis);
        let n = range.end - range.start;
        let mut data = Vec::with_capacity(outer * n * inner);
        for o in 0..outer {
            let start = (o * len + range.start) * inner;
            data.extend_from_slice(&t.data()[start..start + n * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = n;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(out_shape, data),
            rg,
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
        ))
    }

    /// Gathers rows of a `[V×d]` table.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(Error::shape("embed", t.shape(), &[ids.len()]));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        if ids.is_empty() {
            return Err(Error::Domain {
                op: "embed",
                detail: "empty id list".into(),
            });
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Vocab { id, size: v });
            }
            data.extend_from_slice(t.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            rg,
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.shape().len() != 2 {
            return Err(Error::shape("transpose", t.shape(), &[]));
        }
        let (r, c) = (t.shape()[0], t.shape()[1]);
        let data = transpose_raw(t.data(), r, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::from_parts(vec![c, r], data), rg, Op::Transpose(x)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, rg, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Adds a `[n]` vector to every row of a `[m×n]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (t, r) = (self.value(x), self.value(row));
        if r.shape() != [t.cols()] {
            return Err(Error::shape("add_row", t.shape(), r.shape()));
        }
        let n = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + r.data()[i % n])
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(out, rg, Op::AddRow(x, row)))
    }

    /// Multiplies row `i` of `x[m×n]` by `s[i]`, where `s` has `m` elements.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (t, sv) = (self.value(x), self.value(s));
        if sv.len() != t.rows() {
            return Err(Error::shape("scale_rows", t.shape(), sv.shape()));
        }
        let n = t.cols();
        let data = t
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * sv.data()[i / n])
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(s);
        Ok(self.push(out, rg, Op::ScaleRows(x, s)))
    }

    /// Picks `x[i, idx[i]]` for every row, giving a `[m]` vector.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if idx.len() != t.rows() {
            return Err(Error::shape("gather", t.shape(), &[idx.len()]));
        }
        let mut data = Vec::with_capacity(idx.len());
        for (i, &j) in idx.iter().enumerate() {
            if j >= n {
                return Err(Error::Vocab { id: j, size: n });
            }
            data.push(t.data()[i * n + j]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(vec![idx.len()], data),
            rg,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Scatter-adds column `j` of `x[m×L]` into column `index[j]` of a `[m×width]` result.
    pub fn scatter_cols(&mut self, x: Var, index: &[usize], width: usize) -> Result<Var> {
        let t = self.value(x);
        let l = t.cols();
        if index.len() != l {
            return Err(Error::shape("scatter_cols", t.shape(), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= width) {
            return Err(Error::Vocab {
                id: bad,
                size: width,
            });
        }
        let m = t.rows();
        let mut data = vec![0.0; m * width];
        for r in 0..m {
            for (j, &dst) in index.iter().enumerate() {
                data[r * width + dst] += t.data()[r * l + j];
            }
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            rg,
            Op::ScatterCols {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v.max(floor)).collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        self.push(out, rg, Op::ClampMin { x, floor })
    }

    /// Replaces entries where `mask` is true with `value`; those entries get no gradient.
    pub fn masked_fill(&mut self, x: Var, mask: &[bool], value: f64) -> Result<Var> {
        let t = self.value(x);
        if mask.len() != t.len() {
            return Err(Error::shape("masked_fill", t.shape(), &[mask.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { value } else { v })
            .collect();
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(x);
        Ok(self.push(
            out,
            rg,
            Op::MaskedFill {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Domain {
                op: "backward",
                detail: format!("loss must be scalar, got shape {:?}", self.shape(loss)),
            });
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                add_owned(&mut self.leaf_grads[idx], g);
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &Tensor { &nodes[v.0].value };

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if needs(*a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    add_owned(&mut grads[a.0], matmul_raw(g, &bt, m, n, k));
                }
                if needs(*b) {
                    let at = transpose_raw(ta.data(), m, k);
                    add_owned(&mut grads[b.0], matmul_raw(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if !needs(v) {
                        continue;
                    }
                    if val(v).len() == g.len() {
                        add_owned(&mut grads[v.0], g.iter().map(|x| s * x).collect());
                    } else {
                        add_owned(&mut grads[v.0], vec![s * g.iter().sum::<f64>()]);
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !needs(v) {
                        continue;
                    }
                    let o = val(other);
                    let contrib: Vec<f64> = if o.len() == g.len() {
                        g.iter().zip(o.data()).map(|(x, y)| x * y).collect()
                    } else {
                        let y = o.item();
                        g.iter().map(|x| x * y).collect()
                    };
                    if val(v).len() == g.len() {
                        add_owned(&mut grads[v.0], contrib);
                    } else {
                        add_owned(&mut grads[v.0], vec![contrib.iter().sum()]);
                    }
                }
            }
            Op::Affine { x, scale } => {
                add_owned(&mut grads[x.0], g.iter().map(|v| v * scale).collect());
            }
            Op::Unary(kind, x) => {
                let xin = val(*x).data();
                let y = out.data();
                let contrib: Vec<f64> = match kind {
                    Unary::Sigmoid => g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect(),
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Relu => g
                        .iter()
                        .zip(xin)
                        .map(|(g, x)| if *x > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Log => g.iter().zip(xin).map(|(g, x)| g / x).collect(),
                    Unary::Negate => g.iter().map(|g| -g).collect(),
                };
                add_owned(&mut grads[x.0], contrib);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = out.data();
                let mut dx = vec![0.0; y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let base = o * len * inner + i;
                        let dot: f64 = (0..*len)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..*len {
                            let p = base + j * inner;
                            dx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = out.cols();
                let rows = out.rows();
                let gv = val(*gain).data();
                if needs(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xhat[r * d + j];
                        }
                        let inv_d = 1.0 / d as f64;
                        for j in 0..d {
                            let dxh = g[r * d + j] * gv[j];
                            dx[r * d + j] = inv_std[r]
                                * (dxh - inv_d * sum_dxh - xhat[r * d + j] * inv_d * sum_dxh_xh);
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
                if needs(*gain) {
                    let mut dg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    add_owned(&mut grads[gain.0], dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    add_owned(&mut grads[bias.0], db);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let plen = val(p).shape()[*axis];
                    if needs(p) {
                        let block = plen * inner;
                        let mut dp = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let start = o * total * inner + offset * inner;
                            dp.extend_from_slice(&g[start..start + block]);
                        }
                        add_owned(&mut grads[p.0], dp);
                    }
                    offset += plen;
                }
            }
            Op::Slice { x, axis, start } => {
                let src = val(*x);
                let (outer, len, inner) = axis_split(src.shape(), *axis);
                let n = out.shape()[*axis];
                let slot = &mut grads[x.0];
                let dst = slot.get_or_insert_with(|| vec![0.0; src.len()]);
                for o in 0..outer {
                    let s = (o * len + start) * inner;
                    for (d, v) in dst[s..s + n * inner]
                        .iter_mut()
                        .zip(&g[o * n * inner..(o + 1) * n * inner])
                    {
                        *d += v;
                    }
                }
            }
            Op::Embed { table, ids } => {
                let src = val(*table);
                let d = src.cols();
                let dst = grads[table.0].get_or_insert_with(|| vec![0.0; src.len()]);
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dst[id * d + j] += g[r * d + j];
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                add_owned(&mut grads[x.0], transpose_raw(g, r, c));
            }
            Op::Reshape(x) => add_into(&mut grads[x.0], g),
            Op::Sum(x) => {
                let n = val(*x).len();
                add_owned(&mut grads[x.0], vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                add_owned(&mut grads[x.0], vec![g[0] / n as f64; n]);
            }
            Op::AddRow(x, row) => {
                if needs(*x) {
                    add_into(&mut grads[x.0], g);
                }
                if needs(*row) {
                    let n = out.cols();
                    let mut dr = vec![0.0; n];
                    for (i, v) in g.iter().enumerate() {
                        dr[i % n] += v;
                    }
                    add_owned(&mut grads[row.0], dr);
                }
            }
            Op::ScaleRows(x, s) => {
                let n = out.cols();
                let sv = val(*s).data();
                if needs(*x) {
                    let dx = g.iter().enumerate().map(|(i, v)| v * sv[i / n]).collect();
                    add_owned(&mut grads[x.0], dx);
                }
                if needs(*s) {
                    let xv = val(*x).data();
                    let mut ds = vec![0.0; sv.len()];
                    for (i, v) in g.iter().enumerate() {
                        ds[i / n] += v * xv[i];
                    }
                    add_owned(&mut grads[s.0], ds);
                }
            }
            Op::Gather { x, idx } => {
                let src = val(*x);
                let n = src.cols();
                let dst = grads[x.0].get_or_insert_with(|| vec![0.0; src.len()]);
                for (i, &j) in idx.iter().enumerate() {
                    dst[i * n + j] += g[i];
                }
            }
            Op::ScatterCols { x, index } => {
                let src = val(*x);
                let l = src.cols();
                let width = out.cols();
                let mut dx = vec![0.0; src.len()];
                for r in 0..src.rows() {
                    for (j, &dstc) in index.iter().enumerate() {
                        dx[r * l + j] = g[r * width + dstc];
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::ClampMin { x, floor } => {
                let xv = val(*x).data();
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(g, v)| if v > floor { *g } else { 0.0 })
                    .collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::MaskedFill { x, mask } => {
                let dx = g
                    .iter()
                    .zip(mask)
                    .map(|(g, m)| if *m { 0.0 } else { *g })
                    .collect();
                add_owned(&mut grads[x.0], dx);
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    /// Central finite differences of `f` at `x`, one coordinate at a time.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Vec<f64> {
        let h = 1e-5;
        (0..x.len())
            .map(|i| {
                let mut plus = x.clone();
                plus.data_mut()[i] += h;
                let mut minus = x.clone();
                minus.data_mut()[i] -= h;
                (f(&plus) - f(&minus)) / (2.0 * h)
            })
            .collect()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    /// Checks d(build(x))/dx against finite differences, where `build` maps a leaf to a
    /// scalar loss on a fresh graph.
    fn check(x: &Tensor, build: &dyn Fn(&mut Graph, Var) -> Var) {
        let mut g = Graph::new();
        let v = g.leaf(x.clone());
        let loss = build(&mut g, v);
        g.backward(loss).unwrap();
        let analytic = g.grad(v).unwrap();
        let numeric = numeric_grad(x, &|xx| {
            let mut g = Graph::new();
            let v = g.constant(xx.clone());
            let l = build(&mut g, v);
            g.value(l).item()
        });
        for (a, n) in analytic.data().iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-4, "analytic {a} vs numeric {n}");
        }
    }

    fn weighted_sum(g: &mut Graph, y: Var) -> Var {
        // non-uniform weights so each output coordinate contributes differently
        let n = g.value(y).len();
        let shape = g.shape(y).to_vec();
        let w = Tensor::new(shape, (0..n).map(|i| 0.3 + 0.7 * (i as f64).sin()).collect()).unwrap();
        let w = g.constant(w);
        let p = g.mul(y, w).unwrap();
        g.sum(p)
    }

    fn sample() -> Tensor {
        t(&[vec![0.3, -1.2, 0.7], vec![1.5, 0.2, -0.4]])
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let i = g.constant(Tensor::identity(2));
        let m = g.constant(t(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let r = g.matmul(i, m).unwrap();
        assert_eq!(g.value(r).data(), &[1.0, 2.0, 3.0, 4.0]);

        let z = g.constant(t(&[vec![1.0, 0.0], vec![0.0, 0.0]]));
        let r = g.matmul(z, m).unwrap();
        assert_eq!(g.value(r).row(1), &[0.0, 0.0]);

        let c = g.constant(t(&[vec![5.0], vec![6.0]]));
        let r = g.matmul(m, c).unwrap();
        assert_eq!(g.value(r).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3] vs [2, 3]"), "{msg}");
    }

    #[test]
    fn elementwise_examples() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        assert_eq!(g.value(s).item(), 0.5);
        let m3 = g.constant(Tensor::scalar(-3.0));
        let r = g.relu(m3);
        assert_eq!(g.value(r).item(), 0.0);
        let h = g.constant(Tensor::scalar(0.5));
        let th = g.tanh(h);
        assert!((g.value(th).item() - 0.46211715726000974).abs() < 1e-15);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(Error::Domain { .. })));
    }

    #[test]
    fn add_rejects_mismatch_but_broadcasts_scalars() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(g.add(a, b).is_err());
        let s = g.constant(Tensor::scalar(2.0));
        let r = g.add(a, s).unwrap();
        assert_eq!(g.value(r).data(), &[2.0; 4]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 0.0, 0.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        for v in g.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::vector(vec![1000.0, 0.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 1.0).abs() < 1e-12);
        assert!(g.value(s).data()[1].abs() < 1e-12);

        let x = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, ev) in g.value(s).data().iter().zip(&e) {
            assert!((got - ev / z).abs() < 1e-12);
        }
        assert!((g.value(s).data()[0] - 0.09003).abs() < 1e-5);
        assert!((g.value(s).data()[2] - 0.66524).abs() < 1e-5);
    }

    #[test]
    fn softmax_along_first_axis() {
        let mut g = Graph::new();
        let x = g.constant(sample());
        let s = g.softmax(x, 0).unwrap();
        let v = g.value(s);
        for c in 0..3 {
            assert!((v.at(0, c) + v.at(1, c) - 1.0).abs() < 1e-12);
        }
        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::filled(&[3], 1.0));
        let zeros = g.constant(Tensor::zeros(&[3]));
        let c = g.constant(Tensor::filled(&[1, 3], 4.2));
        let y = g.layer_norm(c, ones, zeros, 1e-6).unwrap();
        assert!(g.value(y).data().iter().all(|v| v.abs() < 1e-9));

        let bias = g.constant(Tensor::vector(vec![0.5, -1.0, 2.0]).unwrap());
        let x = g.constant(sample());
        let y = g.layer_norm(x, zeros, bias, 1e-6).unwrap();
        assert_eq!(g.value(y).row(0), &[0.5, -1.0, 2.0]);
        assert_eq!(g.value(y).row(1), &[0.5, -1.0, 2.0]);

        let one2 = g.constant(Tensor::filled(&[2], 1.0));
        let zero2 = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::from_rows(&[vec![1.0, 3.0]]).unwrap());
        let y = g.layer_norm(x, one2, zero2, 0.0).unwrap();
        assert_eq!(g.value(y).data(), &[-1.0, 1.0]);

        assert!(g.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn concat_slice_embed_examples() {
        let mut g = Graph::new();
        let a = g.constant(sample());
        let b = g.constant(t(&[vec![9.0, 8.0, 7.0]]));
        let single = g.concat(&[a], 0).unwrap();
        assert_eq!(g.value(single), g.value(a));
        let ab = g.concat(&[a, b], 0).unwrap();
        let back = g.slice(ab, 0, 0..2).unwrap();
        assert_eq!(g.value(back), g.value(a));
        let cols = g.concat(&[a, a], 1).unwrap();
        assert_eq!(g.shape(cols), &[2, 6]);
        assert_eq!(g.value(cols).row(1), &[1.5, 0.2, -0.4, 1.5, 0.2, -0.4]);
        assert!(g.concat(&[a, b], 1).is_err());

        let table = g.constant(sample());
        assert!(matches!(
            g.embed(table, &[0, 2]),
            Err(Error::Vocab { id: 2, size: 2 })
        ));
    }

    #[test]
    fn embed_duplicate_id_accumulates_twice() {
        let table = sample();
        let mut g = Graph::new();
        let tv = g.leaf(table.clone());
        let e = g.embed(tv, &[1, 1, 0]).unwrap();
        let l = weighted_sum(&mut g, e);
        g.backward(l).unwrap();
        let grad = g.grad(tv).unwrap();
        let numeric = numeric_grad(&table, &|tt| {
            let mut g = Graph::new();
            let tv = g.constant(tt.clone());
            let e = g.embed(tv, &[1, 1, 0]).unwrap();
            let l = weighted_sum(&mut g, e);
            g.value(l).item()
        });
        for (a, n) in grad.data().iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-4);
        }
        // row 1 receives the weights of output rows 0 and 1
        let w = |i: usize| 0.3 + 0.7 * (i as f64).sin();
        assert!((grad.at(1, 0) - (w(0) + w(3))).abs() < 1e-12);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[4.0, 8.0]);

        let m = g.leaf(Tensor::zeros(&[2]));
        assert!(g.backward(m).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let x = sample();
        check(&x, &|g, v| {
            let w = g.constant(t(&[vec![0.5, -0.1], vec![0.2, 0.9], vec![-0.7, 0.4]]));
            let y = g.matmul(v, w).unwrap();
            weighted_sum(g, y)
        });
        for kind in [Unary::Sigmoid, Unary::Tanh, Unary::Relu, Unary::Exp, Unary::Negate] {
            check(&x, &|g, v| {
                let y = g.unary(kind, v).unwrap();
                weighted_sum(g, y)
            });
        }
        let pos = t(&[vec![0.3, 1.2, 0.7], vec![1.5, 0.2, 2.4]]);
        check(&pos, &|g, v| {
            let y = g.log(v).unwrap();
            weighted_sum(g, y)
        });
        check(&x, &|g, v| {
            let y = g.softmax(v, 1).unwrap();
            weighted_sum(g, y)
        });
        check(&x, &|g, v| {
            let y = g.softmax(v, 0).unwrap();
            weighted_sum(g, y)
        });
        check(&x, &|g, v| {
            let gain = g.constant(Tensor::vector(vec![1.1, 0.4, -0.8]).unwrap());
            let bias = g.constant(Tensor::vector(vec![0.1, 0.0, 0.3]).unwrap());
            let y = g.layer_norm(v, gain, bias, 1e-6).unwrap();
            weighted_sum(g, y)
        });
        check(&x, &|g, v| {
            let vt = g.transpose(v).unwrap();
            let a = g.slice(vt, 0, 1..3).unwrap();
            let b = g.reshape(a, &[2, 2]).unwrap();
            let c = g.concat(&[b, v], 1).unwrap();
            weighted_sum(g, c)
        });
        check(&x, &|g, v| {
            let r = g.slice(v, 0, 0..1).unwrap();
            let r = g.reshape(r, &[3]).unwrap();
            let y = g.add_row(v, r).unwrap();
            let s = g.slice(v, 1, 2..3).unwrap();
            let y = g.scale_rows(y, s).unwrap();
            let y = g.mul(y, v).unwrap();
            let y = g.sub(y, v).unwrap();
            let y = g.affine(y, 0.5, 2.0);
            weighted_sum(g, y)
        });
        check(&x, &|g, v| {
            let y = g.scatter_cols(v, &[2, 0, 2], 4).unwrap();
            let y = g.exp(y);
            let p = g.gather(y, &[2, 3]).unwrap();
            let m = g.mean(p);
            let filled = g.masked_fill(v, &[true, false, false, false, true, false], -5.0).unwrap();
            let s = weighted_sum(g, filled);
            g.add(m, s).unwrap()
        });
        check(&x, &|g, v| {
            let c = g.clamp_min(v, 0.25);
            let s = g.slice(v, 0, 1..2).unwrap();
            let s = g.slice(s, 1, 0..1).unwrap();
            let y = g.mul(c, s).unwrap();
            weighted_sum(g, y)
        });
    }

    #[test]
    fn constants_record_no_backward_state() {
        let mut g = Graph::new();
        let a = g.constant(sample());
        let b = g.sigmoid(a);
        assert!(!g.requires_grad(b));
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
    }
}
