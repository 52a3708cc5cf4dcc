//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every primitive appends one node holding its forward value. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and `backward` is a single reverse sweep.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamStore};
use crate::tensor::{matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Lower/upper clamp applied before taking the log of a probability.
pub const PROB_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Concat(Vec<Var>, usize),
    Slice { input: Var, axis: usize, start: usize },
    Embedding { table: Var, ids: Vec<usize>, pad: Option<usize> },
    Sigmoid(Var),
    Tanh(Var),
    Softplus(Var),
    Exp(Var),
    Ln(Var),
    LogProb(Var),
    Clamp { input: Var, lo: f64, hi: f64 },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    Gru(Box<GruNode>),
}

/// Inputs and saved activations of a fused recurrent sweep.
#[derive(Clone, Debug)]
struct GruNode {
    input: Var,
    h0: Var,
    wh: Var,
    reverse: bool,
    /// Per step: update, reset and candidate activations (`3h` each row).
    gates: Vec<f64>,
    /// Per step: `h_prev W_h` (`3h` each row).
    hh: Vec<f64>,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Concat(..) => "concat",
            Op::Slice { .. } => "slice",
            Op::Embedding { .. } => "embedding",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Softplus(..) => "softplus",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "log",
            Op::LogProb(..) => "log_prob",
            Op::Clamp { .. } => "clamp",
            Op::Softmax(..) => "softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::Gru(..) => "gru",
        }
    }
}

struct Node<'p> {
    value: Cow<'p, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// Parameters are borrowed from a [`ParamStore`]; only names accepted by the
/// trainable filter receive gradients; everything else behaves as a constant.
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
    store: Option<&'p ParamStore>,
    trainable: Box<dyn Fn(&str) -> bool + 'p>,
    params: HashMap<String, Var>,
    fault: Option<(usize, &'static str)>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A graph with no parameter store; build leaves with [`Graph::leaf`].
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
            store: None,
            trainable: Box::new(|_| false),
            params: HashMap::new(),
            fault: None,
        }
    }

    /// A graph whose parameters all receive gradients.
    pub fn with_store(store: &'p ParamStore) -> Self {
        Self::with_trainable(store, |_| true)
    }

    pub fn with_trainable(store: &'p ParamStore, trainable: impl Fn(&str) -> bool + 'p) -> Self {
        Self {
            store: Some(store),
            trainable: Box::new(trainable),
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).item()
    }

    fn shape2(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        (t.rows(), t.cols())
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'p, Tensor>, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some((self.nodes.len(), op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.rg(v));
        self.push(Cow::Owned(value), op, rg)
    }

    /// Constant input; never receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// Leaf that tracks gradients regardless of any store.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    /// Looks up a named parameter, registering it on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let store = self
            .store
            .ok_or_else(|| Error::contract("graph has no parameter store"))?;
        let t = store
            .get(name)
            .ok_or_else(|| Error::contract(format!("unknown parameter `{name}`")))?;
        let rg = (self.trainable)(name);
        let v = self.push(Cow::Borrowed(t), Op::Leaf, rg);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Registered parameter variables by name.
    pub fn params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    // ---------------------------------------------------------------------
    // primitives

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    fn broadcast_shape(&self, a: Var, b: Var, op: &str) -> Result<(usize, usize)> {
        let (ar, ac) = self.shape2(a);
        let (br, bc) = self.shape2(b);
        let dim = |x: usize, y: usize| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        };
        match (dim(ar, br), dim(ac, bc)) {
            (Some(r), Some(c)) => Ok((r, c)),
            _ => Err(Error::contract(format!(
                "{op}: cannot broadcast [{ar},{ac}] with [{br},{bc}]"
            ))),
        }
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.broadcast_shape(a, b, op.name())?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = if ta.shape2() == (r, c) && tb.shape2() == (r, c) {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let mut out = Vec::with_capacity(r * c);
            for i in 0..r {
                for j in 0..c {
                    out.push(f(bget(ta, i, j), bget(tb, i, j)));
                }
            }
            out
        };
        Ok(self.push_op(Tensor::from_parts(vec![r, c], data), op, &[a, b]))
    }

    /// Elementwise sum with 2-D broadcasting of unit dimensions.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v * k);
        self.push_op(out, Op::Scale(a, k), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|v| v + k);
        self.push_op(out, Op::AddScalar(a), &[a])
    }

    /// `k - a`
    pub fn rsub_scalar(&mut self, k: f64, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, k)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::contract("concat needs inputs and axis 0 or 1"));
        }
        let shapes: Vec<_> = parts.iter().map(|&v| self.shape2(v)).collect();
        let out = if axis == 0 {
            let c = shapes[0].1;
            if shapes.iter().any(|s| s.1 != c) {
                return Err(Error::contract(format!("concat rows: column mismatch {shapes:?}")));
            }
            let rows = shapes.iter().map(|s| s.0).sum();
            let mut data = Vec::with_capacity(rows * c);
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
            Tensor::from_parts(vec![rows, c], data)
        } else {
            let r = shapes[0].0;
            if shapes.iter().any(|s| s.0 != r) {
                return Err(Error::contract(format!("concat cols: row mismatch {shapes:?}")));
            }
            let cols: usize = shapes.iter().map(|s| s.1).sum();
            let mut data = Vec::with_capacity(r * cols);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::from_parts(vec![r, cols], data)
        };
        Ok(self.push_op(out, Op::Concat(parts.to_vec(), axis), parts))
    }

    /// Contiguous block of rows (`axis == 0`) or columns (`axis == 1`).
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape2(a);
        let t = self.value(a);
        let out = match axis {
            0 if start + len <= r && len > 0 => {
                Tensor::from_parts(vec![len, c], t.data()[start * c..(start + len) * c].to_vec())
            }
            1 if start + len <= c && len > 0 => {
                let mut data = Vec::with_capacity(r * len);
                for i in 0..r {
                    data.extend_from_slice(&t.row_slice(i)[start..start + len]);
                }
                Tensor::from_parts(vec![r, len], data)
            }
            _ => {
                return Err(Error::contract(format!(
                    "slice axis {axis} [{start}, {}) out of bounds for [{r},{c}]",
                    start + len
                )))
            }
        };
        Ok(self.push_op(out, Op::Slice { input: a, axis, start }, &[a]))
    }

    /// Row lookup; ids equal to `pad` produce a zero row and no gradient.
    pub fn embedding(&mut self, table: Var, ids: &[usize], pad: Option<usize>) -> Result<Var> {
        let (v, d) = self.shape2(table);
        if ids.is_empty() {
            return Err(Error::contract("embedding of an empty id sequence"));
        }
        let t = self.value(table);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::contract(format!("token id {id} >= vocab size {v}")));
            }
            if Some(id) == pad {
                data.extend(std::iter::repeat_n(0.0, d));
            } else {
                data.extend_from_slice(t.row_slice(id));
            }
        }
        let out = Tensor::from_parts(vec![ids.len(), d], data);
        Ok(self.push_op(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
                pad,
            },
            &[table],
        ))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push_op(out, Op::Sigmoid(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::tanh);
        self.push_op(out, Op::Tanh(a), &[a])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).map(softplus);
        self.push_op(out, Op::Softplus(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push_op(out, Op::Exp(a), &[a])
    }

    /// Natural log of a strictly positive quantity.
    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::ln);
        self.push_op(out, Op::Ln(a), &[a])
    }

    /// `log(clamp(p, PROB_EPS, 1 - PROB_EPS))`.
    pub fn log_prob(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|p| clamp_prob(p).ln());
        self.push_op(out, Op::LogProb(a), &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|v| v.clamp(lo, hi));
        self.push_op(out, Op::Clamp { input: a, lo, hi }, &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = t.row_slice(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let start = data.len();
            data.extend(row.iter().map(|v| (v - m).exp()));
            let z: f64 = data[start..].iter().sum();
            data[start..].iter_mut().for_each(|v| *v /= z);
        }
        self.push_op(Tensor::from_parts(vec![r, c], data), Op::Softmax(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sum over rows (`axis == 0`, giving `[1, c]`) or columns (`[r, 1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let out = match axis {
            0 => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    for (s, v) in acc.iter_mut().zip(t.row_slice(i)) {
                        *s += v;
                    }
                }
                Tensor::from_parts(vec![1, c], acc)
            }
            1 => Tensor::from_parts(vec![r, 1], (0..r).map(|i| t.row_slice(i).iter().sum()).collect()),
            _ => return Err(Error::contract("sum_axis: axis must be 0 or 1")),
        };
        Ok(self.push_op(out, Op::SumAxis(a, axis), &[a]))
    }

    /// Gated recurrent sweep over the rows of `input` (`[n, 3h]`, already
    /// projected, gate order update, reset, candidate) starting from `h0`
    /// (`[1, h]`) with recurrent weights `wh` (`[h, 3h]`):
    ///
    /// ```text
    /// z = sigmoid(x_z + (h W_h)_z)    r = sigmoid(x_r + (h W_h)_r)
    /// c = tanh(x_c + r * (h W_h)_c)   h' = c + z * (h - c)
    /// ```
    ///
    /// Row `t` of the `[n, h]` result is the state after reading position
    /// `t`; with `reverse` the rows are read from last to first.
    pub fn gru(&mut self, input: Var, h0: Var, wh: Var, reverse: bool) -> Result<Var> {
        let (n, three_h) = self.shape2(input);
        let (one, h) = self.shape2(h0);
        if one != 1 || three_h != 3 * h || self.shape2(wh) != (h, 3 * h) || n == 0 {
            return Err(Error::contract(format!(
                "gru: input {:?}, state {:?}, weights {:?}",
                self.value(input).shape(),
                self.value(h0).shape(),
                self.value(wh).shape()
            )));
        }
        let x = self.value(input).data();
        let w = self.value(wh).data();
        let mut states = vec![0.0; n * h];
        let mut gates = vec![0.0; n * 3 * h];
        let mut hh = vec![0.0; n * 3 * h];
        let mut prev = self.value(h0).data().to_vec();
        for step in 0..n {
            let t = if reverse { n - 1 - step } else { step };
            let hrow = &mut hh[t * 3 * h..(t + 1) * 3 * h];
            matmul_into(&prev, w, hrow, 1, h, 3 * h);
            let xrow = &x[t * 3 * h..(t + 1) * 3 * h];
            let grow = &mut gates[t * 3 * h..(t + 1) * 3 * h];
            for k in 0..h {
                let z = sigmoid(xrow[k] + hrow[k]);
                let r = sigmoid(xrow[h + k] + hrow[h + k]);
                let c = (xrow[2 * h + k] + r * hrow[2 * h + k]).tanh();
                grow[k] = z;
                grow[h + k] = r;
                grow[2 * h + k] = c;
                prev[k] = c + z * (prev[k] - c);
            }
            states[t * h..(t + 1) * h].copy_from_slice(&prev);
        }
        let node = GruNode {
            input,
            h0,
            wh,
            reverse,
            gates,
            hh,
        };
        Ok(self.push_op(Tensor::from_parts(vec![n, h], states), Op::Gru(Box::new(node)), &[input, h0, wh]))
    }

    // ---------------------------------------------------------------------
    // composites

    /// `x W + b` with `b` broadcast over rows.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }

    pub fn sum_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut it = parts.iter();
        let mut acc = *it
            .next()
            .ok_or_else(|| Error::contract("sum_all of nothing"))?;
        for &p in it {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    // ---------------------------------------------------------------------
    // reverse sweep

    /// Gradients of a scalar `loss` for every registered trainable parameter.
    pub fn backward(&self, loss: Var) -> Result<GradMap> {
        let grads = self.backward_all(loss)?;
        let mut out = GradMap::new();
        for (name, &v) in &self.params {
            if !self.rg(v) {
                continue;
            }
            let g = grads[v.0]
                .clone()
                .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
            out.insert(name.clone(), g);
        }
        Ok(out)
    }

    /// Gradient of `loss` with respect to an arbitrary node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let mut grads = self.backward_all(loss)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.value(wrt).shape())))
    }

    fn backward_all(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        if let Some((idx, op)) = self.fault {
            return Err(Error::numeric(op, format!("non-finite forward value at node {idx}")));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if !g.is_finite() {
                return Err(Error::numeric(node.op.name(), format!("non-finite gradient at node {idx}")));
            }
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds `g` (shaped like `v`) into the slot for `v`, lazily allocating.
    fn accumulate_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.rg(v) {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.value(v).shape()));
        f(slot.data_mut());
    }

    fn reduce_broadcast(&self, g: &Tensor, target: Var) -> Tensor {
        let t = self.value(target);
        let (tr, tc) = (t.rows(), t.cols());
        if (g.rows(), g.cols()) == (tr, tc) {
            return Tensor::from_parts(t.shape().to_vec(), g.data().to_vec());
        }
        let mut out = vec![0.0; tr * tc];
        for i in 0..g.rows() {
            for j in 0..g.cols() {
                out[(i % tr) * tc + (j % tc)] += g.get(i, j);
            }
        }
        Tensor::from_parts(t.shape().to_vec(), out)
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let out = &self.nodes[idx].value;
        match &self.nodes[idx].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (r, k, c) = (ta.rows(), ta.cols(), tb.cols());
                self.accumulate_with(grads, a, |ga| matmul_bt_into(g.data(), tb.data(), ga, r, c, k));
                self.accumulate_with(grads, b, |gb| matmul_at_into(ta.data(), g.data(), gb, r, k, c));
            }
            &Op::Add(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, self.reduce_broadcast(g, a));
                }
                if self.rg(b) {
                    self.accumulate(grads, b, self.reduce_broadcast(g, b));
                }
            }
            &Op::Sub(a, b) => {
                if self.rg(a) {
                    self.accumulate(grads, a, self.reduce_broadcast(g, a));
                }
                if self.rg(b) {
                    let neg = g.map(|v| -v);
                    self.accumulate(grads, b, self.reduce_broadcast(&neg, b));
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (self.value(a), self.value(b));
                let (r, c) = (g.rows(), g.cols());
                for (this, other) in [(a, tb), (b, ta)] {
                    if !self.rg(this) {
                        continue;
                    }
                    let mut full = Vec::with_capacity(r * c);
                    for i in 0..r {
                        for j in 0..c {
                            full.push(g.get(i, j) * bget(other, i, j));
                        }
                    }
                    let full = Tensor::from_parts(vec![r, c], full);
                    self.accumulate(grads, this, self.reduce_broadcast(&full, this));
                }
            }
            &Op::Scale(a, k) => self.accumulate(grads, a, g.map(|v| v * k)),
            &Op::AddScalar(a) => self.accumulate(grads, a, g.clone()),
            Op::Concat(parts, axis) => {
                let mut offset = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let (pr, pc) = (tp.rows(), tp.cols());
                    if *axis == 0 {
                        let block = &g.data()[offset * pc..(offset + pr) * pc];
                        self.accumulate_with(grads, p, |gp| add_into(gp, block));
                        offset += pr;
                    } else {
                        self.accumulate_with(grads, p, |gp| {
                            for i in 0..pr {
                                let src = &g.row_slice(i)[offset..offset + pc];
                                add_into(&mut gp[i * pc..(i + 1) * pc], src);
                            }
                        });
                        offset += pc;
                    }
                }
            }
            &Op::Slice { input, axis, start } => {
                let cols = self.value(input).cols();
                self.accumulate_with(grads, input, |gi| {
                    if axis == 0 {
                        add_into(&mut gi[start * cols..start * cols + g.len()], g.data());
                    } else {
                        let len = g.cols();
                        for i in 0..g.rows() {
                            add_into(&mut gi[i * cols + start..i * cols + start + len], g.row_slice(i));
                        }
                    }
                });
            }
            Op::Embedding { table, ids, pad } => {
                let d = self.value(*table).cols();
                self.accumulate_with(grads, *table, |gt| {
                    for (row, &id) in ids.iter().enumerate() {
                        if Some(id) != *pad {
                            add_into(&mut gt[id * d..(id + 1) * d], g.row_slice(row));
                        }
                    }
                });
            }
            &Op::Sigmoid(a) => self.unary(grads, a, out, g, |_, y| y * (1.0 - y)),
            &Op::Tanh(a) => self.unary(grads, a, out, g, |_, y| 1.0 - y * y),
            &Op::Softplus(a) => self.unary(grads, a, out, g, |x, _| sigmoid(x)),
            &Op::Exp(a) => self.unary(grads, a, out, g, |_, y| y),
            &Op::Ln(a) => self.unary(grads, a, out, g, |x, _| 1.0 / x),
            &Op::LogProb(a) => self.unary(grads, a, out, g, |p, _| {
                if (PROB_EPS..=1.0 - PROB_EPS).contains(&p) {
                    1.0 / p
                } else {
                    0.0
                }
            }),
            &Op::Clamp { input, lo, hi } => {
                self.unary(grads, input, out, g, |x, _| if (lo..=hi).contains(&x) { 1.0 } else { 0.0 })
            }
            &Op::Softmax(a) => {
                let (r, c) = (out.rows(), out.cols());
                self.accumulate_with(grads, a, |ga| {
                    for i in 0..r {
                        let y = out.row_slice(i);
                        let gy = g.row_slice(i);
                        let dot: f64 = y.iter().zip(gy).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += y[j] * (gy[j] - dot);
                        }
                    }
                });
            }
            &Op::Sum(a) => {
                let s = g.item();
                self.accumulate_with(grads, a, |ga| ga.iter_mut().for_each(|v| *v += s));
            }
            &Op::Mean(a) => {
                let s = g.item() / self.value(a).len() as f64;
                self.accumulate_with(grads, a, |ga| ga.iter_mut().for_each(|v| *v += s));
            }
            &Op::SumAxis(a, axis) => {
                let c = self.value(a).cols();
                self.accumulate_with(grads, a, |ga| {
                    for (k, v) in ga.iter_mut().enumerate() {
                        *v += if axis == 0 { g.data()[k % c] } else { g.data()[k / c] };
                    }
                });
            }
            Op::Gru(node) => self.gru_backward(node, out, g, grads),
        }
    }

    /// Backpropagation through time for [`Graph::gru`].
    fn gru_backward(&self, node: &GruNode, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let (n, h) = (out.rows(), out.cols());
        let w = self.value(node.wh).data();
        let h0 = self.value(node.h0).data();
        let mut dx = vec![0.0; n * 3 * h];
        let mut dw = vec![0.0; h * 3 * h];
        let mut carry = vec![0.0; h];
        let mut dhh = vec![0.0; 3 * h];
        for step in (0..n).rev() {
            let t = if node.reverse { n - 1 - step } else { step };
            let prev: &[f64] = if step == 0 {
                h0
            } else {
                let p = if node.reverse { t + 1 } else { t - 1 };
                out.row_slice(p)
            };
            let gates = &node.gates[t * 3 * h..(t + 1) * 3 * h];
            let hh = &node.hh[t * 3 * h..(t + 1) * 3 * h];
            let gout = g.row_slice(t);
            let dxrow = &mut dx[t * 3 * h..(t + 1) * 3 * h];
            for k in 0..h {
                let (z, r, c) = (gates[k], gates[h + k], gates[2 * h + k]);
                let dh = gout[k] + carry[k];
                let da_c = dh * (1.0 - z) * (1.0 - c * c);
                let da_z = dh * (prev[k] - c) * z * (1.0 - z);
                let da_r = da_c * hh[2 * h + k] * r * (1.0 - r);
                dxrow[k] = da_z;
                dxrow[h + k] = da_r;
                dxrow[2 * h + k] = da_c;
                dhh[k] = da_z;
                dhh[h + k] = da_r;
                dhh[2 * h + k] = da_c * r;
                carry[k] = dh * z;
            }
            for i in 0..h {
                let pi = prev[i];
                let wrow = &w[i * 3 * h..(i + 1) * 3 * h];
                let dwrow = &mut dw[i * 3 * h..(i + 1) * 3 * h];
                let mut acc = 0.0;
                for j in 0..3 * h {
                    dwrow[j] += pi * dhh[j];
                    acc += wrow[j] * dhh[j];
                }
                carry[i] += acc;
            }
        }
        self.accumulate_with(grads, node.input, |ga| add_into(ga, &dx));
        self.accumulate_with(grads, node.wh, |ga| add_into(ga, &dw));
        self.accumulate_with(grads, node.h0, |ga| add_into(ga, &carry));
    }

    /// Elementwise op whose local derivative depends on input `x` and output `y`.
    fn unary(&self, grads: &mut [Option<Tensor>], a: Var, y: &Tensor, g: &Tensor, d: impl Fn(f64, f64) -> f64) {
        let x = self.value(a).data();
        let y = y.data();
        self.accumulate_with(grads, a, |ga| {
            for (k, gv) in ga.iter_mut().enumerate() {
                *gv += g.data()[k] * d(x[k], y[k]);
            }
        });
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Broadcast read of a 2-D view.
fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
    let (r, c) = (t.rows(), t.cols());
    t.data()[(i % r) * c + (j % c)]
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

impl Tensor {
    pub(crate) fn shape2(&self) -> (usize, usize) {
        (self.rows(), self.cols())
    }
}
