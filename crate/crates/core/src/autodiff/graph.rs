//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order: the backward pass walks it once in reverse. A node
//! consumed by several others accumulates (sums) every contribution before
//! its own backward step runs.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use super::params::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::{dot, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Constant,
    Param,
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, F),
    Offset(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Concat(Vec<NodeId>),
    Slice(NodeId, usize),
    Dot(NodeId, NodeId),
    Sum(Vec<NodeId>),
    SumElems(NodeId),
    Softmax(NodeId),
    WeightedSum(NodeId, Vec<NodeId>),
    Max(NodeId, usize),
    Cosine(NodeId, NodeId),
    Dropout(NodeId, Vec<F>),
    Row(NodeId, usize),
}

impl<F> Op<F> {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Param => "param",
            Op::MatMul(..) => "matmul",
            Op::MatVec(..) => "matvec",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Relu(..) => "relu",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Dot(..) => "dot",
            Op::Sum(..) => "sum",
            Op::SumElems(..) => "sum_elems",
            Op::Softmax(..) => "softmax",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Max(..) => "max",
            Op::Cosine(..) => "cosine",
            Op::Dropout(..) => "dropout",
            Op::Row(..) => "row",
        }
    }
}

struct Node<F> {
    op: Op<F>,
    value: Arc<Tensor<F>>,
    requires_grad: bool,
}

/// A single forward computation. Build one per document (or per loss
/// evaluation), call [`Graph::backward`] once, then drop it.
pub struct Graph<F: Scalar> {
    nodes: Vec<Node<F>>,
    params: HashMap<ParamId, NodeId>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> F {
        self.nodes[id.0].value.item()
    }

    fn push(&mut self, op: Op<F>, value: Tensor<F>) -> Result<NodeId> {
        if !value.all_finite() {
            return Err(Error::NonFinite(format!("{} (node {})", op.name(), self.nodes.len())));
        }
        let requires_grad = match &op {
            Op::Constant => false,
            Op::Param => true,
            Op::MatMul(a, b)
            | Op::MatVec(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Dot(a, b)
            | Op::Cosine(a, b) => self.rg(*a) || self.rg(*b),
            Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Slice(a, _)
            | Op::SumElems(a)
            | Op::Softmax(a)
            | Op::Max(a, _)
            | Op::Dropout(a, _)
            | Op::Row(a, _) => self.rg(*a),
            Op::Concat(xs) | Op::Sum(xs) => xs.iter().any(|&x| self.rg(x)),
            Op::WeightedSum(w, xs) => self.rg(*w) || xs.iter().any(|&x| self.rg(x)),
        };
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op,
            value: Arc::new(value),
            requires_grad,
        });
        Ok(id)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: NodeId) -> &Tensor<F> {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.rg(id)
    }

    // ---- leaves ----------------------------------------------------------

    pub fn constant(&mut self, value: Tensor<F>) -> Result<NodeId> {
        self.push(Op::Constant, value)
    }

    pub fn scalar(&mut self, x: F) -> Result<NodeId> {
        self.constant(Tensor::scalar(x))
    }

    /// Node for a trainable parameter; repeated calls return the same node
    /// so gradients from every use land in one accumulator.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> NodeId {
        if let Some(&n) = self.params.get(&id) {
            return n;
        }
        let node = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Param,
            value: store.shared(id),
            requires_grad: true,
        });
        self.params.insert(id, node);
        node
    }

    // ---- linear algebra --------------------------------------------------

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        if av.rank() != 2 || bv.rank() != 2 || av.dims()[1] != bv.dims()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.dims(), bv.dims()),
            ));
        }
        let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
        let mut out = vec![F::zero(); m * n];
        let (ad, bd) = (av.data(), bv.data());
        for i in 0..m {
            for p in 0..k {
                let x = ad[i * k + p];
                if x == F::zero() {
                    continue;
                }
                let brow = &bd[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &y) in orow.iter_mut().zip(brow) {
                    *o = *o + x * y;
                }
            }
        }
        let t = Tensor::new(vec![m, n], out)?;
        self.push(Op::MatMul(a, b), t)
    }

    /// Matrix `[m x k]` times vector `[k]`.
    pub fn matvec(&mut self, w: NodeId, x: NodeId) -> Result<NodeId> {
        let (wv, xv) = (self.val(w), self.val(x));
        if wv.rank() != 2 || !xv.is_vector() || wv.dims()[1] != xv.len() {
            return Err(Error::shape(
                "matvec",
                format!("{:?} x {:?}", wv.dims(), xv.dims()),
            ));
        }
        let m = wv.dims()[0];
        let xd = xv.data();
        let out: Vec<F> = (0..m).map(|i| dot(wv.row(i), xd)).collect();
        self.push(Op::MatVec(w, x), Tensor::vector(out))
    }

    /// `w . x + b` for a weight matrix, input vector and bias vector.
    pub fn affine(&mut self, w: NodeId, x: NodeId, b: NodeId) -> Result<NodeId> {
        let y = self.matvec(w, x)?;
        self.add(y, b)
    }

    // ---- elementwise -----------------------------------------------------

    fn same_len(&self, op: &'static str, a: NodeId, b: NodeId) -> Result<()> {
        if self.val(a).len() != self.val(b).len() {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.val(a).dims(), self.val(b).dims()),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, op: Op<F>, a: NodeId, b: NodeId, f: impl Fn(F, F) -> F) -> Result<NodeId> {
        let (av, bv) = (self.val(a), self.val(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(av.dims().to_vec(), data)?;
        self.push(op, t)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("add", a, b)?;
        self.zip_with(Op::Add(a, b), a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("sub", a, b)?;
        self.zip_with(Op::Sub(a, b), a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("mul", a, b)?;
        self.zip_with(Op::Mul(a, b), a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let t = self.val(a).map(|x| x * c);
        self.push(Op::Scale(a, c), t)
    }

    /// Adds a constant to every element.
    pub fn offset(&mut self, a: NodeId, c: F) -> Result<NodeId> {
        let t = self.val(a).map(|x| x + c);
        self.push(Op::Offset(a), t)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.val(a).map(sigmoid);
        self.push(Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.val(a).map(|x| x.tanh());
        self.push(Op::Tanh(a), t)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.val(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(Op::Relu(a), t)
    }

    // ---- structural ------------------------------------------------------

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "empty part list"));
        }
        let mut data = Vec::new();
        for &p in parts {
            let v = self.val(p);
            if !v.is_vector() {
                return Err(Error::shape("concat", format!("part {:?} is not a vector", v.dims())));
            }
            data.extend_from_slice(v.data());
        }
        self.push(Op::Concat(parts.to_vec()), Tensor::vector(data))
    }

    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.val(a);
        if !v.is_vector() || len == 0 || start + len > v.len() {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) of {:?}", start + len, v.dims()),
            ));
        }
        let t = Tensor::vector(v.data()[start..start + len].to_vec());
        self.push(Op::Slice(a, start), t)
    }

    /// Row `idx` of a matrix node, as a vector.
    pub fn row(&mut self, table: NodeId, idx: usize) -> Result<NodeId> {
        let v = self.val(table);
        if v.rank() != 2 || idx >= v.rows() {
            return Err(Error::shape("row", format!("row {idx} of {:?}", v.dims())));
        }
        let t = Tensor::vector(v.row(idx).to_vec());
        self.push(Op::Row(table, idx), t)
    }

    // ---- reductions ------------------------------------------------------

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("dot", a, b)?;
        let d = dot(self.val(a).data(), self.val(b).data());
        self.push(Op::Dot(a, b), Tensor::scalar(d))
    }

    /// Elementwise sum of equally shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or_else(|| Error::shape("sum", "empty part list"))?;
        let mut acc = self.val(first).clone();
        for &p in &parts[1..] {
            let v = self.val(p);
            if v.len() != acc.len() {
                return Err(Error::shape("sum", format!("{:?} vs {:?}", acc.dims(), v.dims())));
            }
            acc.add_assign(v);
        }
        self.push(Op::Sum(parts.to_vec()), acc)
    }

    pub fn sum_elems(&mut self, a: NodeId) -> Result<NodeId> {
        let s = self.val(a).data().iter().fold(F::zero(), |acc, &x| acc + x);
        self.push(Op::SumElems(a), Tensor::scalar(s))
    }

    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a);
        if !v.is_vector() {
            return Err(Error::shape("softmax", format!("{:?}", v.dims())));
        }
        let t = Tensor::vector(softmax(v.data()));
        self.push(Op::Softmax(a), t)
    }

    /// `sum_i weights[i] * parts[i]`.
    pub fn weighted_sum(&mut self, weights: NodeId, parts: &[NodeId]) -> Result<NodeId> {
        let w = self.val(weights);
        if !w.is_vector() || w.len() != parts.len() || parts.is_empty() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} parts", w.len(), parts.len()),
            ));
        }
        let d = self.val(parts[0]).len();
        let mut out = vec![F::zero(); d];
        for (i, &p) in parts.iter().enumerate() {
            let pv = self.val(p);
            if pv.len() != d {
                return Err(Error::shape("weighted_sum", "parts differ in length"));
            }
            let wi = self.val(weights).data()[i];
            for (o, &x) in out.iter_mut().zip(pv.data()) {
                *o = *o + wi * x;
            }
        }
        self.push(Op::WeightedSum(weights, parts.to_vec()), Tensor::vector(out))
    }

    /// Largest element; ties resolve to the first index.
    pub fn max(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.val(a);
        let (mut best, mut arg) = (v.data()[0], 0);
        for (i, &x) in v.data().iter().enumerate().skip(1) {
            if x > best {
                best = x;
                arg = i;
            }
        }
        self.push(Op::Max(a, arg), Tensor::scalar(best))
    }

    /// Cosine similarity, defined as 0 when either input has zero norm.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_len("cosine", a, b)?;
        let c = crate::tensor::cosine_slices(self.val(a).data(), self.val(b).data());
        self.push(Op::Cosine(a, b), Tensor::scalar(c))
    }

    /// Inverted dropout. In evaluation mode (or with `keep_prob == 1`) the
    /// input node itself is returned.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        a: NodeId,
        keep_prob: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<NodeId> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "dropout keep probability {keep_prob} outside (0, 1]"
            )));
        }
        if !training || keep_prob == 1.0 {
            return Ok(a);
        }
        let scale = F::of(1.0 / keep_prob);
        let mask: Vec<F> = (0..self.val(a).len())
            .map(|_| if rng.gen::<f64>() < keep_prob { scale } else { F::zero() })
            .collect();
        let v = self.val(a);
        let data = v.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let t = Tensor::new(v.dims().to_vec(), data)?;
        self.push(Op::Dropout(a, mask), t)
    }

    // ---- backward --------------------------------------------------------

    /// Reverse pass from a one-element output node.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<F>> {
        if self.val(output).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("output must be scalar, got {:?}", self.val(output).dims()),
            ));
        }
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::new(self.val(output).dims().to_vec(), vec![F::one()])?);

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Constant | Op::Param => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {} (node {i})", node.op.name())));
            }
            self.backward_node(i, &g, &mut grads);
        }

        let mut params = HashMap::new();
        for (&pid, &nid) in &self.params {
            if let Some(g) = grads[nid.0].take() {
                if !g.all_finite() {
                    return Err(Error::NonFinite(format!("gradient of param {}", pid.0)));
                }
                params.insert(pid, g);
            }
        }
        Ok(Gradients { params })
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let gd = g.data();
        let node = &self.nodes[i];
        match &node.op {
            Op::Constant | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, k, n) = (av.dims()[0], av.dims()[1], bv.dims()[1]);
                if self.rg(*a) {
                    let bd = bv.data();
                    self.accumulate(grads, *a, |ga| {
                        for r in 0..m {
                            for p in 0..k {
                                let s = dot(&gd[r * n..(r + 1) * n], &bd[p * n..(p + 1) * n]);
                                ga[r * k + p] = ga[r * k + p] + s;
                            }
                        }
                    });
                }
                if self.rg(*b) {
                    let ad = av.data();
                    self.accumulate(grads, *b, |gb| {
                        for r in 0..m {
                            for p in 0..k {
                                let x = ad[r * k + p];
                                for c in 0..n {
                                    gb[p * n + c] = gb[p * n + c] + x * gd[r * n + c];
                                }
                            }
                        }
                    });
                }
            }
            Op::MatVec(w, x) => {
                let (wv, xv) = (self.val(*w), self.val(*x));
                let k = xv.len();
                if self.rg(*w) {
                    let xd = xv.data();
                    self.accumulate(grads, *w, |gw| {
                        for (r, &gr) in gd.iter().enumerate() {
                            if gr == F::zero() {
                                continue;
                            }
                            let row = &mut gw[r * k..(r + 1) * k];
                            for (o, &xj) in row.iter_mut().zip(xd) {
                                *o = *o + gr * xj;
                            }
                        }
                    });
                }
                if self.rg(*x) {
                    self.accumulate(grads, *x, |gx| {
                        for (r, &gr) in gd.iter().enumerate() {
                            if gr == F::zero() {
                                continue;
                            }
                            for (o, &wj) in gx.iter_mut().zip(wv.row(r)) {
                                *o = *o + gr * wj;
                            }
                        }
                    });
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, gd));
                self.accumulate(grads, *b, |gb| {
                    for (o, &x) in gb.iter_mut().zip(gd) {
                        *o = *o - x;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + gd[j] * bv[j];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] + gd[j] * av[j];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |ga| {
                    for (o, &x) in ga.iter_mut().zip(gd) {
                        *o = *o + c * x;
                    }
                });
            }
            Op::Offset(a) => self.accumulate(grads, *a, |ga| add_into(ga, gd)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + gd[j] * y[j] * (F::one() - y[j]);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + gd[j] * (F::one() - y[j] * y[j]);
                    }
                });
            }
            Op::Relu(a) => {
                let x = self.val(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        if x[j] > F::zero() {
                            ga[j] = ga[j] + gd[j];
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.val(p).len();
                    let seg = &gd[off..off + n];
                    self.accumulate(grads, p, |gp| add_into(gp, seg));
                    off += n;
                }
            }
            Op::Slice(a, start) => {
                let start = *start;
                self.accumulate(grads, *a, |ga| add_into(&mut ga[start..start + gd.len()], gd));
            }
            Op::Row(t, idx) => {
                let cols = gd.len();
                let idx = *idx;
                self.accumulate(grads, *t, |gt| add_into(&mut gt[idx * cols..(idx + 1) * cols], gd));
            }
            Op::Dot(a, b) => {
                let s = gd[0];
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + s * bv[j];
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] + s * av[j];
                    }
                });
            }
            Op::Sum(parts) => {
                for &p in parts {
                    self.accumulate(grads, p, |gp| add_into(gp, gd));
                }
            }
            Op::SumElems(a) => {
                let s = gd[0];
                self.accumulate(grads, *a, |ga| {
                    for o in ga.iter_mut() {
                        *o = *o + s;
                    }
                });
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let inner = dot(gd, y);
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + y[j] * (gd[j] - inner);
                    }
                });
            }
            Op::WeightedSum(w, parts) => {
                let wv = self.val(*w).data();
                if self.rg(*w) {
                    let contrib: Vec<F> = parts.iter().map(|&p| dot(gd, self.val(p).data())).collect();
                    self.accumulate(grads, *w, |gw| add_into(gw, &contrib));
                }
                for (k, &p) in parts.iter().enumerate() {
                    let wk = wv[k];
                    self.accumulate(grads, p, |gp| {
                        for (o, &x) in gp.iter_mut().zip(gd) {
                            *o = *o + wk * x;
                        }
                    });
                }
            }
            Op::Max(a, arg) => {
                let arg = *arg;
                self.accumulate(grads, *a, |ga| ga[arg] = ga[arg] + gd[0]);
            }
            Op::Cosine(a, b) => {
                let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                let na = dot(av, av).sqrt();
                let nb = dot(bv, bv).sqrt();
                if na == F::zero() || nb == F::zero() {
                    return;
                }
                let c = node.value.item();
                let s = gd[0];
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + s * (bv[j] / (na * nb) - c * av[j] / (na * na));
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for j in 0..gb.len() {
                        gb[j] = gb[j] + s * (av[j] / (na * nb) - c * bv[j] / (nb * nb));
                    }
                });
            }
            Op::Dropout(a, mask) => {
                self.accumulate(grads, *a, |ga| {
                    for j in 0..ga.len() {
                        ga[j] = ga[j] + gd[j] * mask[j];
                    }
                });
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], id: NodeId, f: impl FnOnce(&mut [F])) {
        if !self.rg(id) {
            return;
        }
        let slot = &mut grads[id.0];
        let g = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[id.0].value.dims()));
        f(g.data_mut());
    }
}

/// Parameter gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    params: HashMap<ParamId, Tensor<F>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.params.iter().map(|(&k, v)| (k, v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (o, &x) in dst.iter_mut().zip(src) {
        *o = *o + x;
    }
}

#[inline]
pub(crate) fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Max-subtracted softmax of a non-empty slice.
pub fn softmax<F: Scalar>(v: &[F]) -> Vec<F> {
    let m = v.iter().copied().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = v.iter().map(|&x| (x - m).exp()).collect();
    let z = exps.iter().fold(F::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / z).collect()
}
