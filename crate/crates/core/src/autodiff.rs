//! Minimal reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is assembled once through a [`GraphBuilder`] and is immutable
//! afterwards. Evaluation binds named input tensors; every input node is
//! treated as learnable and receives a gradient from [`Graph::backward`].
//! Constants are baked into the graph and never receive gradients.
//!
//! Piecewise operations follow the usual subgradient conventions:
//! `clip` passes gradient 1 to its argument inside `[lo, hi]` (inclusive)
//! and 0 outside, `max`/`min` route the whole gradient to the selected
//! argument, and ties select the first argument.

use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Named tensors bound to the input nodes of a graph.
pub type Bindings = BTreeMap<String, Tensor>;

/// Gradient of a scalar output with respect to each named input.
pub type Gradients = BTreeMap<String, Tensor>;

/// Dense row-major tensor. A scalar has an empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting zero-sized dimensions, a data length that
    /// disagrees with the shape, and non-finite entries.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&s| s == 0) {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!("zero-sized dimension in {shape:?}"),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch {
                op: "tensor",
                detail: format!(
                    "shape {shape:?} needs {expected} values, got {}",
                    data.len()
                ),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite tensor entry {} at index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    /// # Panics
    /// Panics if `value` is not finite.
    pub fn scalar(value: f64) -> Self {
        Self::new(vec![], vec![value]).expect("finite scalar")
    }

    /// # Panics
    /// Panics if `data` is empty or has non-finite entries.
    pub fn vector(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data).expect("valid vector")
    }

    /// # Panics
    /// Panics if `rows * cols != data.len()` or any entry is non-finite.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        Self::new(vec![rows, cols], data).expect("valid matrix")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![value; n]).expect("valid fill")
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    /// Applies `f` to every entry in place. The caller is responsible for
    /// keeping entries finite; evaluation re-checks bound inputs.
    pub fn map_inplace(&mut self, mut f: impl FnMut(usize, f64) -> f64) {
        for (i, v) in self.data.iter_mut().enumerate() {
            *v = f(i, *v);
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

/// Handle to a node inside a [`GraphBuilder`] / [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Square(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    MatMul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    SumRows(NodeId),
    SumGroups(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Reshape(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Clip { x: NodeId, lo: NodeId, hi: NodeId },
    Max(NodeId, NodeId),
    Min(NodeId, NodeId),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Square(_) => "square",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::MatMul(..) => "matmul",
            Op::AddRow(..) => "add_row",
            Op::SumRows(_) => "sum_rows",
            Op::SumGroups(..) => "sum_groups",
            Op::Gather(..) => "gather",
            Op::Reshape(_) => "reshape",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Clip { .. } => "clip",
            Op::Max(..) => "max",
            Op::Min(..) => "min",
        }
    }

    fn args(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) | Op::Const(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::AddRow(a, b)
            | Op::Max(a, b)
            | Op::Min(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Offset(a, _)
            | Op::Square(a)
            | Op::Tanh(a)
            | Op::Exp(a)
            | Op::SumRows(a)
            | Op::SumGroups(a, _)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![*a],
            Op::Clip { x, lo, hi } => vec![*x, *lo, *hi],
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    shape: Vec<usize>,
}

/// Incrementally assembles a [`Graph`].
///
/// Shape errors are recorded on the first offending call and surfaced by
/// [`GraphBuilder::finish`], so construction code can chain calls without
/// threading `Result` through every line.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    error: Option<Error>,
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn fail(&mut self, op: &'static str, detail: String) {
        if self.error.is_none() {
            self.error = Some(Error::ShapeMismatch { op, detail });
        }
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn numel(&self, id: NodeId) -> usize {
        self.nodes[id.0].shape.iter().product()
    }

    /// Declares a named input. Declaring the same name twice returns the
    /// existing node when the shapes agree.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            if self.nodes[id.0].shape != shape {
                let detail = format!(
                    "input `{name}` redeclared with shape {shape:?}, was {:?}",
                    self.nodes[id.0].shape
                );
                self.fail("input", detail);
            }
            return id;
        }
        let id = self.push(Op::Input(name.to_string()), shape.to_vec());
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape.clone();
        self.push(Op::Const(value), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::from_parts_unchecked(vec![], vec![value]))
    }

    fn same_shape(&mut self, op: &'static str, a: NodeId, b: NodeId) -> Vec<usize> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            self.fail(op, format!("{sa:?} vs {sb:?}"));
        }
        sa
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("add", a, b);
        self.push(Op::Add(a, b), s)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("sub", a, b);
        self.push(Op::Sub(a, b), s)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("mul", a, b);
        self.push(Op::Mul(a, b), s)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Scale(a, k), s)
    }

    pub fn offset(&mut self, a: NodeId, k: f64) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Offset(a, k), s)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Square(a), s)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Tanh(a), s)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let s = self.shape(a).to_vec();
        self.push(Op::Exp(a), s)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            self.fail("matmul", format!("{sa:?} x {sb:?}"));
            return self.push(Op::MatMul(a, b), vec![1, 1]);
        }
        self.push(Op::MatMul(a, b), vec![sa[0], sb[1]])
    }

    /// Adds a `[n]` row vector to every row of a `[m, n]` matrix.
    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let (sa, sr) = (self.shape(a).to_vec(), self.shape(row).to_vec());
        if sa.len() != 2 || sr.len() != 1 || sa[1] != sr[0] {
            self.fail("add_row", format!("{sa:?} + {sr:?}"));
        }
        self.push(Op::AddRow(a, row), sa)
    }

    /// `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, a: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 {
            self.fail("sum_rows", format!("expected a matrix, got {sa:?}"));
            return self.push(Op::SumRows(a), vec![1]);
        }
        self.push(Op::SumRows(a), vec![sa[0]])
    }

    /// Sums consecutive runs of `group` entries: `[m] -> [m / group]`.
    pub fn sum_groups(&mut self, a: NodeId, group: usize) -> NodeId {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 || group == 0 || sa[0] % group != 0 {
            self.fail("sum_groups", format!("{sa:?} in groups of {group}"));
            return self.push(Op::SumGroups(a, group.max(1)), vec![1]);
        }
        self.push(Op::SumGroups(a, group), vec![sa[0] / group])
    }

    /// Selects entries of a vector: `[n] -> [indices.len()]`.
    pub fn gather(&mut self, a: NodeId, indices: Vec<usize>) -> NodeId {
        let sa = self.shape(a).to_vec();
        if sa.len() != 1 || indices.is_empty() || indices.iter().any(|&i| i >= sa[0]) {
            self.fail("gather", format!("{} indices into {sa:?}", indices.len()));
            return self.push(Op::Gather(a, vec![]), vec![1]);
        }
        let n = indices.len();
        self.push(Op::Gather(a, indices), vec![n])
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> NodeId {
        if shape.iter().product::<usize>() != self.numel(a) || shape.contains(&0) {
            let detail = format!("{:?} -> {shape:?}", self.shape(a));
            self.fail("reshape", detail);
        }
        self.push(Op::Reshape(a), shape.to_vec())
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), vec![])
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), vec![])
    }

    /// Clamps `x` into `[lo, hi]`. Bounds either match the shape of `x` or
    /// are single-element and broadcast.
    pub fn clip(&mut self, x: NodeId, lo: NodeId, hi: NodeId) -> NodeId {
        let sx = self.shape(x).to_vec();
        for b in [lo, hi] {
            if self.numel(b) != 1 && self.shape(b) != sx.as_slice() {
                let detail = format!("bound {:?} vs value {sx:?}", self.shape(b));
                self.fail("clip", detail);
            }
        }
        self.push(Op::Clip { x, lo, hi }, sx)
    }

    /// Clamps into constant scalar bounds.
    pub fn clip_scalar(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let lo = self.scalar(lo);
        let hi = self.scalar(hi);
        self.clip(x, lo, hi)
    }

    /// Elementwise maximum; ties select `a`.
    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("max", a, b);
        self.push(Op::Max(a, b), s)
    }

    /// Elementwise minimum; ties select `a`.
    pub fn min(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let s = self.same_shape("min", a, b);
        self.push(Op::Min(a, b), s)
    }

    /// Freezes the graph with `output` as its result node.
    pub fn finish(self, output: NodeId) -> Result<Graph> {
        if let Some(e) = self.error {
            return Err(e);
        }
        let mut requires_grad = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            requires_grad[i] = match &node.op {
                Op::Input(_) => true,
                Op::Const(_) => false,
                op => op.args().iter().any(|a| requires_grad[a.0]),
            };
        }
        Ok(Graph {
            nodes: self.nodes,
            inputs: self.inputs,
            requires_grad,
            output,
        })
    }
}

/// Immutable computation graph. Nodes are stored in topological order.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, NodeId>,
    requires_grad: Vec<bool>,
    output: NodeId,
}

/// All node values from one forward pass.
pub struct Evaluation {
    values: Vec<Vec<f64>>,
    output: NodeId,
}

impl Evaluation {
    pub fn output(&self) -> &[f64] {
        &self.values[self.output.0]
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.values[id.0]
    }
}

fn bound(values: &[f64], i: usize) -> f64 {
    if values.len() == 1 {
        values[0]
    } else {
        values[i]
    }
}

impl Graph {
    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output.0].shape
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Names and shapes of all declared inputs.
    pub fn inputs(&self) -> impl Iterator<Item = (&str, &[usize])> {
        self.inputs
            .iter()
            .map(|(name, id)| (name.as_str(), self.nodes[id.0].shape.as_slice()))
    }

    /// Value of the output node.
    pub fn forward(&self, inputs: &Bindings) -> Result<Tensor> {
        let eval = self.evaluate(inputs)?;
        let shape = self.output_shape().to_vec();
        let mut values = eval.values;
        Ok(Tensor::from_parts_unchecked(
            shape,
            std::mem::take(&mut values[self.output.0]),
        ))
    }

    /// Runs a forward pass and keeps every intermediate value.
    pub fn evaluate(&self, inputs: &Bindings) -> Result<Evaluation> {
        let mut values: Vec<Vec<f64>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = self.compute(idx, node, &values, inputs)?;
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite {
                    op: node.op.name(),
                    node: idx,
                });
            }
            values.push(v);
        }
        Ok(Evaluation {
            values,
            output: self.output,
        })
    }

    fn compute(
        &self,
        idx: usize,
        node: &Node,
        values: &[Vec<f64>],
        inputs: &Bindings,
    ) -> Result<Vec<f64>> {
        let v = |id: &NodeId| values[id.0].as_slice();
        let out = match &node.op {
            Op::Input(name) => {
                let t = inputs
                    .get(name)
                    .ok_or_else(|| Error::UnboundInput(name.clone()))?;
                if t.shape != node.shape {
                    return Err(Error::ShapeMismatch {
                        op: "input",
                        detail: format!(
                            "`{name}` bound with shape {:?}, declared {:?}",
                            t.shape, node.shape
                        ),
                    });
                }
                t.data.clone()
            }
            Op::Const(t) => t.data.clone(),
            Op::Add(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x + y).collect(),
            Op::Sub(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x - y).collect(),
            Op::Mul(a, b) => v(a).iter().zip(v(b)).map(|(x, y)| x * y).collect(),
            Op::Scale(a, k) => v(a).iter().map(|x| x * k).collect(),
            Op::Offset(a, k) => v(a).iter().map(|x| x + k).collect(),
            Op::Square(a) => v(a).iter().map(|x| x * x).collect(),
            Op::Tanh(a) => v(a).iter().map(|x| x.tanh()).collect(),
            Op::Exp(a) => v(a).iter().map(|x| x.exp()).collect(),
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                matmul(v(a), v(b), m, k, n)
            }
            Op::AddRow(a, r) => {
                let n = self.nodes[r.0].shape[0];
                let row = v(r);
                v(a).iter()
                    .enumerate()
                    .map(|(i, x)| x + row[i % n])
                    .collect()
            }
            Op::SumRows(a) => {
                let n = self.nodes[a.0].shape[1];
                v(a).chunks(n).map(|c| c.iter().sum()).collect()
            }
            Op::SumGroups(a, g) => v(a).chunks(*g).map(|c| c.iter().sum()).collect(),
            Op::Gather(a, idxs) => {
                let src = v(a);
                idxs.iter().map(|&i| src[i]).collect()
            }
            Op::Reshape(a) => v(a).to_vec(),
            Op::Sum(a) => vec![v(a).iter().sum()],
            Op::Mean(a) => {
                let s = v(a);
                vec![s.iter().sum::<f64>() / s.len() as f64]
            }
            Op::Clip { x, lo, hi } => {
                let (xs, los, his) = (v(x), v(lo), v(hi));
                let mut out = Vec::with_capacity(xs.len());
                for (i, &xv) in xs.iter().enumerate() {
                    let (l, h) = (bound(los, i), bound(his, i));
                    if l > h {
                        return Err(Error::InvertedClip { lo: l, hi: h });
                    }
                    out.push(xv.clamp(l, h));
                }
                out
            }
            Op::Max(a, b) => v(a)
                .iter()
                .zip(v(b))
                .map(|(&x, &y)| if x >= y { x } else { y })
                .collect(),
            Op::Min(a, b) => v(a)
                .iter()
                .zip(v(b))
                .map(|(&x, &y)| if x <= y { x } else { y })
                .collect(),
        };
        debug_assert_eq!(
            out.len(),
            node.shape.iter().product::<usize>(),
            "node {idx}"
        );
        Ok(out)
    }

    /// Gradient of the scalar output with respect to every input, together
    /// with the output value.
    pub fn backward(&self, inputs: &Bindings) -> Result<(f64, Gradients)> {
        if self.output_shape().iter().product::<usize>() != 1 {
            return Err(Error::NonScalarOutput(self.output_shape().to_vec()));
        }
        let eval = self.evaluate(inputs)?;
        let value = eval.output()[0];
        Ok((value, self.backward_from(&eval)))
    }

    /// Reverse sweep over an existing evaluation.
    pub fn backward_from(&self, eval: &Evaluation) -> Gradients {
        let values = &eval.values;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[self.output.0] = Some(vec![1.0]);
        let rg = &self.requires_grad;

        for idx in (0..self.nodes.len()).rev() {
            if !rg[idx] {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
                if !rg[id.0] {
                    return;
                }
                let len = values[id.0].len();
                let slot = grads[id.0].get_or_insert_with(|| vec![0.0; len]);
                f(slot);
            };
            match &node.op {
                Op::Input(_) => {
                    grads[idx] = Some(g);
                }
                Op::Const(_) => {}
                Op::Add(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| add_into(s, &g));
                }
                Op::Sub(a, b) => {
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*b, &mut |s| s.iter_mut().zip(&g).for_each(|(x, y)| *x -= y));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&values[a.0], &values[b.0]);
                    acc(*a, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * vb[i];
                        }
                    });
                    acc(*b, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += g[i] * va[i];
                        }
                    });
                }
                Op::Scale(a, k) => acc(*a, &mut |s| {
                    s.iter_mut().zip(&g).for_each(|(x, y)| *x += k * y)
                }),
                Op::Offset(a, _) | Op::Reshape(a) => acc(*a, &mut |s| add_into(s, &g)),
                Op::Square(a) => {
                    let va = &values[a.0];
                    acc(*a, &mut |s| {
                        for i in 0..s.len() {
                            s[i] += 2.0 * va[i] * g[i];
                        }
                    });
                }
                Op::Tanh(_) | Op::Exp(_) => {
                    let out = &values[idx];
                    let a = node.op.args()[0];
                    let tanh = matches!(node.op, Op::Tanh(_));
                    acc(a, &mut |s| {
                        for i in 0..s.len() {
                            let d = if tanh { 1.0 - out[i] * out[i] } else { out[i] };
                            s[i] += d * g[i];
                        }
                    });
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    let (va, vb) = (&values[a.0], &values[b.0]);
                    // dA = G · Bᵀ
                    acc(*a, &mut |s| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let br = &vb[p * n..(p + 1) * n];
                                s[i * k + p] += dot(gi, br);
                            }
                        }
                    });
                    // dB = Aᵀ · G
                    acc(*b, &mut |s| {
                        for i in 0..m {
                            let gi = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let aip = va[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                let row = &mut s[p * n..(p + 1) * n];
                                row.iter_mut().zip(gi).for_each(|(x, y)| *x += aip * y);
                            }
                        }
                    });
                }
                Op::AddRow(a, r) => {
                    let n = self.nodes[r.0].shape[0];
                    acc(*a, &mut |s| add_into(s, &g));
                    acc(*r, &mut |s| {
                        for (i, gv) in g.iter().enumerate() {
                            s[i % n] += gv;
                        }
                    });
                }
                Op::SumRows(a) => {
                    let n = self.nodes[a.0].shape[1];
                    acc(*a, &mut |s| {
                        for (i, x) in s.iter_mut().enumerate() {
                            *x += g[i / n];
                        }
                    });
                }
                Op::SumGroups(a, gsz) => acc(*a, &mut |s| {
                    for (i, x) in s.iter_mut().enumerate() {
                        *x += g[i / gsz];
                    }
                }),
                Op::Gather(a, idxs) => acc(*a, &mut |s| {
                    for (j, &i) in idxs.iter().enumerate() {
                        s[i] += g[j];
                    }
                }),
                Op::Sum(a) => acc(*a, &mut |s| s.iter_mut().for_each(|x| *x += g[0])),
                Op::Mean(a) => acc(*a, &mut |s| {
                    let w = g[0] / s.len() as f64;
                    s.iter_mut().for_each(|x| *x += w);
                }),
                Op::Clip { x, lo, hi } => {
                    let (xs, los, his) = (&values[x.0], &values[lo.0], &values[hi.0]);
                    acc(*x, &mut |s| {
                        for i in 0..s.len() {
                            if xs[i] >= bound(los, i) && xs[i] <= bound(his, i) {
                                s[i] += g[i];
                            }
                        }
                    });
                    acc(*lo, &mut |s| {
                        for i in 0..xs.len() {
                            if xs[i] < bound(los, i) {
                                s[if s.len() == 1 { 0 } else { i }] += g[i];
                            }
                        }
                    });
                    acc(*hi, &mut |s| {
                        for i in 0..xs.len() {
                            if xs[i] > bound(his, i) {
                                s[if s.len() == 1 { 0 } else { i }] += g[i];
                            }
                        }
                    });
                }
                Op::Max(a, b) | Op::Min(a, b) => {
                    let is_max = matches!(node.op, Op::Max(..));
                    let (va, vb) = (&values[a.0], &values[b.0]);
                    let pick_a = |i: usize| {
                        if is_max {
                            va[i] >= vb[i]
                        } else {
                            va[i] <= vb[i]
                        }
                    };
                    acc(*a, &mut |s| {
                        for i in 0..s.len() {
                            if pick_a(i) {
                                s[i] += g[i];
                            }
                        }
                    });
                    acc(*b, &mut |s| {
                        for i in 0..s.len() {
                            if !pick_a(i) {
                                s[i] += g[i];
                            }
                        }
                    });
                }
            }
        }

        self.inputs
            .iter()
            .map(|(name, id)| {
                let shape = self.nodes[id.0].shape.clone();
                let n = shape.iter().product();
                let data = grads[id.0].take().unwrap_or_else(|| vec![0.0; n]);
                (name.clone(), Tensor::from_parts_unchecked(shape, data))
            })
            .collect()
    }

    /// Which side every piecewise node selected, elementwise. Two evaluations
    /// with equal signatures lie on the same smooth piece of the graph.
    pub fn branch_signature(&self, eval: &Evaluation) -> Vec<u8> {
        let values = &eval.values;
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Clip { x, lo, hi } => {
                    let (xs, los, his) = (&values[x.0], &values[lo.0], &values[hi.0]);
                    sig.extend((0..xs.len()).map(|i| {
                        if xs[i] < bound(los, i) {
                            1
                        } else if xs[i] > bound(his, i) {
                            2
                        } else {
                            0
                        }
                    }));
                }
                Op::Max(a, b) => sig.extend(
                    values[a.0]
                        .iter()
                        .zip(&values[b.0])
                        .map(|(x, y)| u8::from(x < y)),
                ),
                Op::Min(a, b) => sig.extend(
                    values[a.0]
                        .iter()
                        .zip(&values[b.0])
                        .map(|(x, y)| u8::from(x > y)),
                ),
                _ => {}
            }
        }
        sig
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(x, y)| *x += y);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(br).for_each(|(x, y)| *x += aip * y);
        }
    }
    out
}

/// Outcome of [`finite_difference_check`].
#[derive(Clone, Debug, Default)]
pub struct FdReport {
    /// Largest `|central − analytic| / max(1, |analytic|)` over checked
    /// coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates compared.
    pub checked: usize,
    /// Coordinates where a `±h` step crosses a clip/max/min switch. These
    /// sit on a kink, so they are reported but excluded from the error.
    pub boundary: Vec<(String, usize)>,
}

/// Compares [`Graph::backward`] against central differences with step `h`
/// for every coordinate of every input.
pub fn finite_difference_check(graph: &Graph, at: &Bindings, h: f64) -> Result<FdReport> {
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step h must be positive, got {h}"
        )));
    }
    let base = graph.evaluate(at)?;
    let base_sig = graph.branch_signature(&base);
    let (_, analytic) = graph.backward(at)?;

    let mut report = FdReport::default();
    let mut probe = at.clone();
    for (name, grad) in &analytic {
        for i in 0..grad.len() {
            let orig = probe[name].data[i];
            let mut side = |delta: f64| -> Result<(f64, Vec<u8>)> {
                probe.get_mut(name).expect("bound").data[i] = orig + delta;
                let e = graph.evaluate(&probe)?;
                Ok((e.output()[0], graph.branch_signature(&e)))
            };
            let (fp, sp) = side(h)?;
            let (fm, sm) = side(-h)?;
            probe.get_mut(name).expect("bound").data[i] = orig;

            if sp != base_sig || sm != base_sig {
                report.boundary.push((name.clone(), i));
                continue;
            }
            let numeric = (fp - fm) / (2.0 * h);
            let g = grad.data[i];
            let err = (numeric - g).abs() / g.abs().max(1.0);
            report.max_rel_error = report.max_rel_error.max(err);
            report.checked += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect()
    }

    #[test]
    fn product_forward_and_backward() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[]);
        let y = b.input("y", &[]);
        let p = b.mul(x, y);
        let g = b.finish(p).unwrap();
        let at = bind(&[("x", Tensor::scalar(2.0)), ("y", Tensor::scalar(3.0))]);
        assert_eq!(g.forward(&at).unwrap().item(), Some(6.0));
        let (_, grads) = g.backward(&at).unwrap();
        assert_eq!(grads["x"].item(), Some(3.0));
        assert_eq!(grads["y"].item(), Some(2.0));
    }

    #[test]
    fn sum_of_squares() {
        let mut b = GraphBuilder::new();
        let v = b.input("v", &[2]);
        let sq = b.square(v);
        let s = b.sum(sq);
        let g = b.finish(s).unwrap();
        let at = bind(&[("v", Tensor::vector(vec![1.0, 2.0]))]);
        assert_eq!(g.forward(&at).unwrap().item(), Some(5.0));
    }

    #[test]
    fn clip_value_and_zero_gradient_outside() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[]);
        let c = b.clip_scalar(x, 0.0, 1.0);
        let g = b.finish(c).unwrap();
        let at = bind(&[("x", Tensor::scalar(2.0))]);
        assert_eq!(g.forward(&at).unwrap().item(), Some(1.0));
        assert_eq!(g.backward(&at).unwrap().1["x"].item(), Some(0.0));
        let inside = bind(&[("x", Tensor::scalar(0.5))]);
        assert_eq!(g.backward(&inside).unwrap().1["x"].item(), Some(1.0));
        // boundary is inside
        let edge = bind(&[("x", Tensor::scalar(1.0))]);
        assert_eq!(g.backward(&edge).unwrap().1["x"].item(), Some(1.0));
    }

    #[test]
    fn max_routes_to_selected_branch() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[]);
        let sq = b.square(x);
        let two_x = b.scale(x, 2.0);
        let m = b.max(sq, two_x);
        let g = b.finish(m).unwrap();
        let at = bind(&[("x", Tensor::scalar(3.0))]);
        assert_eq!(g.backward(&at).unwrap().1["x"].item(), Some(6.0));
        // x = 2: x² = 2x = 4, tie goes to the first argument (x², slope 4)
        let tie = bind(&[("x", Tensor::scalar(2.0))]);
        assert_eq!(g.backward(&tie).unwrap().1["x"].item(), Some(4.0));
        // 0 < x < 2: 2x wins, slope 2
        let low = bind(&[("x", Tensor::scalar(1.0))]);
        assert_eq!(g.backward(&low).unwrap().1["x"].item(), Some(2.0));
    }

    #[test]
    fn min_ties_select_first() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[]);
        let a = b.scale(x, 3.0);
        let c = b.scale(x, 5.0);
        let m = b.min(a, c);
        let g = b.finish(m).unwrap();
        let at = bind(&[("x", Tensor::scalar(0.0))]);
        assert_eq!(g.backward(&at).unwrap().1["x"].item(), Some(3.0));
    }

    #[test]
    fn non_scalar_output_is_rejected() {
        let mut b = GraphBuilder::new();
        let v = b.input("v", &[3]);
        let g = b.finish(v).unwrap();
        let at = bind(&[("v", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        assert!(matches!(g.backward(&at), Err(Error::NonScalarOutput(_))));
    }

    #[test]
    fn unbound_and_misshapen_inputs() {
        let mut b = GraphBuilder::new();
        let v = b.input("v", &[2]);
        let s = b.sum(v);
        let g = b.finish(s).unwrap();
        assert!(matches!(
            g.forward(&Bindings::new()),
            Err(Error::UnboundInput(_))
        ));
        let wrong = bind(&[("v", Tensor::vector(vec![1.0, 2.0, 3.0]))]);
        assert!(matches!(
            g.forward(&wrong),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn construction_shape_errors_surface_at_finish() {
        let mut b = GraphBuilder::new();
        let a = b.input("a", &[2, 3]);
        let c = b.input("c", &[2, 3]);
        let m = b.matmul(a, c);
        assert!(matches!(
            b.finish(m),
            Err(Error::ShapeMismatch { op: "matmul", .. })
        ));
    }

    #[test]
    fn non_finite_intermediate_is_an_error() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[]);
        let e = b.exp(x);
        let g = b.finish(e).unwrap();
        let at = bind(&[("x", Tensor::scalar(1000.0))]);
        assert!(matches!(
            g.forward(&at),
            Err(Error::NonFinite { op: "exp", .. })
        ));
    }

    #[test]
    fn tensor_invariants() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn fd_linear_graph_is_exact() {
        let mut b = GraphBuilder::new();
        let w = b.input("w", &[3]);
        let k = b.constant(Tensor::vector(vec![0.5, -2.0, 7.0]));
        let p = b.mul(w, k);
        let s = b.sum(p);
        let off = b.offset(s, 4.0);
        let g = b.finish(off).unwrap();
        let at = bind(&[("w", Tensor::vector(vec![0.3, 0.1, -0.8]))]);
        let r = finite_difference_check(&g, &at, 1e-5).unwrap();
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-10, "{}", r.max_rel_error);
    }

    #[test]
    fn fd_quadratic_graph() {
        let mut b = GraphBuilder::new();
        let w = b.input("w", &[2, 2]);
        let x = b.constant(Tensor::matrix(3, 2, vec![1.0, 2.0, -1.0, 0.5, 3.0, -2.0]));
        let y = b.matmul(x, w);
        let sq = b.square(y);
        let s = b.mean(sq);
        let g = b.finish(s).unwrap();
        let at = bind(&[("w", Tensor::matrix(2, 2, vec![0.2, -0.7, 1.1, 0.4]))]);
        let r = finite_difference_check(&g, &at, 1e-5).unwrap();
        assert_eq!(r.checked, 4);
        assert!(r.max_rel_error < 1e-6, "{}", r.max_rel_error);
    }

    #[test]
    fn fd_flags_clip_boundary_coordinates() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2]);
        let c = b.clip_scalar(x, 0.0, 1.0);
        let s = b.sum(c);
        let g = b.finish(s).unwrap();
        let at = bind(&[("x", Tensor::vector(vec![1.0, 0.5]))]);
        let r = finite_difference_check(&g, &at, 1e-5).unwrap();
        assert_eq!(r.boundary, vec![("x".to_string(), 0)]);
        assert_eq!(r.checked, 1);
        assert!(r.max_rel_error < 1e-10);
    }

    #[test]
    fn structural_ops_gradients() {
        let mut b = GraphBuilder::new();
        let x = b.input("x", &[2, 3]);
        let r = b.input("r", &[3]);
        let lo = b.input("lo", &[2]);
        let hi = b.constant(Tensor::vector(vec![10.0, 10.0]));
        let a = b.add_row(x, r);
        let t = b.tanh(a);
        let rows = b.sum_rows(t);
        let c = b.clip(rows, lo, hi);
        let flat = b.reshape(x, &[6]);
        let grp = b.sum_groups(flat, 3);
        let gat = b.gather(grp, vec![1, 0, 1]);
        let gsum = b.sum(gat);
        let e = b.exp(c);
        let esum = b.sum(e);
        let total = b.add(esum, gsum);
        let g = b.finish(total).unwrap();
        let at = bind(&[
            (
                "x",
                Tensor::matrix(2, 3, vec![0.1, -0.4, 0.3, 0.9, 0.2, -0.6]),
            ),
            ("r", Tensor::vector(vec![0.05, 0.1, -0.2])),
            ("lo", Tensor::vector(vec![-5.0, 0.8])),
        ]);
        let rep = finite_difference_check(&g, &at, 1e-6).unwrap();
        assert!(rep.boundary.is_empty());
        assert!(rep.max_rel_error < 1e-7, "{}", rep.max_rel_error);
        // second row sum is below its lower bound, so the bound gets the gradient
        let (_, grads) = g.backward(&at).unwrap();
        assert!(grads["lo"].data()[1] > 0.0);
        assert_eq!(grads["lo"].data()[0], 0.0);
    }
}
