//! Static computation graphs with reverse-mode differentiation.
//!
//! A [`Graph`] records operations over named inputs. Shapes are resolved when
//! the graph is evaluated against a set of [`Bindings`], so the same graph
//! serves any batch size. Each [`Evaluation`] owns its intermediate cache;
//! the graph itself is never mutated by evaluation and can be shared freely.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

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
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv2d { x: NodeId, w: NodeId },
    AddBias { x: NodeId, b: NodeId },
    Relu(NodeId),
    Gelu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SpatialMean(NodeId),
    LogSoftmax(NodeId),
    Gather { x: NodeId, index: NodeId },
    Concat(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::MatMul(..) => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::AddBias { .. } => "add_bias",
            Op::Relu(_) => "relu",
            Op::Gelu(_) => "gelu",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SpatialMean(_) => "spatial_mean",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::Concat(_) => "concat",
        }
    }

    fn operands(&self) -> Vec<NodeId> {
        match self {
            Op::Input(_) => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => vec![*a, *b],
            Op::Conv2d { x, w } => vec![*x, *w],
            Op::AddBias { x, b } => vec![*x, *b],
            Op::Gather { x, index } => vec![*x, *index],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Relu(a)
            | Op::Gelu(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::SpatialMean(a)
            | Op::LogSoftmax(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    label: Option<String>,
}

/// An acyclic operation graph. Node ids are handed out in insertion order,
/// which is therefore a valid topological order.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: HashMap<String, NodeId>,
}

/// Named tensors supplied to an evaluation. Borrowed tensors are not copied.
#[derive(Default)]
pub struct Bindings<'a> {
    map: HashMap<String, Cow<'a, Tensor>>,
}

impl<'a> Bindings<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, name: impl Into<String>, tensor: Tensor) -> &mut Self {
        self.map.insert(name.into(), Cow::Owned(tensor));
        self
    }

    pub fn bind_ref(&mut self, name: impl Into<String>, tensor: &'a Tensor) -> &mut Self {
        self.map.insert(name.into(), Cow::Borrowed(tensor));
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name).map(|c| c.as_ref())
    }
}

impl<'a> FromIterator<(String, Tensor)> for Bindings<'a> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor)>>(iter: I) -> Self {
        Self {
            map: iter.into_iter().map(|(k, v)| (k, Cow::Owned(v))).collect(),
        }
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, label: None });
        id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Returns the input node called `name`, creating it on first use.
    pub fn input(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.inputs.get(name) {
            return id;
        }
        let id = self.push(Op::Input(name.to_string()));
        self.inputs.insert(name.to_string(), id);
        id
    }

    pub fn input_names(&self) -> impl Iterator<Item = &str> {
        self.inputs.keys().map(|s| s.as_str())
    }

    pub fn set_label(&mut self, node: NodeId, label: impl Into<String>) {
        self.nodes[node.0].label = Some(label.into());
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.push(Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> NodeId {
        self.push(Op::AddScalar(a, value))
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Stride-1, zero-padded ("same") convolution of `[B, Ci, H, W]` with
    /// weights `[Co, Ci, k, k]`, `k` odd.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId) -> NodeId {
        self.push(Op::Conv2d { x, w })
    }

    /// Adds a vector along axis 1 (channels or features).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> NodeId {
        self.push(Op::AddBias { x, b })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    /// Tanh approximation of the Gaussian error linear unit.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Gelu(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a))
    }

    /// Global average pool `[B, C, H, W] -> [B, C]`.
    pub fn spatial_mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::SpatialMean(a))
    }

    /// Row-wise log-softmax over the last axis of a `[B, K]` tensor.
    pub fn log_softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSoftmax(a))
    }

    /// Picks `x[b, index[b]]` from a `[B, K]` tensor. `index` holds integral
    /// values and is not differentiated.
    pub fn gather(&mut self, x: NodeId, index: NodeId) -> NodeId {
        self.push(Op::Gather { x, index })
    }

    /// Concatenates `[B, Ci, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[NodeId]) -> NodeId {
        self.push(Op::Concat(parts.to_vec()))
    }

    fn describe(&self, id: NodeId) -> String {
        let node = &self.nodes[id.0];
        match (&node.op, &node.label) {
            (Op::Input(name), _) => format!("#{} input `{name}`", id.0),
            (op, Some(label)) => format!("#{} {} ({label})", id.0, op.name()),
            (op, None) => format!("#{} {}", id.0, op.name()),
        }
    }

    fn ancestors(&self, root: NodeId) -> Vec<bool> {
        let mut active = vec![false; root.0 + 1];
        active[root.0] = true;
        for i in (0..=root.0).rev() {
            if active[i] {
                for p in self.nodes[i].op.operands() {
                    active[p.0] = true;
                }
            }
        }
        active
    }

    /// Computes `root` and every node it depends on.
    pub fn evaluate<'g, 'a>(
        &'g self,
        root: NodeId,
        bindings: &Bindings<'a>,
    ) -> Result<Evaluation<'g, 'a>> {
        if root.0 >= self.nodes.len() {
            return Err(Error::invalid(format!("node #{} does not exist", root.0)));
        }
        let active = self.ancestors(root);
        let mut values: Vec<Option<Cow<'a, Tensor>>> = vec![None; root.0 + 1];
        for i in 0..=root.0 {
            if !active[i] {
                continue;
            }
            let value = match &self.nodes[i].op {
                Op::Input(name) => match bindings.map.get(name) {
                    Some(Cow::Borrowed(t)) => Cow::Borrowed(*t),
                    Some(Cow::Owned(t)) => Cow::Owned(t.clone()),
                    None => return Err(Error::UnboundInput(name.clone())),
                },
                op => {
                    let get = |n: &NodeId| -> &Tensor { values[n.0].as_deref().expect("operand") };
                    Cow::Owned(
                        forward(op, &get)
                            .map_err(|msg| Error::shape(self.describe(NodeId(i)), msg))?,
                    )
                }
            };
            values[i] = Some(value);
        }
        Ok(Evaluation {
            graph: self,
            root,
            values,
        })
    }
}

/// Cached forward values of one evaluation.
pub struct Evaluation<'g, 'a> {
    graph: &'g Graph,
    root: NodeId,
    values: Vec<Option<Cow<'a, Tensor>>>,
}

impl std::fmt::Debug for Evaluation<'_, '_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Evaluation")
            .field("root", &self.root)
            .field("output", &self.output())
            .finish()
    }
}

impl<'g, 'a> Evaluation<'g, 'a> {
    pub fn output(&self) -> &Tensor {
        self.value(self.root).expect("root evaluated")
    }

    /// Value of an intermediate node, if it was needed for the root.
    pub fn value(&self, node: NodeId) -> Option<&Tensor> {
        self.values.get(node.0).and_then(|v| v.as_deref())
    }

    pub fn gradient(&self, wrt: &str) -> Result<Tensor> {
        Ok(self.gradients(&[wrt])?.remove(0))
    }

    /// Gradients of the scalar root with respect to several inputs, sharing one
    /// backward sweep. Only nodes on a path from a requested input are visited.
    pub fn gradients(&self, wrt: &[&str]) -> Result<Vec<Tensor>> {
        let root_value = self.output();
        if !root_value.is_scalar() {
            return Err(Error::NonScalarRoot(root_value.shape().to_vec()));
        }
        let graph = self.graph;
        let n = self.root.0 + 1;
        let mut targets = Vec::with_capacity(wrt.len());
        for name in wrt {
            let id = *graph
                .inputs
                .get(*name)
                .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
            if id.0 >= n || self.values[id.0].is_none() {
                return Err(Error::UnknownInput(format!(
                    "{name} (not reachable from the root)"
                )));
            }
            targets.push(id);
        }

        let mut needs = vec![false; n];
        for t in &targets {
            needs[t.0] = true;
        }
        for i in 0..n {
            if self.values[i].is_some() && !needs[i] {
                needs[i] = graph.nodes[i].op.operands().iter().any(|p| needs[p.0]);
            }
        }

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        grads[self.root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for i in (0..n).rev() {
            if !needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let op = &graph.nodes[i].op;
            if let Op::Input(_) = op {
                grads[i] = Some(g);
                continue;
            }
            let val = |id: NodeId| -> &Tensor { self.values[id.0].as_deref().expect("evaluated") };
            backward(op, &g, val(NodeId(i)), &val, &needs, &mut grads);
        }

        Ok(targets
            .iter()
            .map(|t| {
                grads[t.0]
                    .clone()
                    .unwrap_or_else(|| Tensor::zeros(self.values[t.0].as_deref().unwrap().shape()))
            })
            .collect())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, delta: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(delta.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// `0.5 x (1 + tanh(k (x + 0.044715 x³)))` with `k = sqrt(2 / π)`, and its derivative.
fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4;
    const C: f64 = 0.044_715;
    let th = (K * (x + C * x * x * x)).tanh();
    let y = 0.5 * x * (1.0 + th);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * K * (1.0 + 3.0 * C * x * x);
    (y, dy)
}

type Msg = String;

fn dims4(t: &Tensor, what: &str) -> std::result::Result<[usize; 4], Msg> {
    match t.shape() {
        &[b, c, h, w] => Ok([b, c, h, w]),
        s => Err(format!("{what} must be 4-D [B, C, H, W], got {s:?}")),
    }
}

fn dims2(t: &Tensor, what: &str) -> std::result::Result<[usize; 2], Msg> {
    match t.shape() {
        &[r, c] => Ok([r, c]),
        s => Err(format!("{what} must be 2-D, got {s:?}")),
    }
}

fn same_shape(a: &Tensor, b: &Tensor) -> std::result::Result<(), Msg> {
    if a.shape() != b.shape() {
        return Err(format!(
            "operand shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

fn forward<'t>(op: &Op, get: &dyn Fn(&NodeId) -> &'t Tensor) -> std::result::Result<Tensor, Msg> {
    Ok(match op {
        Op::Input(_) => unreachable!("inputs are bound, not computed"),
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
            let (a, b) = (get(a), get(b));
            same_shape(a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add(..) => |x, y| x + y,
                Op::Sub(..) => |x, y| x - y,
                _ => |x, y| x * y,
            };
            a.zip_map(b, f).map_err(|e| e.to_string())?
        }
        Op::Scale(a, c) => {
            let c = *c;
            get(a).map(|v| v * c)
        }
        Op::AddScalar(a, c) => {
            let c = *c;
            get(a).map(|v| v + c)
        }
        Op::MatMul(a, b) => {
            let (a, b) = (get(a), get(b));
            let [m, k] = dims2(a, "left operand")?;
            let [k2, n] = dims2(b, "right operand")?;
            if k != k2 {
                return Err(format!("inner dimensions differ: [{m}, {k}] x [{k2}, {n}]"));
            }
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
            Tensor::from_parts(vec![m, n], out)
        }
        Op::Conv2d { x, w } => conv2d_forward(get(x), get(w))?,
        Op::AddBias { x, b } => {
            let (x, b) = (get(x), get(b));
            let shape = x.shape();
            if shape.len() < 2 || b.shape() != [shape[1]] {
                return Err(format!(
                    "bias {:?} does not match axis 1 of {:?}",
                    b.shape(),
                    shape
                ));
            }
            let channels = shape[1];
            let inner: usize = shape[2..].iter().product();
            let mut out = x.data().to_vec();
            for (chunk_idx, chunk) in out.chunks_mut(inner).enumerate() {
                let bias = b.data()[chunk_idx % channels];
                for v in chunk {
                    *v += bias;
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Relu(a) => get(a).map(|v| if v > 0.0 { v } else { 0.0 }),
        Op::Gelu(a) => get(a).map(|v| gelu(v).0),
        Op::Sum(a) => Tensor::scalar(get(a).sum()),
        Op::Mean(a) => Tensor::scalar(get(a).mean()),
        Op::SpatialMean(a) => {
            let a = get(a);
            let [b, c, h, w] = dims4(a, "input")?;
            let hw = h * w;
            let data = a
                .data()
                .chunks(hw)
                .map(|chunk| chunk.iter().sum::<f64>() / hw as f64)
                .collect();
            Tensor::from_parts(vec![b, c], data)
        }
        Op::LogSoftmax(a) => {
            let a = get(a);
            let [rows, k] = dims2(a, "input")?;
            let mut out = Vec::with_capacity(rows * k);
            for row in a.data().chunks(k) {
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|v| v - lse));
            }
            Tensor::from_parts(vec![rows, k], out)
        }
        Op::Gather { x, index } => {
            let (x, index) = (get(x), get(index));
            let [rows, k] = dims2(x, "input")?;
            if index.numel() != rows {
                return Err(format!("{} indices for {rows} rows", index.numel()));
            }
            let mut out = Vec::with_capacity(rows);
            for (r, &i) in index.data().iter().enumerate() {
                let col = as_index(i, k)?;
                out.push(x.data()[r * k + col]);
            }
            Tensor::from_parts(vec![rows], out)
        }
        Op::Concat(parts) => {
            let tensors: Vec<&Tensor> = parts.iter().map(get).collect();
            let [b, _, h, w] = dims4(tensors[0], "first part")?;
            let mut channels = 0;
            for t in &tensors {
                let [bb, c, hh, ww] = dims4(t, "part")?;
                if (bb, hh, ww) != (b, h, w) {
                    return Err(format!(
                        "concat parts disagree: {:?} vs {:?}",
                        tensors[0].shape(),
                        t.shape()
                    ));
                }
                channels += c;
            }
            let mut out = Vec::with_capacity(b * channels * h * w);
            for bi in 0..b {
                for t in &tensors {
                    let stride = t.numel() / b;
                    out.extend_from_slice(&t.data()[bi * stride..(bi + 1) * stride]);
                }
            }
            Tensor::from_parts(vec![b, channels, h, w], out)
        }
    })
}

fn as_index(v: f64, k: usize) -> std::result::Result<usize, Msg> {
    if v < 0.0 || v.fract() != 0.0 || v as usize >= k {
        return Err(format!("index {v} out of range 0..{k}"));
    }
    Ok(v as usize)
}

fn backward<'t>(
    op: &Op,
    g: &Tensor,
    out: &Tensor,
    val: &dyn Fn(NodeId) -> &'t Tensor,
    needs: &[bool],
    grads: &mut [Option<Tensor>],
) {
    match op {
        Op::Input(_) => {}
        Op::Add(a, b) => {
            if needs[a.0] {
                accumulate(grads, *a, g.clone());
            }
            if needs[b.0] {
                accumulate(grads, *b, g.clone());
            }
        }
        Op::Sub(a, b) => {
            if needs[a.0] {
                accumulate(grads, *a, g.clone());
            }
            if needs[b.0] {
                accumulate(grads, *b, g.map(|v| -v));
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if needs[a.0] {
                accumulate(grads, *a, g.mul(bv).expect("same shape"));
            }
            if needs[b.0] {
                accumulate(grads, *b, g.mul(av).expect("same shape"));
            }
        }
        Op::Scale(a, c) => {
            let c = *c;
            accumulate(grads, *a, g.map(|v| v * c));
        }
        Op::AddScalar(a, _) => accumulate(grads, *a, g.clone()),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k) = (av.shape()[0], av.shape()[1]);
            let n = bv.shape()[1];
            if needs[a.0] {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g.data(), false, bv.data(), true, &mut ga, false);
                accumulate(grads, *a, Tensor::from_parts(vec![m, k], ga));
            }
            if needs[b.0] {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, av.data(), true, g.data(), false, &mut gb, false);
                accumulate(grads, *b, Tensor::from_parts(vec![k, n], gb));
            }
        }
        Op::Conv2d { x, w } => {
            let (gx, gw) = conv2d_backward(val(*x), val(*w), g, needs[x.0], needs[w.0]);
            if let Some(gx) = gx {
                accumulate(grads, *x, gx);
            }
            if let Some(gw) = gw {
                accumulate(grads, *w, gw);
            }
        }
        Op::AddBias { x, b } => {
            if needs[x.0] {
                accumulate(grads, *x, g.clone());
            }
            if needs[b.0] {
                let channels = g.shape()[1];
                let inner: usize = g.shape()[2..].iter().product();
                let mut gb = vec![0.0; channels];
                for (chunk_idx, chunk) in g.data().chunks(inner).enumerate() {
                    gb[chunk_idx % channels] += chunk.iter().sum::<f64>();
                }
                accumulate(grads, *b, Tensor::from_parts(vec![channels], gb));
            }
        }
        Op::Relu(a) => {
            let gx = val(*a)
                .zip_map(g, |x, gv| if x > 0.0 { gv } else { 0.0 })
                .expect("same shape");
            accumulate(grads, *a, gx);
        }
        Op::Gelu(a) => {
            let gx = val(*a)
                .zip_map(g, |x, gv| gv * gelu(x).1)
                .expect("same shape");
            accumulate(grads, *a, gx);
        }
        Op::Sum(a) => {
            let shape = val(*a).shape();
            accumulate(grads, *a, Tensor::full(shape, g.item()));
        }
        Op::Mean(a) => {
            let av = val(*a);
            accumulate(
                grads,
                *a,
                Tensor::full(av.shape(), g.item() / av.numel() as f64),
            );
        }
        Op::SpatialMean(a) => {
            let shape = val(*a).shape().to_vec();
            let hw = shape[2] * shape[3];
            let mut data = Vec::with_capacity(shape.iter().product());
            for &gv in g.data() {
                data.extend(std::iter::repeat_n(gv / hw as f64, hw));
            }
            accumulate(grads, *a, Tensor::from_parts(shape, data));
        }
        Op::LogSoftmax(a) => {
            let k = out.shape()[1];
            let mut gx = Vec::with_capacity(out.numel());
            for (orow, grow) in out.data().chunks(k).zip(g.data().chunks(k)) {
                let total: f64 = grow.iter().sum();
                gx.extend(orow.iter().zip(grow).map(|(o, gv)| gv - o.exp() * total));
            }
            accumulate(grads, *a, Tensor::from_parts(out.shape().to_vec(), gx));
        }
        Op::Gather { x, index } => {
            if needs[x.0] {
                let xv = val(*x);
                let k = xv.shape()[1];
                let mut gx = vec![0.0; xv.numel()];
                for (r, (&i, &gv)) in val(*index).data().iter().zip(g.data()).enumerate() {
                    gx[r * k + i as usize] += gv;
                }
                accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx));
            }
        }
        Op::Concat(parts) => {
            let b = g.shape()[0];
            let per_batch = g.numel() / b;
            let mut offset = 0;
            for p in parts {
                let pv = val(*p);
                let stride = pv.numel() / b;
                if needs[p.0] {
                    let mut data = Vec::with_capacity(pv.numel());
                    for bi in 0..b {
                        let start = bi * per_batch + offset;
                        data.extend_from_slice(&g.data()[start..start + stride]);
                    }
                    accumulate(grads, *p, Tensor::from_parts(pv.shape().to_vec(), data));
                }
                offset += stride;
            }
        }
    }
}

/// `c = op(a) * op(b)` with `a` logically `[m, k]` and `b` logically `[k, n]`.
/// A transposed operand is stored in the opposite orientation.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly m*k, k*n and m*n elements and the
    // strides address them in bounds for either orientation.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

struct ConvDims {
    batch: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
    k: usize,
}

impl ConvDims {
    fn of(x: &Tensor, w: &Tensor) -> std::result::Result<Self, Msg> {
        let [batch, cin, h, wd] = dims4(x, "input")?;
        let [cout, wcin, kh, kw] = dims4(w, "kernel")?;
        if wcin != cin {
            return Err(format!("kernel expects {wcin} input channels, got {cin}"));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(format!(
                "kernel must be square with odd size, got {kh}x{kw}"
            ));
        }
        Ok(Self {
            batch,
            cin,
            cout,
            h,
            w: wd,
            k: kh,
        })
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn hw(&self) -> usize {
        self.h * self.w
    }
}

fn im2col(d: &ConvDims, image: &[f64], cols: &mut [f64]) {
    let (h, w, k) = (d.h as isize, d.w as isize, d.k);
    let pad = (k / 2) as isize;
    let hw = d.hw();
    for ci in 0..d.cin {
        let plane = &image[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                for oy in 0..h {
                    let iy = oy + dy;
                    let line = &mut dst[(oy * w) as usize..((oy + 1) * w) as usize];
                    if iy < 0 || iy >= h || x_lo >= x_hi {
                        line.fill(0.0);
                        continue;
                    }
                    line[..x_lo].fill(0.0);
                    line[x_hi..].fill(0.0);
                    let src_row = (iy * w) as usize;
                    let src_lo = (x_lo as isize + dx) as usize;
                    line[x_lo..x_hi].copy_from_slice(
                        &plane[src_row + src_lo..src_row + src_lo + (x_hi - x_lo)],
                    );
                }
            }
        }
    }
}

fn col2im(d: &ConvDims, cols: &[f64], image: &mut [f64]) {
    let (h, w, k) = (d.h as isize, d.w as isize, d.k);
    let pad = (k / 2) as isize;
    let hw = d.hw();
    for ci in 0..d.cin {
        let plane = &mut image[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).clamp(0, w) as usize;
                let x_hi = (w - dx).clamp(0, w) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for oy in 0..h {
                    let iy = oy + dy;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let line = &src[(oy * w) as usize..((oy + 1) * w) as usize];
                    let dst_row = (iy * w) as usize;
                    let dst_lo = (x_lo as isize + dx) as usize;
                    for (o, v) in plane[dst_row + dst_lo..dst_row + dst_lo + (x_hi - x_lo)]
                        .iter_mut()
                        .zip(&line[x_lo..x_hi])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
}

fn conv2d_forward(x: &Tensor, w: &Tensor) -> std::result::Result<Tensor, Msg> {
    let d = ConvDims::of(x, w)?;
    let (rows, hw) = (d.col_rows(), d.hw());
    let mut cols = vec![0.0; rows * hw];
    let mut out = vec![0.0; d.batch * d.cout * hw];
    let in_stride = d.cin * hw;
    let out_stride = d.cout * hw;
    for b in 0..d.batch {
        im2col(&d, &x.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
        gemm(
            d.cout,
            rows,
            hw,
            w.data(),
            false,
            &cols,
            false,
            &mut out[b * out_stride..(b + 1) * out_stride],
            false,
        );
    }
    Ok(Tensor::from_parts(vec![d.batch, d.cout, d.h, d.w], out))
}

fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    g: &Tensor,
    want_x: bool,
    want_w: bool,
) -> (Option<Tensor>, Option<Tensor>) {
    let d = ConvDims::of(x, w).expect("validated in forward");
    let (rows, hw) = (d.col_rows(), d.hw());
    let in_stride = d.cin * hw;
    let out_stride = d.cout * hw;
    let mut cols = vec![0.0; rows * hw];
    let mut gx = want_x.then(|| vec![0.0; x.numel()]);
    let mut gw = want_w.then(|| vec![0.0; w.numel()]);
    for b in 0..d.batch {
        let gb = &g.data()[b * out_stride..(b + 1) * out_stride];
        if let Some(gw) = gw.as_mut() {
            im2col(&d, &x.data()[b * in_stride..(b + 1) * in_stride], &mut cols);
            gemm(d.cout, hw, rows, gb, false, &cols, true, gw, true);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(
                rows,
                d.cout,
                hw,
                w.data(),
                true,
                gb,
                false,
                &mut cols,
                false,
            );
            col2im(&d, &cols, &mut gx[b * in_stride..(b + 1) * in_stride]);
        }
    }
    (
        gx.map(|v| Tensor::from_parts(x.shape().to_vec(), v)),
        gw.map(|v| Tensor::from_parts(w.shape().to_vec(), v)),
    )
}
