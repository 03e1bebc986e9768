//! Graph intermediate representation.
//!
//! A [`Graph`] is a DAG of single-output nodes over one external input tensor.
//! Node inputs are ordered lists of producer ids; the reserved id
//! [`INPUT_ID`] denotes the graph input. A `Convolution` node with more than
//! one input reads the depth-wise concatenation of its inputs — rewrite
//! passes use this to merge branches without materializing a copy.
//!
//! Kinds past `Identity` are internal: the parser and the rewrite passes
//! introduce them, the on-disk schema does not accept them.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shape::TensorShape;

/// Reserved id that nodes use to reference the graph input tensor.
pub const INPUT_ID: &str = "input";

#[derive(Debug, Clone, PartialEq)]
pub struct ConvAttrs<S: Scalar> {
    pub filter_h: usize,
    pub filter_w: usize,
    pub out_depth: usize,
    pub in_depth: usize,
    pub stride: usize,
    pub pad: usize,
    /// Flat weights, indexed `[k][r][s][c]` row-major
    /// (k = output depth, r/s = filter row/col, c = input depth).
    pub weights: Vec<S>,
    pub bias: Vec<S>,
    /// Structural-sparsity annotation attached by the filter-shortening pass.
    pub shorten: Option<ShortenInfo>,
}

impl<S: Scalar> ConvAttrs<S> {
    pub fn weight(&self, k: usize, r: usize, s: usize, c: usize) -> S {
        let idx = ((k * self.filter_h + r) * self.filter_w + s) * self.in_depth + c;
        self.weights[idx]
    }

    /// Input depths filter `k` actually reads. Without a shortening
    /// annotation this is the full `[0, in_depth)` range.
    pub fn read_set(&self, k: usize) -> Vec<usize> {
        match &self.shorten {
            None => (0..self.in_depth).collect(),
            Some(si) => si.read_set(k, self.in_depth),
        }
    }
}

/// Per-filter-group input-depth restriction for structurally sparse filters.
///
/// Filters are grouped `group` at a time (the PE array's output-depth vector
/// width when the annotation was made). Group `g` reads the band
/// `[g*group, g*group + group) ∩ [0, band_depth)` plus the shared dense tail
/// `[dense_start, dense_start + dense_len)`. A pure identity or pooling-style
/// band filter has `dense_len == 0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShortenInfo {
    pub group: usize,
    pub band_depth: usize,
    pub dense_start: usize,
    pub dense_len: usize,
}

impl ShortenInfo {
    pub fn read_set(&self, k: usize, in_depth: usize) -> Vec<usize> {
        let g = k / self.group;
        let band_lo = (g * self.group).min(self.band_depth);
        let band_hi = ((g + 1) * self.group).min(self.band_depth).min(in_depth);
        let mut set: Vec<usize> = (band_lo..band_hi).collect();
        set.extend(self.dense_start..(self.dense_start + self.dense_len).min(in_depth));
        set
    }

    pub fn read_len(&self, k: usize, in_depth: usize) -> usize {
        let g = k / self.group;
        let band_lo = (g * self.group).min(self.band_depth);
        let band_hi = ((g + 1) * self.group).min(self.band_depth).min(in_depth);
        (band_hi - band_lo) + self.dense_len.min(in_depth - self.dense_start.min(in_depth))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoolAttrs {
    pub window_h: usize,
    pub window_w: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrnAttrs<S: Scalar> {
    pub local_size: usize,
    pub alpha: S,
    pub beta: S,
    pub k: S,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcAttrs<S: Scalar> {
    pub in_dim: usize,
    pub out_dim: usize,
    /// Flat weights indexed `[n][m]` row-major: `out[m] = sum_n in[n] * w[n][m]`.
    pub weights: Vec<S>,
    pub bias: Vec<S>,
}

impl<S: Scalar> FcAttrs<S> {
    pub fn weight(&self, n: usize, m: usize) -> S {
        self.weights[n * self.out_dim + m]
    }
}

/// Gate order used everywhere LSTM gates are stacked or interleaved.
pub const LSTM_GATES: [char; 4] = ['i', 'g', 'f', 'o'];

#[derive(Debug, Clone, PartialEq)]
pub struct LstmAttrs<S: Scalar> {
    pub hidden: usize,
    pub n_x: usize,
    pub n_h: usize,
    /// Input-side weight matrices in gate order i, g, f, o; each is
    /// `hidden x n_x`, indexed `[j][n]` row-major.
    pub w: [Vec<S>; 4],
    /// History-side weight matrices in gate order; each is `hidden x n_h`.
    pub u: [Vec<S>; 4],
    /// Per-gate bias vectors in gate order; each has length `hidden`.
    pub b: [Vec<S>; 4],
    /// Initial cell state (length `hidden`); zero if not given.
    pub c_init: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmTailAttrs<S: Scalar> {
    pub hidden: usize,
    /// `true`: single input of depth 4*hidden with gates interleaved
    /// (i0, g0, f0, o0, i1, ...). `false`: four inputs of depth `hidden`,
    /// one per gate in gate order.
    pub interleaved: bool,
    pub c_init: Vec<S>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind<S: Scalar> {
    Convolution(ConvAttrs<S>),
    MaxPool(PoolAttrs),
    AvgPool(PoolAttrs),
    GlobalAvgPool,
    Lrn(LrnAttrs<S>),
    EltwiseAdd,
    FullyConnected(FcAttrs<S>),
    Relu,
    LstmCell(LstmAttrs<S>),
    Identity,
    // ---- internal kinds, introduced by the parser / rewrite passes ----
    /// Reshape to 1x1x(h*w*d); a no-op on the row-major element order.
    Flatten,
    /// Keep every `stride`-th pixel in h and w.
    Subsample { stride: usize },
    /// Streaming LSTM epilogue: gate nonlinearities and cell-state update.
    LstmTail(LstmTailAttrs<S>),
}

impl<S: Scalar> NodeKind<S> {
    pub fn name(&self) -> &'static str {
        match self {
            NodeKind::Convolution(_) => "Convolution",
            NodeKind::MaxPool(_) => "MaxPool",
            NodeKind::AvgPool(_) => "AvgPool",
            NodeKind::GlobalAvgPool => "GlobalAvgPool",
            NodeKind::Lrn(_) => "LRN",
            NodeKind::EltwiseAdd => "EltwiseAdd",
            NodeKind::FullyConnected(_) => "FullyConnected",
            NodeKind::Relu => "ReLU",
            NodeKind::LstmCell(_) => "LSTMCell",
            NodeKind::Identity => "Identity",
            NodeKind::Flatten => "Flatten",
            NodeKind::Subsample { .. } => "Subsample",
            NodeKind::LstmTail(_) => "LstmTail",
        }
    }

    /// Pure shape changes that never materialize a tensor of their own.
    pub fn is_view(&self) -> bool {
        matches!(self, NodeKind::Flatten | NodeKind::Subsample { .. })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node<S: Scalar> {
    pub id: String,
    pub kind: NodeKind<S>,
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Graph<S: Scalar> {
    pub nodes: IndexMap<String, Node<S>>,
    pub outputs: Vec<String>,
    pub input_shape: TensorShape,
}

impl<S: Scalar> Graph<S> {
    pub fn new(
        nodes: Vec<Node<S>>,
        outputs: Vec<String>,
        input_shape: TensorShape,
    ) -> Result<Self> {
        let mut map = IndexMap::with_capacity(nodes.len());
        for n in nodes {
            if n.id == INPUT_ID {
                return Err(Error::Schema(format!("node id `{INPUT_ID}` is reserved")));
            }
            if map.insert(n.id.clone(), n).is_some() {
                return Err(Error::Schema("duplicate node id".to_string()));
            }
        }
        let g = Graph { nodes: map, outputs, input_shape };
        g.validate()?;
        Ok(g)
    }

    pub fn node(&self, id: &str) -> &Node<S> {
        &self.nodes[id]
    }

    /// Arity check, edge resolution, acyclicity, output resolution and
    /// reachability; shape inference runs on top and reports dimension
    /// problems.
    pub fn validate(&self) -> Result<()> {
        if self.outputs.is_empty() {
            return Err(Error::Schema("graph declares no outputs".to_string()));
        }
        for out in &self.outputs {
            if !self.nodes.contains_key(out) {
                return Err(Error::Schema(format!("output `{out}` is not a node")));
            }
        }
        for node in self.nodes.values() {
            for inp in &node.inputs {
                if inp != INPUT_ID && !self.nodes.contains_key(inp) {
                    return Err(Error::Schema(format!(
                        "node `{}` input `{inp}` does not resolve",
                        node.id
                    )));
                }
            }
            let arity_ok = match &node.kind {
                NodeKind::EltwiseAdd => node.inputs.len() == 2,
                NodeKind::LstmCell(_) => node.inputs.len() == 2,
                // Multi-input convolution = implicit depth concat of inputs.
                NodeKind::Convolution(_) => !node.inputs.is_empty(),
                NodeKind::LstmTail(a) => {
                    node.inputs.len() == if a.interleaved { 1 } else { 4 }
                }
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(Error::Schema(format!(
                    "node `{}` ({}) has arity {}",
                    node.id,
                    node.kind.name(),
                    node.inputs.len()
                )));
            }
        }
        let order = self.topo_order()?;
        // Reachability: every node must feed some output.
        let mut live: Vec<&str> = self.outputs.iter().map(|s| s.as_str()).collect();
        let mut reachable: std::collections::HashSet<&str> = live.iter().copied().collect();
        while let Some(id) = live.pop() {
            for inp in &self.nodes[id].inputs {
                if inp != INPUT_ID && reachable.insert(inp.as_str()) {
                    live.push(inp);
                }
            }
        }
        for id in &order {
            if !reachable.contains(id.as_str()) {
                return Err(Error::Schema(format!("node `{id}` is unreachable from the outputs")));
            }
        }
        self.shapes()?;
        Ok(())
    }

    /// Deterministic topological order (Kahn's algorithm; ready nodes are
    /// taken in declaration order). Errors with the id of a node on a cycle.
    pub fn topo_order(&self) -> Result<Vec<String>> {
        let mut indegree: IndexMap<&str, usize> = self
            .nodes
            .values()
            .map(|n| {
                let deg = n.inputs.iter().filter(|i| *i != INPUT_ID).count();
                (n.id.as_str(), deg)
            })
            .collect();
        let mut order = Vec::with_capacity(self.nodes.len());
        let mut ready: Vec<&str> = indegree
            .iter()
            .filter(|(_, v)| **v == 0)
            .map(|(k, _)| *k)
            .collect();
        let consumers = self.consumers();
        let mut cursor = 0;
        while cursor < ready.len() {
            let id = ready[cursor];
            cursor += 1;
            order.push(id.to_string());
            if let Some(cons) = consumers.get(id) {
                // One entry per edge, so decrement once per entry.
                for c in cons {
                    let e = indegree.get_mut(c.as_str()).unwrap();
                    *e -= 1;
                    if *e == 0 {
                        ready.push(c.as_str());
                    }
                }
            }
        }
        if order.len() != self.nodes.len() {
            let stuck = self
                .nodes
                .keys()
                .find(|k| !order.iter().any(|o| o == *k))
                .cloned()
                .unwrap_or_default();
            return Err(Error::Cycle(stuck));
        }
        Ok(order)
    }

    /// Map from producer id (including `INPUT_ID`) to consumer node ids in
    /// declaration order. A consumer reading a producer twice appears twice.
    pub fn consumers(&self) -> IndexMap<String, Vec<String>> {
        let mut m: IndexMap<String, Vec<String>> = IndexMap::new();
        m.insert(INPUT_ID.to_string(), Vec::new());
        for id in self.nodes.keys() {
            m.insert(id.clone(), Vec::new());
        }
        for node in self.nodes.values() {
            for inp in &node.inputs {
                m[inp.as_str()].push(node.id.clone());
            }
        }
        m
    }

    /// Infer the output shape of every node. Fails with `ShapeMismatch` on
    /// inconsistent dimensions or weights.
    pub fn shapes(&self) -> Result<IndexMap<String, TensorShape>> {
        let order = self.topo_order()?;
        let mut shapes: IndexMap<String, TensorShape> = IndexMap::new();
        let shape_of = |shapes: &IndexMap<String, TensorShape>, id: &str| -> Result<TensorShape> {
            if id == INPUT_ID {
                Ok(self.input_shape)
            } else {
                shapes
                    .get(id)
                    .copied()
                    .ok_or_else(|| Error::ShapeMismatch(format!("no shape for `{id}`")))
            }
        };
        for id in &order {
            let node = &self.nodes[id.as_str()];
            let ins: Vec<TensorShape> = node
                .inputs
                .iter()
                .map(|i| shape_of(&shapes, i))
                .collect::<Result<_>>()?;
            let out = infer_node_shape(node, &ins)?;
            shapes.insert(id.clone(), out);
        }
        Ok(shapes)
    }

    /// Multiply-accumulate count of the whole graph (convolution and matrix
    /// kinds only; pooling, LRN and element-wise ops contribute zero).
    /// Shortening annotations reduce a convolution's count to the depths its
    /// filters actually read.
    pub fn mac_count(&self) -> Result<u64> {
        let shapes = self.shapes()?;
        let mut total = 0u64;
        for node in self.nodes.values() {
            total += node_macs(node, &shapes)?;
        }
        Ok(total)
    }
}

pub fn node_macs<S: Scalar>(
    node: &Node<S>,
    shapes: &IndexMap<String, TensorShape>,
) -> Result<u64> {
    Ok(match &node.kind {
        NodeKind::Convolution(a) => {
            let out = shapes[node.id.as_str()];
            let per_pixel: u64 = (0..a.out_depth)
                .map(|k| {
                    let c_len = match &a.shorten {
                        None => a.in_depth,
                        Some(si) => si.read_len(k, a.in_depth),
                    };
                    (a.filter_h * a.filter_w * c_len) as u64
                })
                .sum();
            out.h as u64 * out.w as u64 * per_pixel
        }
        NodeKind::FullyConnected(a) => a.in_dim as u64 * a.out_dim as u64,
        NodeKind::LstmCell(a) => 4 * a.hidden as u64 * (a.n_x + a.n_h) as u64,
        _ => 0,
    })
}

fn conv_out_dim(in_dim: usize, pad: usize, filter: usize, stride: usize) -> Result<usize> {
    let padded = in_dim + 2 * pad;
    if padded < filter {
        return Err(Error::ShapeMismatch(format!(
            "window {filter} larger than padded input {padded}"
        )));
    }
    Ok((padded - filter) / stride + 1)
}

pub fn infer_node_shape<S: Scalar>(node: &Node<S>, ins: &[TensorShape]) -> Result<TensorShape> {
    let id = &node.id;
    match &node.kind {
        NodeKind::Convolution(a) => {
            let (h, w) = (ins[0].h, ins[0].w);
            let mut c_total = 0;
            for s in ins {
                if s.h != h || s.w != w {
                    return Err(Error::ShapeMismatch(format!(
                        "conv `{id}` concatenates inputs of unequal spatial size"
                    )));
                }
                c_total += s.d;
            }
            if c_total != a.in_depth {
                return Err(Error::ShapeMismatch(format!(
                    "conv `{id}` expects input depth {} but inputs supply {c_total}",
                    a.in_depth
                )));
            }
            let want = a.out_depth * a.filter_h * a.filter_w * a.in_depth;
            if a.weights.len() != want {
                return Err(Error::ShapeMismatch(format!(
                    "conv `{id}` has {} weights, expected {want}",
                    a.weights.len()
                )));
            }
            if a.bias.len() != a.out_depth {
                return Err(Error::ShapeMismatch(format!(
                    "conv `{id}` has {} biases, expected {}",
                    a.bias.len(),
                    a.out_depth
                )));
            }
            if a.stride == 0 {
                return Err(Error::ShapeMismatch(format!("conv `{id}` stride 0")));
            }
            TensorShape::new(
                conv_out_dim(h, a.pad, a.filter_h, a.stride)?,
                conv_out_dim(w, a.pad, a.filter_w, a.stride)?,
                a.out_depth,
            )
        }
        NodeKind::MaxPool(a) | NodeKind::AvgPool(a) => {
            if a.stride == 0 {
                return Err(Error::ShapeMismatch(format!("pool `{id}` stride 0")));
            }
            TensorShape::new(
                conv_out_dim(ins[0].h, a.pad, a.window_h, a.stride)?,
                conv_out_dim(ins[0].w, a.pad, a.window_w, a.stride)?,
                ins[0].d,
            )
        }
        NodeKind::GlobalAvgPool => TensorShape::new(1, 1, ins[0].d),
        NodeKind::Lrn(a) => {
            if a.local_size == 0 || a.local_size % 2 == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "LRN `{id}` local_size must be odd and positive"
                )));
            }
            Ok(ins[0])
        }
        NodeKind::EltwiseAdd => {
            if ins[0] != ins[1] {
                return Err(Error::ShapeMismatch(format!(
                    "eltwise `{id}` inputs {} vs {}",
                    ins[0], ins[1]
                )));
            }
            Ok(ins[0])
        }
        NodeKind::FullyConnected(a) => {
            if ins[0].h != 1 || ins[0].w != 1 || ins[0].d != a.in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "fully-connected `{id}` expects 1x1x{}, got {}",
                    a.in_dim, ins[0]
                )));
            }
            if a.weights.len() != a.in_dim * a.out_dim || a.bias.len() != a.out_dim {
                return Err(Error::ShapeMismatch(format!("fully-connected `{id}` weight size")));
            }
            TensorShape::new(1, 1, a.out_dim)
        }
        NodeKind::Relu | NodeKind::Identity => Ok(ins[0]),
        NodeKind::LstmCell(a) => {
            let x = ins[0];
            let h = ins[1];
            if x.h != 1 || x.w != 1 || x.d != a.n_x {
                return Err(Error::ShapeMismatch(format!(
                    "LSTM `{id}` input vector must be 1x1x{}, got {x}",
                    a.n_x
                )));
            }
            if h.h != 1 || h.w != 1 || h.d != a.n_h {
                return Err(Error::ShapeMismatch(format!(
                    "LSTM `{id}` history vector must be 1x1x{}, got {h}",
                    a.n_h
                )));
            }
            for m in &a.w {
                if m.len() != a.hidden * a.n_x {
                    return Err(Error::ShapeMismatch(format!("LSTM `{id}` W matrix size")));
                }
            }
            for m in &a.u {
                if m.len() != a.hidden * a.n_h {
                    return Err(Error::ShapeMismatch(format!("LSTM `{id}` U matrix size")));
                }
            }
            for v in &a.b {
                if v.len() != a.hidden {
                    return Err(Error::ShapeMismatch(format!("LSTM `{id}` bias size")));
                }
            }
            if a.c_init.len() != a.hidden {
                return Err(Error::ShapeMismatch(format!("LSTM `{id}` c_init size")));
            }
            TensorShape::new(1, 1, a.hidden)
        }
        NodeKind::Flatten => TensorShape::new(1, 1, (ins[0].elems()) as usize),
        NodeKind::Subsample { stride } => {
            if *stride == 0 {
                return Err(Error::ShapeMismatch(format!("subsample `{id}` stride 0")));
            }
            TensorShape::new((ins[0].h - 1) / stride + 1, (ins[0].w - 1) / stride + 1, ins[0].d)
        }
        NodeKind::LstmTail(a) => {
            if a.interleaved {
                if ins[0].h != 1 || ins[0].w != 1 || ins[0].d != 4 * a.hidden {
                    return Err(Error::ShapeMismatch(format!(
                        "LSTM tail `{id}` expects 1x1x{}, got {}",
                        4 * a.hidden,
                        ins[0]
                    )));
                }
            } else {
                for s in ins {
                    if s.h != 1 || s.w != 1 || s.d != a.hidden {
                        return Err(Error::ShapeMismatch(format!(
                            "LSTM tail `{id}` gate input must be 1x1x{}, got {s}",
                            a.hidden
                        )));
                    }
                }
            }
            if a.c_init.len() != a.hidden {
                return Err(Error::ShapeMismatch(format!("LSTM tail `{id}` c_init size")));
            }
            TensorShape::new(1, 1, a.hidden)
        }
    }
}

// ---- convenience constructors (fixtures and passes build a lot of nodes) ----

impl<S: Scalar> Node<S> {
    pub fn conv(id: &str, inputs: &[&str], attrs: ConvAttrs<S>) -> Self {
        Node {
            id: id.to_string(),
            kind: NodeKind::Convolution(attrs),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn single(id: &str, input: &str, kind: NodeKind<S>) -> Self {
        Node { id: id.to_string(), kind, inputs: vec![input.to_string()] }
    }
}

/// Filters of an identity convolution: `depth` one-hot 1x1 filters, filter k
/// selecting input depth k. Reproduces its input exactly.
pub fn identity_conv_attrs<S: Scalar>(depth: usize) -> ConvAttrs<S> {
    let mut weights = vec![S::zero(); depth * depth];
    for k in 0..depth {
        weights[k * depth + k] = S::one();
    }
    ConvAttrs {
        filter_h: 1,
        filter_w: 1,
        out_depth: depth,
        in_depth: depth,
        stride: 1,
        pad: 0,
        weights,
        bias: vec![S::zero(); depth],
        shorten: None,
    }
}
