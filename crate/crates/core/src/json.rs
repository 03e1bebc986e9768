//! On-disk JSON formats: graphs and tensors.
//!
//! The graph schema is strict — an unknown key anywhere is a schema error,
//! as is a missing field or a malformed weight array. The parser inserts an
//! explicit `Flatten` node in front of any `FullyConnected` whose producer is
//! not already a `1x1xN` vector; the serializer drops those nodes again, so
//! a parse → serialize → parse round trip reproduces the graph exactly.
//!
//! Top level:
//! ```json
//! {
//!   "input_shape": {"h": 4, "w": 4, "d": 1},
//!   "nodes": [ {"id": "...", "kind": "...", "inputs": ["..."], "attrs": {...}} ],
//!   "outputs": ["..."]
//! }
//! ```
//!
//! Convolution weights are nested `K x R x S x C` arrays, fully-connected
//! weights nested `N x M`, LSTM gate matrices nested `hidden x N`. All
//! numbers are read as doubles and converted to the graph's scalar type.

use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::graph::{
    ConvAttrs, FcAttrs, Graph, LrnAttrs, LstmAttrs, Node, NodeKind, PoolAttrs, INPUT_ID,
};
use crate::scalar::{from_f64, to_f64, Scalar};
use crate::shape::TensorShape;
use crate::tensor::Tensor;

// ---------------------------------------------------------------- helpers

fn schema(ctx: &str, msg: &str) -> Error {
    Error::Schema(format!("{ctx}: {msg}"))
}

fn as_obj<'a>(v: &'a Value, ctx: &str) -> Result<&'a Map<String, Value>> {
    v.as_object().ok_or_else(|| schema(ctx, "expected an object"))
}

fn as_arr<'a>(v: &'a Value, ctx: &str) -> Result<&'a Vec<Value>> {
    v.as_array().ok_or_else(|| schema(ctx, "expected an array"))
}

fn get<'a>(m: &'a Map<String, Value>, key: &str, ctx: &str) -> Result<&'a Value> {
    m.get(key).ok_or_else(|| schema(ctx, &format!("missing field `{key}`")))
}

fn as_usize(v: &Value, ctx: &str) -> Result<usize> {
    v.as_u64()
        .map(|u| u as usize)
        .ok_or_else(|| schema(ctx, "expected a non-negative integer"))
}

fn as_f64(v: &Value, ctx: &str) -> Result<f64> {
    v.as_f64().ok_or_else(|| schema(ctx, "expected a number"))
}

fn as_str<'a>(v: &'a Value, ctx: &str) -> Result<&'a str> {
    v.as_str().ok_or_else(|| schema(ctx, "expected a string"))
}

fn usize_field(m: &Map<String, Value>, key: &str, ctx: &str) -> Result<usize> {
    as_usize(get(m, key, ctx)?, &format!("{ctx}.{key}"))
}

fn reject_unknown(m: &Map<String, Value>, known: &[&str], ctx: &str) -> Result<()> {
    for key in m.keys() {
        if !known.contains(&key.as_str()) {
            return Err(schema(ctx, &format!("unknown field `{key}`")));
        }
    }
    Ok(())
}

fn number_vec<S: Scalar>(v: &Value, ctx: &str) -> Result<Vec<S>> {
    let arr = as_arr(v, ctx)?;
    arr.iter()
        .enumerate()
        .map(|(i, x)| as_f64(x, &format!("{ctx}[{i}]")).map(from_f64))
        .collect()
}

/// Rectangular 2-D nested array -> (rows, cols, flat row-major data).
fn matrix<S: Scalar>(v: &Value, ctx: &str) -> Result<(usize, usize, Vec<S>)> {
    let rows = as_arr(v, ctx)?;
    if rows.is_empty() {
        return Err(schema(ctx, "matrix has no rows"));
    }
    let mut flat = Vec::new();
    let mut cols = None;
    for (i, row) in rows.iter().enumerate() {
        let r: Vec<S> = number_vec(row, &format!("{ctx}[{i}]"))?;
        match cols {
            None => {
                if r.is_empty() {
                    return Err(schema(ctx, "matrix row is empty"));
                }
                cols = Some(r.len());
            }
            Some(c) if c != r.len() => {
                return Err(schema(ctx, &format!("ragged matrix: row {i} has {} cols", r.len())))
            }
            _ => {}
        }
        flat.extend(r);
    }
    Ok((rows.len(), cols.unwrap(), flat))
}

/// Rectangular 4-D nested array K x R x S x C -> dims + flat data in
/// `[k][r][s][c]` order.
fn tensor4<S: Scalar>(v: &Value, ctx: &str) -> Result<(usize, usize, usize, usize, Vec<S>)> {
    let ks = as_arr(v, ctx)?;
    if ks.is_empty() {
        return Err(schema(ctx, "weights array is empty"));
    }
    let mut dims: Option<(usize, usize, usize)> = None;
    let mut flat = Vec::new();
    for (k, kv) in ks.iter().enumerate() {
        let rs = as_arr(kv, &format!("{ctx}[{k}]"))?;
        for (r, rv) in rs.iter().enumerate() {
            let ss = as_arr(rv, &format!("{ctx}[{k}][{r}]"))?;
            for (s, sv) in ss.iter().enumerate() {
                let cs: Vec<S> = number_vec(sv, &format!("{ctx}[{k}][{r}][{s}]"))?;
                if let Some((dr, ds, dc)) = dims {
                    if rs.len() != dr || ss.len() != ds || cs.len() != dc {
                        return Err(schema(ctx, "ragged 4-D weights array"));
                    }
                } else {
                    if rs.is_empty() || ss.is_empty() || cs.is_empty() {
                        return Err(schema(ctx, "empty dimension in weights array"));
                    }
                    dims = Some((rs.len(), ss.len(), cs.len()));
                }
                flat.extend(cs);
            }
        }
    }
    let (dr, ds, dc) = dims.unwrap();
    Ok((ks.len(), dr, ds, dc, flat))
}

// ---------------------------------------------------------------- parsing

pub fn parse_graph<S: Scalar>(text: &str) -> Result<Graph<S>> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid JSON: {e}")))?;
    let top = as_obj(&root, "graph")?;
    reject_unknown(top, &["input_shape", "nodes", "outputs"], "graph")?;

    let ish = as_obj(get(top, "input_shape", "graph")?, "input_shape")?;
    reject_unknown(ish, &["h", "w", "d"], "input_shape")?;
    let input_shape = TensorShape::new(
        usize_field(ish, "h", "input_shape")?,
        usize_field(ish, "w", "input_shape")?,
        usize_field(ish, "d", "input_shape")?,
    )?;

    let nodes_v = as_arr(get(top, "nodes", "graph")?, "nodes")?;
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(nodes_v.len());
    for (i, nv) in nodes_v.iter().enumerate() {
        nodes.push(parse_node(nv, &format!("nodes[{i}]"))?);
    }

    let outputs: Vec<String> = as_arr(get(top, "outputs", "graph")?, "outputs")?
        .iter()
        .enumerate()
        .map(|(i, v)| as_str(v, &format!("outputs[{i}]")).map(str::to_string))
        .collect::<Result<_>>()?;

    let nodes = insert_flattens(nodes, input_shape)?;
    Graph::new(nodes, outputs, input_shape)
}

fn parse_node<S: Scalar>(v: &Value, ctx: &str) -> Result<Node<S>> {
    let m = as_obj(v, ctx)?;
    reject_unknown(m, &["id", "kind", "inputs", "attrs"], ctx)?;
    let id = as_str(get(m, "id", ctx)?, &format!("{ctx}.id"))?.to_string();
    let kind_name = as_str(get(m, "kind", ctx)?, &format!("{ctx}.kind"))?;
    let inputs: Vec<String> = as_arr(get(m, "inputs", ctx)?, &format!("{ctx}.inputs"))?
        .iter()
        .enumerate()
        .map(|(i, v)| as_str(v, &format!("{ctx}.inputs[{i}]")).map(str::to_string))
        .collect::<Result<_>>()?;

    let empty = Map::new();
    let attrs = match m.get("attrs") {
        Some(a) => as_obj(a, &format!("{ctx}.attrs"))?,
        None => &empty,
    };
    let actx = format!("{ctx}.attrs");

    let kind = match kind_name {
        "Convolution" => {
            reject_unknown(
                attrs,
                &["filter_h", "filter_w", "out_depth", "stride", "pad", "weights", "bias"],
                &actx,
            )?;
            let (k, r, s, c, weights) = tensor4(get(attrs, "weights", &actx)?, &format!("{actx}.weights"))?;
            let filter_h = usize_field(attrs, "filter_h", &actx)?;
            let filter_w = usize_field(attrs, "filter_w", &actx)?;
            let out_depth = usize_field(attrs, "out_depth", &actx)?;
            if (k, r, s) != (out_depth, filter_h, filter_w) {
                return Err(schema(
                    &actx,
                    &format!(
                        "weights array is {k}x{r}x{s}x{c}, expected {out_depth}x{filter_h}x{filter_w}xC"
                    ),
                ));
            }
            NodeKind::Convolution(ConvAttrs {
                filter_h,
                filter_w,
                out_depth,
                in_depth: c,
                stride: usize_field(attrs, "stride", &actx)?,
                pad: usize_field(attrs, "pad", &actx)?,
                weights,
                bias: number_vec(get(attrs, "bias", &actx)?, &format!("{actx}.bias"))?,
                shorten: None,
            })
        }
        "MaxPool" | "AvgPool" => {
            reject_unknown(attrs, &["window_h", "window_w", "stride", "pad"], &actx)?;
            let a = PoolAttrs {
                window_h: usize_field(attrs, "window_h", &actx)?,
                window_w: usize_field(attrs, "window_w", &actx)?,
                stride: usize_field(attrs, "stride", &actx)?,
                pad: match attrs.get("pad") {
                    Some(v) => as_usize(v, &format!("{actx}.pad"))?,
                    None => 0,
                },
            };
            if kind_name == "MaxPool" {
                NodeKind::MaxPool(a)
            } else {
                NodeKind::AvgPool(a)
            }
        }
        "GlobalAvgPool" => {
            reject_unknown(attrs, &[], &actx)?;
            NodeKind::GlobalAvgPool
        }
        "LRN" => {
            reject_unknown(attrs, &["local_size", "alpha", "beta", "k"], &actx)?;
            NodeKind::Lrn(LrnAttrs {
                local_size: usize_field(attrs, "local_size", &actx)?,
                alpha: from_f64(as_f64(get(attrs, "alpha", &actx)?, &format!("{actx}.alpha"))?),
                beta: from_f64(as_f64(get(attrs, "beta", &actx)?, &format!("{actx}.beta"))?),
                k: from_f64(as_f64(get(attrs, "k", &actx)?, &format!("{actx}.k"))?),
            })
        }
        "EltwiseAdd" => {
            reject_unknown(attrs, &[], &actx)?;
            NodeKind::EltwiseAdd
        }
        "FullyConnected" => {
            reject_unknown(attrs, &["weights", "bias"], &actx)?;
            let (n, m_dim, weights) =
                matrix(get(attrs, "weights", &actx)?, &format!("{actx}.weights"))?;
            NodeKind::FullyConnected(FcAttrs {
                in_dim: n,
                out_dim: m_dim,
                weights,
                bias: number_vec(get(attrs, "bias", &actx)?, &format!("{actx}.bias"))?,
            })
        }
        "ReLU" => {
            reject_unknown(attrs, &[], &actx)?;
            NodeKind::Relu
        }
        "LSTMCell" => {
            reject_unknown(
                attrs,
                &[
                    "hidden_size", "w_i", "w_g", "w_f", "w_o", "u_i", "u_g", "u_f", "u_o",
                    "b_i", "b_g", "b_f", "b_o", "c_init",
                ],
                &actx,
            )?;
            let hidden = usize_field(attrs, "hidden_size", &actx)?;
            let gate_matrix = |key: &str| -> Result<(usize, Vec<S>)> {
                let (rows, cols, flat) =
                    matrix(get(attrs, key, &actx)?, &format!("{actx}.{key}"))?;
                if rows != hidden {
                    return Err(schema(
                        &actx,
                        &format!("{key} has {rows} rows, expected hidden_size {hidden}"),
                    ));
                }
                Ok((cols, flat))
            };
            let (n_x, w_i) = gate_matrix("w_i")?;
            let (_, w_g) = gate_matrix("w_g")?;
            let (_, w_f) = gate_matrix("w_f")?;
            let (_, w_o) = gate_matrix("w_o")?;
            let (n_h, u_i) = gate_matrix("u_i")?;
            let (_, u_g) = gate_matrix("u_g")?;
            let (_, u_f) = gate_matrix("u_f")?;
            let (_, u_o) = gate_matrix("u_o")?;
            let bias = |key: &str| number_vec(get(attrs, key, &actx)?, &format!("{actx}.{key}"));
            let c_init = match attrs.get("c_init") {
                Some(v) => number_vec(v, &format!("{actx}.c_init"))?,
                None => vec![S::zero(); hidden],
            };
            NodeKind::LstmCell(LstmAttrs {
                hidden,
                n_x,
                n_h,
                w: [w_i, w_g, w_f, w_o],
                u: [u_i, u_g, u_f, u_o],
                b: [bias("b_i")?, bias("b_g")?, bias("b_f")?, bias("b_o")?],
                c_init,
            })
        }
        "Identity" => {
            reject_unknown(attrs, &[], &actx)?;
            NodeKind::Identity
        }
        other => return Err(schema(ctx, &format!("unknown node kind `{other}`"))),
    };
    Ok(Node { id, kind, inputs })
}

/// Insert a `Flatten` in front of every `FullyConnected` whose producer is
/// not already a `1x1xN` vector. Uses a lenient shape walk (FC accepts any
/// shape with a matching element count) since the strict validator runs
/// afterwards.
fn insert_flattens<S: Scalar>(
    nodes: Vec<Node<S>>,
    input_shape: TensorShape,
) -> Result<Vec<Node<S>>> {
    use indexmap::IndexMap;
    let prelim = Graph {
        nodes: nodes.iter().map(|n| (n.id.clone(), n.clone())).collect(),
        outputs: nodes.last().map(|n| vec![n.id.clone()]).unwrap_or_default(),
        input_shape,
    };
    // Edge resolution errors surface here before the real validation; map
    // missing producers to the same schema error the validator would give.
    for n in &nodes {
        for i in &n.inputs {
            if i != INPUT_ID && !prelim.nodes.contains_key(i) {
                return Err(Error::Schema(format!("node `{}` input `{i}` does not resolve", n.id)));
            }
        }
    }
    let order = prelim.topo_order()?;
    let mut shapes: IndexMap<String, TensorShape> = IndexMap::new();
    let mut needs_flatten: Vec<String> = Vec::new();
    for id in &order {
        let node = &prelim.nodes[id.as_str()];
        let ins: Vec<TensorShape> = node
            .inputs
            .iter()
            .map(|i| {
                if i == INPUT_ID {
                    Ok(input_shape)
                } else {
                    shapes.get(i).copied().ok_or_else(|| {
                        Error::ShapeMismatch(format!("no shape inferred for `{i}`"))
                    })
                }
            })
            .collect::<Result<_>>()?;
        let out = match &node.kind {
            NodeKind::FullyConnected(a) => {
                let s = ins[0];
                if s.h * s.w * s.d == a.in_dim && (s.h != 1 || s.w != 1) {
                    needs_flatten.push(id.clone());
                }
                TensorShape::new(1, 1, a.out_dim)?
            }
            _ => crate::graph::infer_node_shape(node, &ins)?,
        };
        shapes.insert(id.clone(), out);
    }
    if needs_flatten.is_empty() {
        return Ok(nodes);
    }
    let mut out_nodes = Vec::with_capacity(nodes.len() + needs_flatten.len());
    let existing: std::collections::HashSet<String> =
        nodes.iter().map(|n| n.id.clone()).collect();
    for mut node in nodes {
        if needs_flatten.contains(&node.id) {
            let mut fid = format!("{}.flatten", node.id);
            while existing.contains(&fid) {
                fid.push('_');
            }
            out_nodes.push(Node {
                id: fid.clone(),
                kind: NodeKind::Flatten,
                inputs: vec![node.inputs[0].clone()],
            });
            node.inputs = vec![fid];
        }
        out_nodes.push(node);
    }
    Ok(out_nodes)
}

// ------------------------------------------------------------- serializing

pub fn serialize_graph<S: Scalar>(g: &Graph<S>) -> Result<String> {
    // Flatten nodes disappear on disk: consumers are rewired to the
    // producer the flatten reads.
    let resolve = |id: &str| -> Result<String> {
        let mut cur = id.to_string();
        while cur != INPUT_ID {
            match g.nodes.get(&cur) {
                Some(n) if matches!(n.kind, NodeKind::Flatten) => cur = n.inputs[0].clone(),
                _ => break,
            }
        }
        Ok(cur)
    };

    let mut nodes_v = Vec::new();
    for node in g.nodes.values() {
        if matches!(node.kind, NodeKind::Flatten) {
            if g.outputs.contains(&node.id) {
                return Err(Error::Schema(format!(
                    "flatten node `{}` is a graph output and cannot be elided",
                    node.id
                )));
            }
            continue;
        }
        let mut m = Map::new();
        m.insert("id".into(), Value::String(node.id.clone()));
        m.insert("kind".into(), Value::String(kind_tag(&node.kind)?.into()));
        let inputs: Vec<Value> = node
            .inputs
            .iter()
            .map(|i| resolve(i).map(Value::String))
            .collect::<Result<_>>()?;
        m.insert("inputs".into(), Value::Array(inputs));
        m.insert("attrs".into(), Value::Object(attrs_json(&node.kind)));
        nodes_v.push(Value::Object(m));
    }

    let mut top = Map::new();
    let mut ish = Map::new();
    ish.insert("h".into(), Value::from(g.input_shape.h));
    ish.insert("w".into(), Value::from(g.input_shape.w));
    ish.insert("d".into(), Value::from(g.input_shape.d));
    top.insert("input_shape".into(), Value::Object(ish));
    top.insert("nodes".into(), Value::Array(nodes_v));
    top.insert(
        "outputs".into(),
        Value::Array(g.outputs.iter().map(|o| Value::String(o.clone())).collect()),
    );
    serde_json::to_string_pretty(&Value::Object(top))
        .map_err(|e| Error::Schema(format!("serialization failed: {e}")))
}

fn kind_tag<S: Scalar>(kind: &NodeKind<S>) -> Result<&'static str> {
    Ok(match kind {
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
        NodeKind::Flatten | NodeKind::Subsample { .. } | NodeKind::LstmTail(_) => {
            return Err(Error::Schema(format!(
                "node kind `{}` is internal and has no on-disk form",
                kind.name()
            )))
        }
    })
}

fn num<S: Scalar>(v: S) -> Value {
    Value::from(to_f64(v))
}

fn num_arr<S: Scalar>(v: &[S]) -> Value {
    Value::Array(v.iter().map(|x| num(*x)).collect())
}

fn attrs_json<S: Scalar>(kind: &NodeKind<S>) -> Map<String, Value> {
    let mut m = Map::new();
    match kind {
        NodeKind::Convolution(a) => {
            m.insert("filter_h".into(), Value::from(a.filter_h));
            m.insert("filter_w".into(), Value::from(a.filter_w));
            m.insert("out_depth".into(), Value::from(a.out_depth));
            m.insert("stride".into(), Value::from(a.stride));
            m.insert("pad".into(), Value::from(a.pad));
            let mut ks = Vec::with_capacity(a.out_depth);
            for k in 0..a.out_depth {
                let mut rs = Vec::with_capacity(a.filter_h);
                for r in 0..a.filter_h {
                    let mut ss = Vec::with_capacity(a.filter_w);
                    for s in 0..a.filter_w {
                        let base = ((k * a.filter_h + r) * a.filter_w + s) * a.in_depth;
                        ss.push(num_arr(&a.weights[base..base + a.in_depth]));
                    }
                    rs.push(Value::Array(ss));
                }
                ks.push(Value::Array(rs));
            }
            m.insert("weights".into(), Value::Array(ks));
            m.insert("bias".into(), num_arr(&a.bias));
        }
        NodeKind::MaxPool(a) | NodeKind::AvgPool(a) => {
            m.insert("window_h".into(), Value::from(a.window_h));
            m.insert("window_w".into(), Value::from(a.window_w));
            m.insert("stride".into(), Value::from(a.stride));
            m.insert("pad".into(), Value::from(a.pad));
        }
        NodeKind::Lrn(a) => {
            m.insert("local_size".into(), Value::from(a.local_size));
            m.insert("alpha".into(), num(a.alpha));
            m.insert("beta".into(), num(a.beta));
            m.insert("k".into(), num(a.k));
        }
        NodeKind::FullyConnected(a) => {
            let rows: Vec<Value> = (0..a.in_dim)
                .map(|n| num_arr(&a.weights[n * a.out_dim..(n + 1) * a.out_dim]))
                .collect();
            m.insert("weights".into(), Value::Array(rows));
            m.insert("bias".into(), num_arr(&a.bias));
        }
        NodeKind::LstmCell(a) => {
            m.insert("hidden_size".into(), Value::from(a.hidden));
            let mat = |flat: &[S], cols: usize| -> Value {
                Value::Array(
                    (0..a.hidden).map(|j| num_arr(&flat[j * cols..(j + 1) * cols])).collect(),
                )
            };
            for (i, gate) in crate::graph::LSTM_GATES.iter().enumerate() {
                m.insert(format!("w_{gate}"), mat(&a.w[i], a.n_x));
            }
            for (i, gate) in crate::graph::LSTM_GATES.iter().enumerate() {
                m.insert(format!("u_{gate}"), mat(&a.u[i], a.n_h));
            }
            for (i, gate) in crate::graph::LSTM_GATES.iter().enumerate() {
                m.insert(format!("b_{gate}"), num_arr(&a.b[i]));
            }
            if a.c_init.iter().any(|v| *v != S::zero()) {
                m.insert("c_init".into(), num_arr(&a.c_init));
            }
        }
        NodeKind::GlobalAvgPool
        | NodeKind::EltwiseAdd
        | NodeKind::Relu
        | NodeKind::Identity
        | NodeKind::Flatten
        | NodeKind::Subsample { .. }
        | NodeKind::LstmTail(_) => {}
    }
    m
}

// ------------------------------------------------------------------ tensors

pub fn parse_tensor<S: Scalar>(text: &str) -> Result<Tensor<S>> {
    let root: Value =
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("invalid JSON: {e}")))?;
    let top = as_obj(&root, "tensor")?;
    reject_unknown(top, &["shape", "data"], "tensor")?;
    let sh = as_obj(get(top, "shape", "tensor")?, "tensor.shape")?;
    reject_unknown(sh, &["h", "w", "d"], "tensor.shape")?;
    let shape = TensorShape::new(
        usize_field(sh, "h", "tensor.shape")?,
        usize_field(sh, "w", "tensor.shape")?,
        usize_field(sh, "d", "tensor.shape")?,
    )?;
    let data: Vec<S> = number_vec(get(top, "data", "tensor")?, "tensor.data")?;
    Tensor::new(shape, data)
}

pub fn serialize_tensor<S: Scalar>(t: &Tensor<S>) -> String {
    let mut sh = Map::new();
    sh.insert("h".into(), Value::from(t.shape.h));
    sh.insert("w".into(), Value::from(t.shape.w));
    sh.insert("d".into(), Value::from(t.shape.d));
    let mut top = Map::new();
    top.insert("shape".into(), Value::Object(sh));
    top.insert("data".into(), num_arr(&t.data));
    serde_json::to_string_pretty(&Value::Object(top)).expect("tensor serialization")
}
