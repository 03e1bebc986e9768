//! Partitioning a legalized graph into subgraphs.
//!
//! A subgraph is the overlay's unit of execution: one pass through the
//! kernel pipeline — stream-buffer reader, PE-array convolution, the
//! configured auxiliary kernel chain, stream-buffer writer — producing
//! exactly one tensor. Every convolution seeds a subgraph; auxiliary ops
//! (ReLU on the PE drain path, pooling, LRN, the LSTM tail) fuse behind it
//! when they are the sole consumer and respect the crossbar chain order.
//! Auxiliary ops that cannot fuse run in bypass subgraphs: the convolution
//! stage passes data through untouched and only the auxiliary kernel works.
//!
//! Pure shape changes (`Flatten`, `Subsample`) never execute anywhere: they
//! are folded into the reader's access pattern as a [`SourceView`].

use indexmap::IndexMap;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeKind, INPUT_ID};
use crate::scalar::Scalar;
use crate::shape::TensorShape;

/// How a subgraph reads one of its source tensors: which stored tensor,
/// and with what spatial subsampling / reshape applied on the fly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SourceView {
    /// Producer node id, or [`INPUT_ID`] for the graph input.
    pub src: String,
    /// Shape of the stored tensor.
    pub src_shape: TensorShape,
    /// Shape the consumer sees after striding/reshape.
    pub view_shape: TensorShape,
    /// Row/column step in source coordinates (1 = dense).
    pub h_stride: usize,
    pub w_stride: usize,
}

impl SourceView {
    pub fn dense(src: &str, shape: TensorShape) -> Self {
        SourceView {
            src: src.to_string(),
            src_shape: shape,
            view_shape: shape,
            h_stride: 1,
            w_stride: 1,
        }
    }
}

/// One executable unit: the op chain, its resolved source views, and which
/// kernels participate.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subgraph {
    /// Zero-padded sequence id; lexicographic order = creation order.
    pub id: String,
    /// Node ids in pipeline order (root first).
    pub ops: Vec<String>,
    /// Convolution node id, or `None` for a bypass subgraph.
    pub conv: Option<String>,
    /// ReLU applied on the PE-array drain path.
    pub relu: bool,
    pub pool: Option<String>,
    pub lrn: Option<String>,
    pub tail: Option<String>,
    /// Source tensors in depth-concatenation order.
    pub inputs: Vec<SourceView>,
    /// Terminal node id; names the tensor this subgraph writes.
    pub output: String,
    pub output_shape: TensorShape,
}

impl Subgraph {
    fn kernel_of<S: Scalar>(&mut self, kind: &NodeKind<S>) -> &mut Option<String> {
        match kind {
            NodeKind::MaxPool(_) | NodeKind::AvgPool(_) => &mut self.pool,
            NodeKind::Lrn(_) => &mut self.lrn,
            NodeKind::LstmTail(_) => &mut self.tail,
            _ => unreachable!("not an auxiliary kernel op"),
        }
    }
}

/// Resolve a producer id through any stack of view nodes to the tensor that
/// is actually stored, composing subsample strides.
fn resolve_view<S: Scalar>(
    g: &Graph<S>,
    shapes: &IndexMap<String, TensorShape>,
    id: &str,
) -> SourceView {
    let view_shape = if id == INPUT_ID { g.input_shape } else { shapes[id] };
    let mut h_stride = 1;
    let mut w_stride = 1;
    let mut cur = id.to_string();
    while cur != INPUT_ID {
        match &g.node(&cur).kind {
            NodeKind::Flatten => cur = g.node(&cur).inputs[0].clone(),
            NodeKind::Subsample { stride } => {
                h_stride *= stride;
                w_stride *= stride;
                cur = g.node(&cur).inputs[0].clone();
            }
            _ => break,
        }
    }
    let src_shape = if cur == INPUT_ID { g.input_shape } else { shapes[cur.as_str()] };
    SourceView { src: cur, src_shape, view_shape, h_stride, w_stride }
}

/// Position of an auxiliary op's kernel in the crossbar chain, or
/// `UnsupportedOp` when the overlay build lacks it.
fn chain_position<S: Scalar>(arch: &ArchConfig, kind: &NodeKind<S>, node_id: &str) -> Result<usize> {
    let kernel = match kind {
        NodeKind::MaxPool(_) | NodeKind::AvgPool(_) => "pool",
        NodeKind::Lrn(_) => "lrn",
        NodeKind::LstmTail(_) => "lstm_tail",
        _ => unreachable!(),
    };
    arch.xbar_kernels
        .iter()
        .position(|k| k == kernel)
        .ok_or_else(|| {
            Error::UnsupportedOp(format!(
                "node `{node_id}` needs the `{kernel}` kernel, absent from this overlay build"
            ))
        })
}

pub fn partition<S: Scalar>(g: &Graph<S>, arch: &ArchConfig) -> Result<Vec<Subgraph>> {
    arch.validate()?;
    let shapes = g.shapes()?;
    let consumers = g.consumers();
    let order = g.topo_order()?;
    let mut absorbed: std::collections::HashSet<String> = std::collections::HashSet::new();
    let mut subgraphs: Vec<Subgraph> = Vec::new();

    for id in &order {
        if absorbed.contains(id) {
            continue;
        }
        let node = &g.nodes[id.as_str()];
        // Views materialize nothing — unless the user asked for one as a
        // graph output, in which case a passthrough subgraph writes it out.
        if node.kind.is_view() && !g.outputs.contains(id) {
            continue;
        }
        let mut sg = Subgraph {
            id: format!("sg{:04}", subgraphs.len()),
            ops: vec![id.clone()],
            conv: None,
            relu: false,
            pool: None,
            lrn: None,
            tail: None,
            inputs: Vec::new(),
            output: id.clone(),
            output_shape: shapes[id.as_str()],
        };
        // Stage index into the crossbar chain reached so far; auxiliary ops
        // must appear in chain order.
        let mut stage: isize = -1;
        match &node.kind {
            NodeKind::Convolution(_) => sg.conv = Some(id.clone()),
            NodeKind::Relu | NodeKind::Identity => {
                sg.relu = matches!(node.kind, NodeKind::Relu);
            }
            NodeKind::Flatten | NodeKind::Subsample { .. } => {
                // Output view: plain passthrough of the resolved view.
            }
            NodeKind::MaxPool(_) | NodeKind::AvgPool(_) | NodeKind::Lrn(_) => {
                stage = chain_position(arch, &node.kind, id)? as isize;
                *sg.kernel_of(&node.kind) = Some(id.clone());
            }
            NodeKind::LstmTail(_) => {
                stage = chain_position(arch, &node.kind, id)? as isize;
                sg.tail = Some(id.clone());
            }
            NodeKind::EltwiseAdd | NodeKind::FullyConnected(_) | NodeKind::LstmCell(_)
            | NodeKind::GlobalAvgPool => {
                return Err(Error::UnsupportedOp(format!(
                    "node `{id}` ({}) reached partitioning; it must be legalized first",
                    node.kind.name()
                )));
            }
        }

        // Greedy chain extension.
        loop {
            let cur = sg.ops.last().unwrap();
            if g.outputs.contains(cur) {
                break; // requested outputs must materialize
            }
            let cons = &consumers[cur.as_str()];
            if cons.len() != 1 {
                break;
            }
            let next = &g.nodes[cons[0].as_str()];
            if next.inputs.len() != 1 {
                break; // joins read from the buffer; cannot stay in-pipe
            }
            match &next.kind {
                NodeKind::Relu if sg.conv.is_some() && !sg.relu && stage < 0 => {
                    sg.relu = true;
                }
                NodeKind::MaxPool(_) | NodeKind::AvgPool(_) | NodeKind::Lrn(_)
                | NodeKind::LstmTail(_) => {
                    let pos = chain_position(arch, &next.kind, &next.id)? as isize;
                    if pos <= stage || sg.kernel_of(&next.kind).is_some() {
                        break;
                    }
                    stage = pos;
                    *sg.kernel_of(&next.kind) = Some(next.id.clone());
                }
                _ => break,
            }
            absorbed.insert(next.id.clone());
            sg.ops.push(next.id.clone());
            sg.output = next.id.clone();
            sg.output_shape = shapes[next.id.as_str()];
        }

        // Resolve source views of the root op.
        for src in &node.inputs {
            sg.inputs.push(resolve_view(g, &shapes, src));
        }
        if node.kind.is_view() {
            // The root itself is the view; read it directly.
            sg.inputs = vec![resolve_view(g, &shapes, id)];
        }
        if sg.inputs.len() > 4 {
            return Err(Error::UnsupportedOp(format!(
                "subgraph rooted at `{id}` reads {} sources; the reader supports 4",
                sg.inputs.len()
            )));
        }
        subgraphs.push(sg);
    }
    // Every auxiliary kernel used anywhere must exist even when standalone
    // (checked above); sanity: ids unique by construction.
    Ok(subgraphs)
}

/// Producing subgraph of every tensor id (subgraph outputs only).
pub fn producer_index(subgraphs: &[Subgraph]) -> IndexMap<String, usize> {
    subgraphs
        .iter()
        .enumerate()
        .map(|(i, sg)| (sg.output.clone(), i))
        .collect()
}
