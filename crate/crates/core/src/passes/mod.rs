//! Graph-to-graph rewrite passes.
//!
//! Every pass is a pure function `Graph -> Graph` that preserves the
//! reference-interpreter semantics of the graph outputs. Passes report what
//! they did in a [`PassReport`]; a pass that finds nothing to rewrite
//! returns the graph unchanged (and is therefore idempotent).
//!
//! [`default_pipeline`] lists the user-selectable optimization passes in
//! dependency order. [`legalize`] runs unconditionally after them: it lowers
//! whatever the instruction set cannot express directly (fully-connected
//! layers, global pooling, element-wise adds, un-fused LSTM cells) onto the
//! convolution + auxiliary-kernel execution model.

mod lstm;
mod mapping;
mod resmodule;
mod shorten;

pub use lstm::{decompose_lstm, fuse_lstm, fused_lstm_matrix};
pub use mapping::{avgpool_to_conv, eltwise_to_conv, fc_to_conv, global_pool_to_window};
pub use resmodule::{convert_type2, convert_type3, merge_resmodule, try_merge_eltwise};
pub use shorten::sparse_shortening;

use serde::Serialize;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Node, NodeKind};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Serialize)]
pub struct PassReport {
    pub pass_name: String,
    pub nodes_before: usize,
    pub nodes_after: usize,
    pub macs_before: u64,
    pub macs_after: u64,
    pub notes: Vec<String>,
}

/// User-selectable optimization passes, in the order the default pipeline
/// runs them.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PassId {
    FcToConv,
    AvgpoolToConv,
    ConvertType2,
    ConvertType3,
    MergeResmodule,
    EltwiseToConv,
    SparseShortening,
    FuseLstm,
}

impl PassId {
    pub const ALL: [PassId; 8] = [
        PassId::FcToConv,
        PassId::AvgpoolToConv,
        PassId::ConvertType2,
        PassId::ConvertType3,
        PassId::MergeResmodule,
        PassId::EltwiseToConv,
        PassId::SparseShortening,
        PassId::FuseLstm,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PassId::FcToConv => "fc_to_conv",
            PassId::AvgpoolToConv => "avgpool_to_conv",
            PassId::ConvertType2 => "convert_type2",
            PassId::ConvertType3 => "convert_type3",
            PassId::MergeResmodule => "merge_resmodule",
            PassId::EltwiseToConv => "eltwise_to_conv",
            PassId::SparseShortening => "sparse_shortening",
            PassId::FuseLstm => "fuse_lstm",
        }
    }

    pub fn from_name(name: &str) -> Option<PassId> {
        PassId::ALL.into_iter().find(|p| p.name() == name)
    }
}

pub fn default_pipeline() -> Vec<PassId> {
    PassId::ALL.to_vec()
}

pub fn run_pass<S: Scalar>(
    g: &Graph<S>,
    pass: PassId,
    arch: &ArchConfig,
) -> Result<(Graph<S>, PassReport)> {
    let before = (g.nodes.len(), g.mac_count()?);
    let (out, mut report) = match pass {
        PassId::FcToConv => fc_to_conv(g)?,
        PassId::AvgpoolToConv => avgpool_to_conv(g)?,
        PassId::ConvertType2 => convert_type2(g)?,
        PassId::ConvertType3 => convert_type3(g)?,
        PassId::MergeResmodule => merge_resmodule(g)?,
        PassId::EltwiseToConv => eltwise_to_conv(g)?,
        PassId::SparseShortening => sparse_shortening(g, arch)?,
        PassId::FuseLstm => fuse_lstm(g)?,
    };
    report.pass_name = pass.name().to_string();
    report.nodes_before = before.0;
    report.macs_before = before.1;
    report.nodes_after = out.nodes.len();
    report.macs_after = out.mac_count()?;
    Ok((out, report))
}

pub fn run_pipeline<S: Scalar>(
    g: &Graph<S>,
    passes: &[PassId],
    arch: &ArchConfig,
) -> Result<(Graph<S>, Vec<PassReport>)> {
    let mut cur = g.clone();
    let mut reports = Vec::with_capacity(passes.len());
    for &p in passes {
        let (next, report) = run_pass(&cur, p, arch)?;
        cur = next;
        reports.push(report);
    }
    Ok((cur, reports))
}

/// Mandatory lowering that runs after the user-selected passes, whatever
/// they were: the backend only knows convolutions, max/avg pooling windows,
/// LRN and the LSTM tail. Anything else still in the graph is rewritten
/// here (less optimally than the dedicated passes, but always correctly).
pub fn legalize<S: Scalar>(g: &Graph<S>, arch: &ArchConfig) -> Result<(Graph<S>, Vec<PassReport>)> {
    let mut cur = g.clone();
    let mut reports = Vec::new();
    let record = |name: &str, r: (Graph<S>, PassReport), reports: &mut Vec<PassReport>| {
        let (next, mut report) = r;
        report.pass_name = format!("legalize_{name}");
        reports.push(report);
        next
    };
    if cur.nodes.values().any(|n| matches!(n.kind, NodeKind::LstmCell(_))) {
        cur = record("decompose_lstm", decompose_lstm(&cur)?, &mut reports);
    }
    cur = record("fc_to_conv", fc_to_conv(&cur)?, &mut reports);
    cur = record("global_pool_to_window", global_pool_to_window(&cur)?, &mut reports);
    cur = record("eltwise_to_conv", eltwise_to_conv(&cur)?, &mut reports);
    let _ = arch;
    Ok((cur, reports))
}

// ------------------------------------------------------------ shared helpers

/// Blank report; `run_pass` fills in the name and counters.
pub(crate) fn report(notes: Vec<String>) -> PassReport {
    PassReport {
        pass_name: String::new(),
        nodes_before: 0,
        nodes_after: 0,
        macs_before: 0,
        macs_after: 0,
        notes,
    }
}

/// Rebuild a graph from an edited node list, revalidating everything.
pub(crate) fn rebuild<S: Scalar>(g: &Graph<S>, nodes: Vec<Node<S>>) -> Result<Graph<S>> {
    Graph::new(nodes, g.outputs.clone(), g.input_shape).map_err(|e| match e {
        // An invariant violated by a rewrite is a bug in the pass, not a
        // schema problem in user input; keep the message but mark it.
        Error::Schema(m) => Error::Schema(format!("pass produced invalid graph: {m}")),
        other => other,
    })
}

/// Derive an id not yet used by any node.
pub(crate) fn unique_id<S: Scalar>(nodes: &[Node<S>], base: String) -> String {
    let mut id = base;
    while nodes.iter().any(|n| n.id == id) {
        id.push('_');
    }
    id
}
