//! End-to-end compilation driver.
//!
//! Strings the stages together in their one legal order — rewrite passes,
//! mandatory legalization, partitioning, slice planning, scheduling, weight
//! image layout, allocation, lowering, performance modeling — and bundles
//! the artifacts a host needs to run the program: the byte stream, the
//! packed weight image, a manifest of addresses, and a compile report.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::alloc::{allocate, verify, AllocationPlan, Location};
use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, INPUT_ID};
use crate::partition::partition;
use crate::passes::{legalize, run_pipeline, PassId, PassReport};
use crate::scalar::{from_f64, Scalar};
use crate::schedule::schedule;
use crate::shape::TensorShape;
use crate::sim::{execute, model_cycles, PerfReport};
use crate::slicing::{plan, PlanOptions};
use crate::tensor::Tensor;
use crate::vliw::{build_image, emit_program, LowerOptions, Program};
use crate::vliw::registers::TABLE_VERSION;

#[derive(Debug, Clone, PartialEq)]
pub struct CompileOptions {
    /// Optimization passes, in order. Legalization always runs afterwards,
    /// so an empty list still compiles every graph — just less well.
    pub passes: Vec<PassId>,
    /// How many segments ahead filter loads may start: `i - horizon`'s
    /// compute releases segment `i`'s loads. Minimum 1 (double buffering).
    pub prefetch_horizon: usize,
    /// Repurpose idle S lanes as output-pixel lanes on 1x1 convolutions.
    pub one_by_one: bool,
    /// Slice chains of subgraphs as a group when their tensors overflow the
    /// stream buffer, instead of spilling whole tensors.
    pub group_slicing: bool,
}

impl Default for CompileOptions {
    fn default() -> Self {
        CompileOptions {
            passes: crate::passes::default_pipeline(),
            prefetch_horizon: 1,
            one_by_one: true,
            group_slicing: true,
        }
    }
}

/// Pseudo-pass names accepted in a spec alongside the graph rewrites.
const TOGGLE_NAMES: [&str; 2] = ["one_by_one", "group_slicing"];

/// Every name `parse_pass_spec` accepts, for help text and error messages.
pub fn pass_spec_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = PassId::ALL.iter().map(|p| p.name()).collect();
    names.extend(TOGGLE_NAMES);
    names
}

/// Parse a `--passes` spec: `default`, `none`, or a comma-separated list of
/// pass names. The backend toggles `one_by_one` and `group_slicing` are
/// spelled like passes; `default` enables everything, `none` nothing.
pub fn parse_pass_spec(spec: &str) -> Result<CompileOptions> {
    let spec = spec.trim();
    match spec {
        "default" => return Ok(CompileOptions::default()),
        "none" => {
            return Ok(CompileOptions {
                passes: Vec::new(),
                one_by_one: false,
                group_slicing: false,
                ..CompileOptions::default()
            })
        }
        _ => {}
    }
    let mut opts = CompileOptions {
        passes: Vec::new(),
        one_by_one: false,
        group_slicing: false,
        ..CompileOptions::default()
    };
    for token in spec.split(',') {
        let token = token.trim();
        match token {
            "one_by_one" => opts.one_by_one = true,
            "group_slicing" => opts.group_slicing = true,
            _ => match PassId::from_name(token) {
                Some(p) => opts.passes.push(p),
                None => {
                    return Err(Error::Schema(format!(
                        "unknown pass `{token}`; valid passes: {} (or `default` / `none`)",
                        pass_spec_names().join(", ")
                    )))
                }
            },
        }
    }
    Ok(opts)
}

/// One graph output: where the finished tensor sits after the last segment.
/// External addresses are bytes (the allocator's unit); stream offsets too.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSlot {
    pub id: String,
    pub shape: TensorShape,
    pub location: Location,
}

/// One LSTM cell-state writeback: `hidden` elements at external element
/// address `addr` after the program ran.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSlot {
    pub node: String,
    pub addr: u64,
    pub hidden: usize,
}

/// Everything a host needs to stage memory and read results back.
/// `input_addr` and cell addresses are external element indices;
/// `outputs` keep the allocator's byte addressing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub table_version: u32,
    pub bytes_per_element: usize,
    pub prefetch_horizon: usize,
    /// Element count of the packed weight image (the `weights.bin` payload).
    pub image_elems: u64,
    /// Where the host stages the graph input, in external elements.
    pub input_addr: u64,
    pub input_shape: TensorShape,
    pub outputs: Vec<OutputSlot>,
    pub cell_states: Vec<CellSlot>,
}

/// Human- and machine-readable account of one compilation.
#[derive(Debug, Clone, Serialize)]
pub struct CompileReport {
    pub table_version: u32,
    pub passes: Vec<PassReport>,
    pub subgraph_count: usize,
    /// Unit ids in execution order.
    pub schedule_order: Vec<String>,
    /// Peak live tensor bytes under ideal compaction (schedule quality).
    pub schedule_peak_bytes: u64,
    pub allocation: AllocationPlan,
    pub perf: PerfReport,
}

pub struct Compiled {
    pub program: Program,
    /// Packed weights, biases and initial cell states, external elements
    /// `0..image_elems`.
    pub image: Vec<f64>,
    pub manifest: Manifest,
    pub report: CompileReport,
}

pub fn compile_graph<S: Scalar>(
    g: &Graph<S>,
    arch: &ArchConfig,
    opts: &CompileOptions,
) -> Result<Compiled> {
    arch.validate()?;
    g.validate()?;
    let (g, mut pass_reports) = run_pipeline(g, &opts.passes, arch)?;
    let (g, legal_reports) = legalize(&g, arch)?;
    pass_reports.extend(legal_reports);
    let sgs = partition(&g, arch)?;
    let plan = plan(
        &g,
        &sgs,
        arch,
        PlanOptions { group_slicing: opts.group_slicing, group_max_depth: usize::MAX },
    )?;
    let sched = schedule(&plan);
    let layout = build_image(&g, &sgs, &plan)?;
    let bpe = arch.bytes_per_element as u64;
    let mut alloc = allocate(
        &plan,
        &sched,
        &g.outputs,
        arch.stream_buffer_bytes as u64,
        layout.end_elems * bpe,
    );
    // The host stages the input at a fixed external address below the
    // allocator's arena. If the allocator sent the input external, read the
    // staged copy instead of pretending it moved.
    if let Some(p) = alloc.placements.get_mut(INPUT_ID) {
        if let Location::External { address } = &mut p.location {
            *address = layout.input_addr * bpe;
        }
    }
    verify(&alloc, arch.stream_buffer_bytes as u64)?;
    let program = emit_program(
        &g,
        &sgs,
        &plan,
        &sched,
        &alloc,
        &layout,
        arch,
        LowerOptions { one_by_one: opts.one_by_one },
    )?;
    let mut perf = model_cycles(&program, arch, opts.prefetch_horizon)?;
    perf.spillpoint_count = alloc.spillpoint_count;
    let shapes = g.shapes()?;
    let outputs = g
        .outputs
        .iter()
        .map(|id| OutputSlot {
            id: id.clone(),
            shape: shapes[id.as_str()],
            location: alloc.placements[id.as_str()].location,
        })
        .collect();
    let cell_states = layout
        .tails
        .iter()
        .map(|t| CellSlot { node: t.node.clone(), addr: t.c_out_addr, hidden: t.hidden })
        .collect();
    let manifest = Manifest {
        table_version: TABLE_VERSION,
        bytes_per_element: arch.bytes_per_element,
        prefetch_horizon: opts.prefetch_horizon,
        image_elems: layout.input_addr,
        input_addr: layout.input_addr,
        input_shape: g.input_shape,
        outputs,
        cell_states,
    };
    let report = CompileReport {
        table_version: TABLE_VERSION,
        passes: pass_reports,
        subgraph_count: sgs.len(),
        schedule_order: sched.order.iter().map(|&u| sched.unit_ids[u].clone()).collect(),
        schedule_peak_bytes: sched.peak_stream_bytes,
        allocation: alloc,
        perf,
    };
    Ok(Compiled { program, image: layout.image, manifest, report })
}

/// Results of running a compiled program on one input.
pub struct RunOutputs<S: Scalar> {
    /// Graph outputs in declared order.
    pub outputs: Vec<(String, Tensor<S>)>,
    /// Final cell state of each LSTM tail, keyed by graph node id.
    pub cell_states: IndexMap<String, Vec<S>>,
}

/// Stage memory the way the manifest says, execute the program, and read
/// the results back out of machine memory.
pub fn run_compiled<S: Scalar>(
    program: &Program,
    manifest: &Manifest,
    image: &[f64],
    input: &Tensor<S>,
    arch: &ArchConfig,
) -> Result<RunOutputs<S>> {
    if manifest.table_version != TABLE_VERSION {
        return Err(Error::Schema(format!(
            "program was compiled against register table v{}, this build is v{}",
            manifest.table_version, TABLE_VERSION
        )));
    }
    if manifest.bytes_per_element != arch.bytes_per_element {
        return Err(Error::Schema(format!(
            "program modeled {}-byte elements, arch says {}",
            manifest.bytes_per_element, arch.bytes_per_element
        )));
    }
    if image.len() as u64 != manifest.image_elems {
        return Err(Error::Schema(format!(
            "weight image holds {} elements, manifest expects {}",
            image.len(),
            manifest.image_elems
        )));
    }
    if input.shape != manifest.input_shape {
        return Err(Error::ShapeMismatch(format!(
            "program takes {}, input tensor is {}",
            manifest.input_shape, input.shape
        )));
    }
    let mut external = std::collections::HashMap::with_capacity(image.len() + input.data.len());
    for (i, &v) in image.iter().enumerate() {
        external.insert(i as u64, from_f64::<S>(v));
    }
    for (i, &v) in input.data.iter().enumerate() {
        external.insert(manifest.input_addr + i as u64, v);
    }
    let state = execute(program, arch, external)?;
    let bpe = arch.bytes_per_element as u64;
    let elem_base = |unit: &str, addr: u64| -> Result<u64> {
        if addr % bpe != 0 {
            return Err(Error::Overflow(format!("{unit} at byte {addr} is not element-aligned")));
        }
        Ok(addr / bpe)
    };
    let mut outputs = Vec::with_capacity(manifest.outputs.len());
    for slot in &manifest.outputs {
        let n = slot.shape.elems();
        let data: Vec<S> = match slot.location {
            Location::StreamBuffer { offset } => {
                let base = elem_base(&slot.id, offset)?;
                (0..n)
                    .map(|i| {
                        state.stream.get((base + i) as usize).copied().flatten().ok_or_else(
                            || {
                                Error::AddressFault(format!(
                                    "output `{}` element {i} was never written",
                                    slot.id
                                ))
                            },
                        )
                    })
                    .collect::<Result<_>>()?
            }
            Location::External { address } => {
                let base = elem_base(&slot.id, address)?;
                (0..n)
                    .map(|i| {
                        state.external.get(&(base + i)).copied().ok_or_else(|| {
                            Error::AddressFault(format!(
                                "output `{}` element {i} was never written",
                                slot.id
                            ))
                        })
                    })
                    .collect::<Result<_>>()?
            }
        };
        outputs.push((slot.id.clone(), Tensor::new(slot.shape, data)?));
    }
    let mut cell_states = IndexMap::new();
    for slot in &manifest.cell_states {
        let c: Vec<S> = (0..slot.hidden as u64)
            .map(|j| {
                state.external.get(&(slot.addr + j)).copied().ok_or_else(|| {
                    Error::AddressFault(format!(
                        "cell state `{}` element {j} was never written",
                        slot.node
                    ))
                })
            })
            .collect::<Result<_>>()?;
        cell_states.insert(slot.node.clone(), c);
    }
    Ok(RunOutputs { outputs, cell_states })
}
