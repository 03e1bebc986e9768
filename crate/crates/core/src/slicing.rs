//! Slicing: turning subgraphs into bounded-footprint execution steps.
//!
//! A subgraph whose input + output working set exceeds the stream buffer is
//! split into slices along height, width, or depth. Each resulting
//! [`ExecStep`] is one pass through the pipeline with explicit read/write
//! regions, and its footprint is guaranteed to fit. Spatial slices of a
//! windowed op's input overlap by the filter halo and the overlapping rows
//! are refetched; input-depth slices instead accumulate partial sums into
//! the output. Output-depth chunks are driven by the filter cache: a
//! convolution whose filters exceed it runs as several K ranges.
//!
//! Group slicing fuses a chain of sequential sliced convolutions: one slice
//! flows through the whole chain before the next starts, so the chain's
//! intermediate tensors only ever exist as small per-slice entities and
//! never spill to external memory.

use indexmap::IndexMap;
use serde::Serialize;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeKind};
use crate::partition::{producer_index, Subgraph};
use crate::scalar::Scalar;
use crate::shape::{Region, TensorShape};

/// One read the stream-buffer reader performs for a step: a (possibly
/// strided) window of a stored entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepRead {
    pub entity: String,
    /// Window in the entity's own coordinates. `h_len`/`w_len` count the
    /// rows/cols actually read; row `i` of the view is entity row
    /// `h0 + i*h_stride`.
    pub region: Region,
    pub h_stride: usize,
    pub w_stride: usize,
    /// The read came through a `Flatten` view: the depth window addresses the
    /// entity's row-major elements as one flat `(1, 1, elems)` extent, and the
    /// spatial window must be the single pixel `(0, 0)`.
    pub flat: bool,
}

impl StepRead {
    /// Elements streamed into the pipeline.
    pub fn elems(&self) -> u64 {
        (self.region.h_len as u64) * (self.region.w_len as u64) * (self.region.d_len as u64)
    }
}

/// The write a step performs into its output entity.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StepWrite {
    pub entity: String,
    pub region: Region,
    /// Add to existing contents (later input-depth slabs) instead of
    /// overwriting.
    pub accumulate: bool,
    /// Apply ReLU to the accumulated value on the final slab. Unsliced
    /// subgraphs keep ReLU on the PE drain path instead.
    pub relu: bool,
}

/// One pipeline invocation with bounded footprint.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ExecStep {
    pub subgraph: usize,
    pub reads: Vec<StepRead>,
    pub write: StepWrite,
    /// Region of the convolution stage's output computed by this step, in
    /// conv-output coordinates (`d` = the K chunk). `None` for bypass.
    pub conv_out: Option<Region>,
    /// Input-depth window the convolution consumes, in concatenated input
    /// coordinates.
    pub c_slab: (usize, usize),
    /// Zero padding still owed at the top/left of the fed window.
    pub pad_top: usize,
    pub pad_left: usize,
    /// Same, for the fused pooling stage (0 when no pool is fused).
    pub pool_pad_top: usize,
    pub pool_pad_left: usize,
}

/// A stored tensor (or tensor slice) the allocator must place.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct EntityInfo {
    pub shape: TensorShape,
    pub bytes: u64,
    /// Parent tensor id when this entity is one slice of a grouped chain's
    /// intermediate.
    pub slice_of: Option<String>,
}

/// A schedulable unit: one subgraph's steps, or a grouped chain's
/// slice-major interleaving.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Unit {
    /// Equal to the lead subgraph's id; the scheduler's tie-break key.
    pub id: String,
    pub subgraphs: Vec<usize>,
    pub steps: Vec<ExecStep>,
    /// Entities read from outside the unit, in first-use order.
    pub inputs: Vec<String>,
    /// Whole-tensor entity this unit produces.
    pub output: String,
    pub grouped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExecPlan {
    pub units: Vec<Unit>,
    pub entities: IndexMap<String, EntityInfo>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanOptions {
    pub group_slicing: bool,
    /// Maximum subgraphs per group; 1 disables grouping outright.
    pub group_max_depth: usize,
}

impl Default for PlanOptions {
    fn default() -> Self {
        PlanOptions { group_slicing: false, group_max_depth: usize::MAX }
    }
}

/// Plan without group slicing.
pub fn plan_slices<S: Scalar>(
    g: &Graph<S>,
    subgraphs: &[Subgraph],
    arch: &ArchConfig,
) -> Result<ExecPlan> {
    plan(g, subgraphs, arch, PlanOptions::default())
}

/// Plan with group slicing capped at `group_depth` chain members.
/// `group_depth = 1` reduces exactly to [`plan_slices`].
pub fn plan_group_slices<S: Scalar>(
    g: &Graph<S>,
    subgraphs: &[Subgraph],
    arch: &ArchConfig,
    group_depth: usize,
) -> Result<ExecPlan> {
    plan(g, subgraphs, arch, PlanOptions { group_slicing: group_depth > 1, group_max_depth: group_depth })
}

// ---------------------------------------------------------------------------
// Geometry: windowed back-propagation of required regions.

/// One windowed stage along a single axis, listed output-side first.
#[derive(Debug, Clone, Copy)]
struct Stage {
    win: usize,
    stride: usize,
    pad: usize,
    in_extent: usize,
}

impl Stage {
    /// Input window required for output rows `[lo, lo+len)`, clipped to the
    /// input extent.
    fn in_window(&self, lo: usize, len: usize) -> (usize, usize) {
        debug_assert!(len > 0);
        let raw_lo = (lo * self.stride) as isize - self.pad as isize;
        let raw_hi = ((lo + len - 1) * self.stride + self.win) as isize - self.pad as isize;
        let clip_lo = raw_lo.max(0) as usize;
        let clip_hi = (raw_hi.max(1) as usize).min(self.in_extent);
        (clip_lo, clip_hi.saturating_sub(clip_lo).max(1))
    }
}

/// Required windows at every stage boundary: index 0 is the output region
/// itself, index `i` the input window of stage `i-1`.
fn back_prop(stages: &[Stage], lo: usize, len: usize) -> Vec<(usize, usize)> {
    let mut windows = vec![(lo, len)];
    for st in stages {
        let (l, n) = *windows.last().unwrap();
        windows.push(st.in_window(l, n));
    }
    windows
}

/// Per-subgraph axis geometry and depth bookkeeping.
struct SgGeom {
    /// Output→input stages along h and w (pool first if fused, then conv).
    stages_h: Vec<Stage>,
    stages_w: Vec<Stage>,
    /// Index into `back_prop` windows of the conv stage's *output*;
    /// `None` when the subgraph has no convolution.
    conv_window: Option<usize>,
    out_shape: TensorShape,
    /// Depth of the convolution stage's output (0 for bypass).
    conv_depth: usize,
    /// Total concatenated input depth seen by the root op.
    in_depth: usize,
    /// Conv attrs snapshot needed for filter sizing.
    filter_bytes: u64,
    conv_stride: usize,
    conv_pad: usize,
    lrn: bool,
    tail: bool,
    pool: bool,
}

fn conv_filter_bytes<S: Scalar>(g: &Graph<S>, sg: &Subgraph, arch: &ArchConfig, k0: usize, k1: usize) -> u64 {
    let Some(cid) = &sg.conv else { return 0 };
    let NodeKind::Convolution(a) = &g.node(cid).kind else { unreachable!() };
    let mut elems: u64 = 0;
    for k in k0..k1 {
        let reads = match &a.shorten {
            None => a.in_depth,
            Some(si) => si.read_len(k, a.in_depth),
        };
        elems += (reads * a.filter_h * a.filter_w) as u64;
    }
    elems * arch.bytes_per_element as u64
}

fn sg_geom<S: Scalar>(
    g: &Graph<S>,
    sg: &Subgraph,
    shapes: &IndexMap<String, TensorShape>,
    arch: &ArchConfig,
) -> SgGeom {
    let in_h = sg.inputs[0].view_shape.h;
    let in_w = sg.inputs[0].view_shape.w;
    let in_depth: usize = sg.inputs.iter().map(|v| v.view_shape.d).sum();
    let mut stages_h = Vec::new();
    let mut stages_w = Vec::new();
    let mut conv_stride = 1;
    let mut conv_pad = 0;
    let (conv_h, conv_w) = match &sg.conv {
        Some(cid) => {
            let s = shapes[cid.as_str()];
            (s.h, s.w)
        }
        None => (in_h, in_w),
    };
    if let Some(pid) = &sg.pool {
        let (NodeKind::MaxPool(p) | NodeKind::AvgPool(p)) = &g.node(pid).kind else {
            unreachable!()
        };
        stages_h.push(Stage { win: p.window_h, stride: p.stride, pad: p.pad, in_extent: conv_h });
        stages_w.push(Stage { win: p.window_w, stride: p.stride, pad: p.pad, in_extent: conv_w });
    }
    let conv_window = sg.conv.as_ref().map(|cid| {
        let NodeKind::Convolution(a) = &g.node(cid).kind else { unreachable!() };
        conv_stride = a.stride;
        conv_pad = a.pad;
        stages_h.push(Stage { win: a.filter_h, stride: a.stride, pad: a.pad, in_extent: in_h });
        stages_w.push(Stage { win: a.filter_w, stride: a.stride, pad: a.pad, in_extent: in_w });
        stages_h.len() - 1
    });
    SgGeom {
        stages_h,
        stages_w,
        conv_window,
        out_shape: sg.output_shape,
        conv_depth: sg.conv.as_ref().map_or(0, |cid| shapes[cid.as_str()].d),
        in_depth,
        filter_bytes: conv_filter_bytes(g, sg, arch, 0, sg.conv.as_ref().map_or(0, |cid| {
            let NodeKind::Convolution(a) = &g.node(cid).kind else { unreachable!() };
            a.out_depth
        })),
        conv_stride,
        conv_pad,
        lrn: sg.lrn.is_some(),
        tail: sg.tail.is_some(),
        pool: sg.pool.is_some(),
    }
}

// ---------------------------------------------------------------------------
// Per-subgraph slice grid selection.

#[derive(Debug, Clone, PartialEq, Eq)]
struct SliceGrid {
    nh: usize,
    nw: usize,
    /// Input-depth slabs (convolution; accumulating).
    nc: usize,
    /// Output-depth slices (bypass; independent).
    nd: usize,
    /// `(k_start, k_len)` output-depth chunks; `[(0, K)]` when unchunked.
    k_chunks: Vec<(usize, usize)>,
}

impl SliceGrid {
    fn step_count(&self) -> usize {
        self.nh * self.nw * self.nc * self.nd * self.k_chunks.len()
    }
}

fn lcm(a: usize, b: usize) -> usize {
    fn gcd(mut a: usize, mut b: usize) -> usize {
        while b != 0 {
            let t = a % b;
            a = b;
            b = t;
        }
        a
    }
    a / gcd(a, b) * b
}

/// Split the K axis so every chunk's filters fit the cache. Chunks are a
/// multiple of lcm(k_vec, 4) so vector groups and gate quads stay whole.
fn plan_k_chunks<S: Scalar>(
    g: &Graph<S>,
    sg: &Subgraph,
    geom: &SgGeom,
    arch: &ArchConfig,
) -> Result<Vec<(usize, usize)>> {
    let Some(cid) = &sg.conv else { return Ok(vec![(0, geom.out_shape.d)]) };
    let NodeKind::Convolution(a) = &g.node(cid).kind else { unreachable!() };
    let k = a.out_depth;
    let cache = arch.filter_cache_bytes as u64;
    if conv_filter_bytes(g, sg, arch, 0, k) <= cache {
        return Ok(vec![(0, k)]);
    }
    if geom.lrn {
        return Err(Error::Infeasible(format!(
            "filters of `{cid}` exceed the filter cache and its fused LRN needs the full depth"
        )));
    }
    let granule = lcm(arch.k_vec, 4);
    let granules = k.div_ceil(granule);
    'outer: for n in 2..=granules {
        let per = granules.div_ceil(n);
        let mut k0 = 0;
        let mut chunks = Vec::new();
        while k0 < k {
            let k1 = (k0 + per * granule).min(k);
            if conv_filter_bytes(g, sg, arch, k0, k1) > cache {
                continue 'outer;
            }
            chunks.push((k0, k1 - k0));
            k0 = k1;
        }
        return Ok(chunks);
    }
    Err(Error::Infeasible(format!(
        "filters of `{cid}` for a single output-depth group exceed the filter cache"
    )))
}

/// Pipeline footprint in bytes of one step with the given output-region
/// slice and depth windows.
fn step_footprint(
    geom: &SgGeom,
    arch: &ArchConfig,
    oh: (usize, usize),
    ow: (usize, usize),
    c_slab: (usize, usize),
    out_d: usize,
) -> u64 {
    let wh = back_prop(&geom.stages_h, oh.0, oh.1);
    let ww = back_prop(&geom.stages_w, ow.0, ow.1);
    let (in_h, in_w) = (wh.last().unwrap().1, ww.last().unwrap().1);
    let in_bytes = (in_h as u64) * (in_w as u64) * (c_slab.1 as u64) * arch.bytes_per_element as u64;
    let out_bytes = (oh.1 as u64) * (ow.1 as u64) * (out_d as u64) * arch.bytes_per_element as u64;
    in_bytes + out_bytes
}

/// Extra input elements fetched beyond the tensor itself when the output
/// height axis is cut into `nh` pieces (halo recompute cost).
fn axis_overhead(geom: &SgGeom, nh: usize, nw: usize) -> u64 {
    let out = geom.out_shape;
    let mut fetched: u64 = 0;
    for (oh0, ohl) in axis_cuts(out.h, nh) {
        for (ow0, owl) in axis_cuts(out.w, nw) {
            let wh = back_prop(&geom.stages_h, oh0, ohl);
            let ww = back_prop(&geom.stages_w, ow0, owl);
            fetched += (wh.last().unwrap().1 as u64) * (ww.last().unwrap().1 as u64);
        }
    }
    let wh = back_prop(&geom.stages_h, 0, out.h);
    let ww = back_prop(&geom.stages_w, 0, out.w);
    let whole = (wh.last().unwrap().1 as u64) * (ww.last().unwrap().1 as u64);
    fetched.saturating_sub(whole) * geom.in_depth as u64
}

/// Even cuts of `extent` into `n` pieces, front-loaded remainder.
fn axis_cuts(extent: usize, n: usize) -> Vec<(usize, usize)> {
    let n = n.min(extent).max(1);
    let base = extent / n;
    let rem = extent % n;
    let mut cuts = Vec::with_capacity(n);
    let mut lo = 0;
    for i in 0..n {
        let len = base + usize::from(i < rem);
        cuts.push((lo, len));
        lo += len;
    }
    cuts
}

/// Does the whole grid fit? Checks every slice (boundary slices differ).
fn grid_fits(geom: &SgGeom, arch: &ArchConfig, grid: &SliceGrid) -> bool {
    let out = geom.out_shape;
    let max_k = grid.k_chunks.iter().map(|&(_, l)| l).max().unwrap_or(out.d);
    let cap = arch.stream_buffer_bytes as u64;
    for ch in axis_cuts(out.h, grid.nh) {
        for cw in axis_cuts(out.w, grid.nw) {
            for cc in axis_cuts(geom.in_depth, grid.nc) {
                for cd in axis_cuts(out.d, grid.nd) {
                    let out_d = if grid.nd > 1 {
                        cd.1
                    } else if geom.tail {
                        max_k / 4
                    } else {
                        max_k
                    };
                    let slab = if grid.nc > 1 { cc } else { (0, geom.in_depth) };
                    // Bypass depth slices read the matching input depth.
                    let c = if grid.nd > 1 { cd } else { slab };
                    if step_footprint(geom, arch, ch, cw, c, out_d) > cap {
                        return false;
                    }
                }
            }
        }
    }
    true
}

/// Choose the slice grid: minimal slice count along a single axis, lowest
/// overhead among feasible axes, ties broken height → width → depth.
fn choose_grid<S: Scalar>(
    g: &Graph<S>,
    sg: &Subgraph,
    geom: &SgGeom,
    arch: &ArchConfig,
) -> Result<SliceGrid> {
    let k_chunks = plan_k_chunks(g, sg, geom, arch)?;
    let base = SliceGrid { nh: 1, nw: 1, nc: 1, nd: 1, k_chunks };
    if grid_fits(geom, arch, &base) {
        return Ok(base);
    }
    let out = geom.out_shape;
    // A convolution can slab its input depth (accumulating); a bypass chain
    // without depth-mixing kernels can slice output depth freely.
    let conv_slab_ok = sg.conv.is_some()
        && !geom.pool
        && !geom.lrn
        && !geom.tail
        && {
            let NodeKind::Convolution(a) = &g.node(sg.conv.as_ref().unwrap()).kind else {
                unreachable!()
            };
            a.shorten.is_none() && a.in_depth > 1
        };
    let bypass_d_ok = sg.conv.is_none() && !geom.lrn && !geom.tail && out.d > 1;

    let mut candidates: Vec<(u64, usize, SliceGrid)> = Vec::new();
    if let Some(nh) = (2..=out.h).find(|&nh| grid_fits(geom, arch, &SliceGrid { nh, ..base.clone() })) {
        let grid = SliceGrid { nh, ..base.clone() };
        candidates.push((axis_overhead(geom, nh, 1), 0, grid));
    }
    if let Some(nw) = (2..=out.w).find(|&nw| grid_fits(geom, arch, &SliceGrid { nw, ..base.clone() })) {
        let grid = SliceGrid { nw, ..base.clone() };
        candidates.push((axis_overhead(geom, 1, nw), 1, grid));
    }
    if conv_slab_ok {
        if let Some(nc) =
            (2..=geom.in_depth).find(|&nc| grid_fits(geom, arch, &SliceGrid { nc, ..base.clone() }))
        {
            let grid = SliceGrid { nc, ..base.clone() };
            let overhead = (nc as u64 - 1) * out.elems();
            candidates.push((overhead, 2, grid));
        }
    }
    if bypass_d_ok {
        if let Some(nd) = (2..=out.d).find(|&nd| grid_fits(geom, arch, &SliceGrid { nd, ..base.clone() })) {
            let grid = SliceGrid { nd, ..base.clone() };
            candidates.push((0, 2, grid));
        }
    }
    if let Some((_, _, grid)) = candidates.into_iter().min_by_key(|(ov, ax, _)| (*ov, *ax)) {
        return Ok(grid);
    }
    // No single axis suffices — stack them in priority order.
    let mut grid = SliceGrid { nh: out.h, ..base.clone() };
    if !grid_fits(geom, arch, &grid) {
        if let Some(nw) = (2..=out.w).find(|&nw| grid_fits(geom, arch, &SliceGrid { nw, ..grid.clone() })) {
            grid.nw = nw;
        } else {
            grid.nw = out.w;
        }
    }
    if !grid_fits(geom, arch, &grid) && conv_slab_ok {
        if let Some(nc) =
            (2..=geom.in_depth).find(|&nc| grid_fits(geom, arch, &SliceGrid { nc, ..grid.clone() }))
        {
            grid.nc = nc;
        }
    }
    if !grid_fits(geom, arch, &grid) && bypass_d_ok {
        if let Some(nd) = (2..=out.d).find(|&nd| grid_fits(geom, arch, &SliceGrid { nd, ..grid.clone() })) {
            grid.nd = nd;
        }
    }
    if grid_fits(geom, arch, &grid) {
        Ok(grid)
    } else {
        Err(Error::Infeasible(format!(
            "subgraph `{}`: even a unit slice exceeds the stream buffer",
            sg.id
        )))
    }
}

// ---------------------------------------------------------------------------
// Step emission.

/// Reads of the root op's sources for the given input window and
/// concatenated-depth range.
fn emit_reads(
    sg: &Subgraph,
    in_h: (usize, usize),
    in_w: (usize, usize),
    c_range: (usize, usize),
) -> Vec<StepRead> {
    let mut reads = Vec::new();
    let mut base = 0usize;
    for view in &sg.inputs {
        let d = view.view_shape.d;
        let lo = c_range.0.max(base);
        let hi = (c_range.0 + c_range.1).min(base + d);
        if lo < hi {
            reads.push(StepRead {
                entity: view.src.clone(),
                region: Region {
                    h0: in_h.0 * view.h_stride,
                    h_len: in_h.1,
                    w0: in_w.0 * view.w_stride,
                    w_len: in_w.1,
                    d0: lo - base,
                    d_len: hi - lo,
                },
                h_stride: view.h_stride,
                w_stride: view.w_stride,
                flat: view.view_shape.d != view.src_shape.d,
            });
        }
        base += d;
    }
    reads
}

/// All steps of one subgraph under `grid`, in h → w → k → c order.
fn emit_simple_steps(sg_index: usize, sg: &Subgraph, geom: &SgGeom, grid: &SliceGrid) -> Vec<ExecStep> {
    let out = geom.out_shape;
    let mut steps = Vec::new();
    for (oh0, ohl) in axis_cuts(out.h, grid.nh) {
        for (ow0, owl) in axis_cuts(out.w, grid.nw) {
            let wh = back_prop(&geom.stages_h, oh0, ohl);
            let ww = back_prop(&geom.stages_w, ow0, owl);
            let in_h = *wh.last().unwrap();
            let in_w = *ww.last().unwrap();
            let conv_out_hw = geom.conv_window.map(|i| (wh[i], ww[i]));
            let (pad_top, pad_left) = match conv_out_hw {
                Some(((ch0, _), (cw0, _))) => (
                    geom.conv_pad.saturating_sub(ch0 * geom.conv_stride),
                    geom.conv_pad.saturating_sub(cw0 * geom.conv_stride),
                ),
                None => (0, 0),
            };
            let (pool_pad_top, pool_pad_left) = if geom.pool {
                (
                    geom.stages_h[0].pad.saturating_sub(oh0 * geom.stages_h[0].stride),
                    geom.stages_w[0].pad.saturating_sub(ow0 * geom.stages_w[0].stride),
                )
            } else {
                (0, 0)
            };
            for &(k0, klen) in &grid.k_chunks {
                let c_cuts = if grid.nc > 1 {
                    axis_cuts(geom.in_depth, grid.nc)
                } else {
                    vec![(0, geom.in_depth)]
                };
                let d_cuts = if grid.nd > 1 { axis_cuts(out.d, grid.nd) } else { vec![(0, out.d)] };
                for &(d0, dlen) in &d_cuts {
                    for (ci, &(c0, clen)) in c_cuts.iter().enumerate() {
                        let read_c = if grid.nd > 1 { (d0, dlen) } else { (c0, clen) };
                        // An LSTM tail collapses each gate quad to one output
                        // depth, so a K chunk lands at a quarter of its range.
                        let write_d = match (&sg.conv, &sg.tail) {
                            (Some(_), Some(_)) => (k0 / 4, klen / 4),
                            (Some(_), None) => (k0, klen),
                            (None, _) => (d0, dlen),
                        };
                        let last_slab = ci + 1 == c_cuts.len();
                        steps.push(ExecStep {
                            subgraph: sg_index,
                            reads: emit_reads(sg, in_h, in_w, read_c),
                            write: StepWrite {
                                entity: sg.output.clone(),
                                region: Region {
                                    h0: oh0,
                                    h_len: ohl,
                                    w0: ow0,
                                    w_len: owl,
                                    d0: write_d.0,
                                    d_len: write_d.1,
                                },
                                accumulate: ci > 0,
                                relu: sg.relu && grid.nc > 1 && last_slab,
                            },
                            conv_out: conv_out_hw.map(|((ch0, chl), (cw0, cwl))| Region {
                                h0: ch0,
                                h_len: chl,
                                w0: cw0,
                                w_len: cwl,
                                d0: k0,
                                d_len: klen,
                            }),
                            c_slab: (c0, clen),
                            pad_top,
                            pad_left,
                            pool_pad_top,
                            pool_pad_left,
                        });
                    }
                }
            }
        }
    }
    steps
}

// ---------------------------------------------------------------------------
// Group slicing.

/// Per-member windows of one group slice, output member last.
struct GroupSlice {
    /// For each member: (out_h window, conv_out_h window, in_view_h window).
    member_h: Vec<((usize, usize), Option<(usize, usize)>, (usize, usize))>,
}

/// Back-propagate one final-output row window through the chain.
fn group_slice_windows(
    members: &[usize],
    geoms: &IndexMap<usize, SgGeom>,
    sgs: &[Subgraph],
    oh: (usize, usize),
) -> GroupSlice {
    let mut member_h = vec![((0, 0), None, (0, 0)); members.len()];
    let mut need = oh;
    for (i, &m) in members.iter().enumerate().rev() {
        let geom = &geoms[&m];
        let wh = back_prop(&geom.stages_h, need.0, need.1);
        let in_h = *wh.last().unwrap();
        let conv_h = geom.conv_window.map(|ix| wh[ix]);
        member_h[i] = (need, conv_h, in_h);
        if i > 0 {
            // Translate the view window into producer-output rows,
            // honouring any subsampling between members.
            let stride = sgs[m].inputs[0].h_stride;
            let lo = in_h.0 * stride;
            let hi = (in_h.0 + in_h.1 - 1) * stride + 1;
            need = (lo, hi - lo);
        }
    }
    GroupSlice { member_h }
}

/// Peak stream bytes occupied by a group slice's intermediate slabs: while
/// member `j` runs, its predecessor's slab is still being read and its own
/// is being written. The final member writes the whole output entity, which
/// is not charged here — it may legitimately fall back to external memory.
fn group_slab_peak(
    members: &[usize],
    geoms: &IndexMap<usize, SgGeom>,
    gs: &GroupSlice,
    arch: &ArchConfig,
) -> u64 {
    let bpe = arch.bytes_per_element as u64;
    let slab = |i: usize| -> u64 {
        let out = geoms[&members[i]].out_shape;
        (gs.member_h[i].0 .1 as u64) * (out.w as u64) * (out.d as u64) * bpe
    };
    let last = members.len() - 1;
    (0..last)
        .map(|j| slab(j) + if j + 1 < last { slab(j + 1) } else { 0 })
        .max()
        .unwrap_or(0)
}

/// Greedily extend a chain starting at `start` while members stay sliceable
/// together and their combined filters fit the cache.
fn extend_chain(
    start: usize,
    sgs: &[Subgraph],
    geoms: &IndexMap<usize, SgGeom>,
    grids: &IndexMap<usize, SliceGrid>,
    next_of: &IndexMap<usize, Option<usize>>,
    arch: &ArchConfig,
    max_depth: usize,
) -> (Vec<usize>, usize) {
    let mut members = vec![start];
    let mut filter_bytes = geoms[&start].filter_bytes;
    let mut best: Option<(Vec<usize>, usize)> = None;
    loop {
        if members.len() >= 2 {
            if let Some(n) = group_slice_count(&members, geoms, sgs, arch) {
                best = Some((members.clone(), n));
            } else {
                members.pop();
                break;
            }
        }
        if members.len() >= max_depth {
            break;
        }
        let Some(next) = next_of[members.last().unwrap()] else { break };
        if grids[&next].step_count() == 1 || sgs[next].conv.is_none() {
            break;
        }
        let fb = geoms[&next].filter_bytes;
        if filter_bytes + fb > arch.filter_cache_bytes as u64 {
            break;
        }
        filter_bytes += fb;
        members.push(next);
    }
    best.unwrap_or((vec![start], 0))
}

/// Minimal slice count along the final output height for which the group's
/// stream-resident working set fits the buffer, or `None`.
///
/// The chain input is read slice by slice, so when it lives in the stream
/// buffer it stays live until the last slice — its whole size is charged on
/// top of the flowing slabs. When the input cannot fit the buffer even
/// alone, the allocator is bound to place it external, so only the slabs
/// need internal space. In between — input resident but no slice count
/// leaves room for the slabs — grouping would just force the slabs external
/// and buy nothing, so decline and let per-subgraph slicing handle it.
fn group_slice_count(
    members: &[usize],
    geoms: &IndexMap<usize, SgGeom>,
    sgs: &[Subgraph],
    arch: &ArchConfig,
) -> Option<usize> {
    let buffer = arch.stream_buffer_bytes as u64;
    let bpe = arch.bytes_per_element as u64;
    let whole_inputs: u64 = sgs[members[0]]
        .inputs
        .iter()
        .map(|v| v.src_shape.elems() as u64 * bpe)
        .sum();
    let budget = if whole_inputs <= buffer { buffer - whole_inputs } else { buffer };
    let out_h = geoms[members.last().unwrap()].out_shape.h;
    (2..=out_h).find(|&n| {
        axis_cuts(out_h, n).into_iter().all(|cut| {
            let gs = group_slice_windows(members, geoms, sgs, cut);
            group_slab_peak(members, geoms, &gs, arch) <= budget
        })
    })
}

// ---------------------------------------------------------------------------
// The planner.

pub fn plan<S: Scalar>(
    g: &Graph<S>,
    subgraphs: &[Subgraph],
    arch: &ArchConfig,
    opts: PlanOptions,
) -> Result<ExecPlan> {
    arch.validate()?;
    let shapes = g.shapes()?;
    let producers = producer_index(subgraphs);
    let mut geoms: IndexMap<usize, SgGeom> = IndexMap::new();
    let mut grids: IndexMap<usize, SliceGrid> = IndexMap::new();
    for (i, sg) in subgraphs.iter().enumerate() {
        let geom = sg_geom(g, sg, &shapes, arch);
        let grid = choose_grid(g, sg, &geom, arch)?;
        geoms.insert(i, geom);
        grids.insert(i, grid);
    }

    // Linear successor of each subgraph: the unique consumer that reads the
    // whole output as its sole input, provided the output is not demanded
    // elsewhere.
    let mut consumer_count: IndexMap<usize, usize> = (0..subgraphs.len()).map(|i| (i, 0)).collect();
    let mut sole_reader: IndexMap<usize, Option<usize>> =
        (0..subgraphs.len()).map(|i| (i, None)).collect();
    for (j, sg) in subgraphs.iter().enumerate() {
        for view in &sg.inputs {
            if let Some(&p) = producers.get(&view.src) {
                consumer_count[&p] += 1;
                sole_reader[&p] = Some(j);
            }
        }
    }
    let next_of: IndexMap<usize, Option<usize>> = (0..subgraphs.len())
        .map(|i| {
            let sg = &subgraphs[i];
            let next = match (consumer_count[&i], sole_reader[&i]) {
                (1, Some(j)) => {
                    let cand = &subgraphs[j];
                    let linear = cand.inputs.len() == 1
                        && cand.inputs[0].src == sg.output
                        && !g.outputs.contains(&sg.output);
                    if linear { Some(j) } else { None }
                }
                _ => None,
            };
            (i, next)
        })
        .collect();

    let mut entities: IndexMap<String, EntityInfo> = IndexMap::new();
    entities.insert(
        crate::graph::INPUT_ID.to_string(),
        EntityInfo {
            shape: g.input_shape,
            bytes: g.input_shape.elems() * arch.bytes_per_element as u64,
            slice_of: None,
        },
    );

    let mut units: Vec<Unit> = Vec::new();
    let mut consumed = vec![false; subgraphs.len()];
    for i in 0..subgraphs.len() {
        if consumed[i] {
            continue;
        }
        let groupable = opts.group_slicing
            && grids[&i].step_count() > 1
            && subgraphs[i].conv.is_some()
            && grids[&i].k_chunks.len() == 1;
        let (members, n_slices) = if groupable {
            extend_chain(i, subgraphs, &geoms, &grids, &next_of, arch, opts.group_max_depth)
        } else {
            (vec![i], 0)
        };
        if members.len() >= 2 {
            let unit = emit_group_unit(&members, n_slices, subgraphs, &geoms, arch, &mut entities)?;
            for &m in &members {
                consumed[m] = true;
            }
            units.push(unit);
        } else {
            let sg = &subgraphs[i];
            let steps = emit_simple_steps(i, sg, &geoms[&i], &grids[&i]);
            let mut inputs: Vec<String> = Vec::new();
            for st in &steps {
                for r in &st.reads {
                    if !inputs.contains(&r.entity) {
                        inputs.push(r.entity.clone());
                    }
                }
            }
            entities.insert(
                sg.output.clone(),
                EntityInfo {
                    shape: sg.output_shape,
                    bytes: sg.output_shape.elems() * arch.bytes_per_element as u64,
                    slice_of: None,
                },
            );
            units.push(Unit {
                id: sg.id.clone(),
                subgraphs: vec![i],
                steps,
                inputs,
                output: sg.output.clone(),
                grouped: false,
            });
            consumed[i] = true;
        }
    }
    Ok(ExecPlan { units, entities })
}

/// Slice-major steps for one grouped chain.
fn emit_group_unit(
    members: &[usize],
    n_slices: usize,
    sgs: &[Subgraph],
    geoms: &IndexMap<usize, SgGeom>,
    arch: &ArchConfig,
    entities: &mut IndexMap<String, EntityInfo>,
) -> Result<Unit> {
    let last = *members.last().unwrap();
    let final_out_h = geoms[&last].out_shape.h;
    let lead = &sgs[members[0]];
    let mut steps = Vec::new();
    let mut inputs: Vec<String> = Vec::new();
    for (s, cut) in axis_cuts(final_out_h, n_slices).into_iter().enumerate() {
        let gs = group_slice_windows(members, geoms, sgs, cut);
        // Entity row base of each member's per-slice input, computed while
        // walking the chain forward.
        for (mi, &m) in members.iter().enumerate() {
            let sg = &sgs[m];
            let geom = &geoms[&m];
            let (out_h, conv_h, in_h) = gs.member_h[mi];
            let out_shape = geom.out_shape;
            let (pad_top, pad_left) = match conv_h {
                Some((ch0, _)) => (
                    geom.conv_pad.saturating_sub(ch0 * geom.conv_stride),
                    geom.conv_pad,
                ),
                None => (0, 0),
            };
            let (pool_pad_top, pool_pad_left) = if geom.pool {
                (
                    geom.stages_h[0].pad.saturating_sub(out_h.0 * geom.stages_h[0].stride),
                    geom.stages_w[0].pad,
                )
            } else {
                (0, 0)
            };
            let view = &sg.inputs[0];
            let read = if mi == 0 {
                if !inputs.contains(&view.src) {
                    inputs.push(view.src.clone());
                }
                StepRead {
                    entity: view.src.clone(),
                    region: Region {
                        h0: in_h.0 * view.h_stride,
                        h_len: in_h.1,
                        w0: 0,
                        w_len: view.view_shape.w,
                        d0: 0,
                        d_len: view.view_shape.d,
                    },
                    h_stride: view.h_stride,
                    w_stride: view.w_stride,
                    flat: view.view_shape.d != view.src_shape.d,
                }
            } else {
                // Per-slice entity stores producer rows
                // [in_h.0*stride, (in_h.0+in_h.1-1)*stride + 1).
                let prev = &sgs[members[mi - 1]];
                let entity = format!("{}@{s}", prev.output);
                StepRead {
                    entity,
                    region: Region {
                        h0: 0,
                        h_len: in_h.1,
                        w0: 0,
                        w_len: view.view_shape.w,
                        d0: 0,
                        d_len: view.view_shape.d,
                    },
                    h_stride: view.h_stride,
                    w_stride: view.w_stride,
                    flat: false,
                }
            };
            let is_last = mi + 1 == members.len();
            let write = if is_last {
                StepWrite {
                    entity: sg.output.clone(),
                    region: Region {
                        h0: out_h.0,
                        h_len: out_h.1,
                        w0: 0,
                        w_len: out_shape.w,
                        d0: 0,
                        d_len: out_shape.d,
                    },
                    accumulate: false,
                    relu: false,
                }
            } else {
                let entity = format!("{}@{s}", sg.output);
                let shape = TensorShape::new(out_h.1, out_shape.w, out_shape.d)?;
                entities.insert(
                    entity.clone(),
                    EntityInfo {
                        shape,
                        bytes: shape.elems() * arch.bytes_per_element as u64,
                        slice_of: Some(sg.output.clone()),
                    },
                );
                StepWrite {
                    entity,
                    region: Region {
                        h0: 0,
                        h_len: out_h.1,
                        w0: 0,
                        w_len: out_shape.w,
                        d0: 0,
                        d_len: out_shape.d,
                    },
                    accumulate: false,
                    relu: false,
                }
            };
            let conv_out = conv_h.map(|(ch0, chl)| {
                let ww = back_prop(&geom.stages_w, 0, out_shape.w);
                let (cw0, cwl) = ww[geom.conv_window.unwrap()];
                Region { h0: ch0, h_len: chl, w0: cw0, w_len: cwl, d0: 0, d_len: geom.conv_depth }
            });
            steps.push(ExecStep {
                subgraph: m,
                reads: vec![read],
                write,
                conv_out,
                c_slab: (0, geom.in_depth),
                pad_top,
                pad_left,
                pool_pad_top,
                pool_pad_left,
            });
        }
    }
    let last_sg = &sgs[last];
    entities.insert(
        last_sg.output.clone(),
        EntityInfo {
            shape: last_sg.output_shape,
            bytes: last_sg.output_shape.elems() * arch.bytes_per_element as u64,
            slice_of: None,
        },
    );
    Ok(Unit {
        id: lead.id.clone(),
        subgraphs: members.to_vec(),
        steps,
        inputs,
        output: last_sg.output.clone(),
        grouped: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{ConvAttrs, Node, INPUT_ID};
    use crate::partition::partition;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch(buffer: usize, cache: usize) -> ArchConfig {
        ArchConfig {
            q_vec: 4,
            p_vec: 2,
            c_vec: 4,
            k_vec: 8,
            s_vec: 1,
            stream_buffer_bytes: buffer,
            filter_cache_bytes: cache,
            bytes_per_element: 4,
            ext_bandwidth_bytes_per_cycle: 16.0,
            freq_mhz: 300.0,
            xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
        }
    }

    fn conv_node(
        id: &str,
        input: &str,
        f: usize,
        cin: usize,
        cout: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Node<f64> {
        Node::conv(
            id,
            &[input],
            ConvAttrs {
                filter_h: f,
                filter_w: f,
                out_depth: cout,
                in_depth: cin,
                stride,
                pad,
                weights: (0..cout * f * f * cin).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                bias: vec![0.0; cout],
                shorten: None,
            },
        )
    }

    fn single_conv(
        h: usize,
        w: usize,
        f: usize,
        cin: usize,
        cout: usize,
        pad: usize,
    ) -> (Graph<f64>, Vec<Subgraph>) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = Graph::new(
            vec![conv_node("c", INPUT_ID, f, cin, cout, 1, pad, &mut rng)],
            vec!["c".into()],
            TensorShape::new(h, w, cin).unwrap(),
        )
        .unwrap();
        let sgs = partition(&g, &arch(1 << 20, 1 << 20)).unwrap();
        (g, sgs)
    }

    #[test]
    fn fitting_tensor_is_one_step_with_full_regions() {
        let (g, sgs) = single_conv(8, 8, 3, 2, 2, 1);
        let a = arch(1 << 20, 1 << 20);
        let plan = plan_slices(&g, &sgs, &a).unwrap();
        assert_eq!(plan.units.len(), 1);
        let u = &plan.units[0];
        assert_eq!(u.steps.len(), 1);
        assert_eq!(u.steps[0].reads[0].region, Region::full(g.input_shape));
        assert_eq!(
            u.steps[0].write.region,
            Region::full(TensorShape::new(8, 8, 2).unwrap())
        );
        assert_eq!(u.inputs, vec![INPUT_ID.to_string()]);
    }

    #[test]
    fn unit_filter_conv_slices_without_overlap() {
        // 1x1 filter: input 32x32x4 f64->f32 bytes: 32*32*4*4 = 16 KiB;
        // buffer 12 KiB forces height slicing, and slices must not overlap.
        let (g, sgs) = single_conv(32, 32, 1, 4, 4, 0);
        let a = arch(12 << 10, 1 << 20);
        let plan = plan_slices(&g, &sgs, &a).unwrap();
        let steps = &plan.units[0].steps;
        assert!(steps.len() >= 2);
        let mut covered = 0;
        for (i, st) in steps.iter().enumerate() {
            let r = &st.reads[0].region;
            assert_eq!(r.h0, covered, "step {i} refetches rows");
            covered += r.h_len;
        }
        assert_eq!(covered, 32, "input rows fetched exactly once");
    }

    #[test]
    fn three_by_three_halo_overhead_is_two_rows_per_cut() {
        // 10x4x1 input, 3x3 filter, pad 0 -> out 8x2x1. Sliced in two, each
        // half fetches 6 input rows: 12 total vs 10 = 2 extra rows.
        let (g, sgs) = single_conv(10, 4, 3, 1, 1, 0);
        // footprint unsliced: in 10*4*1*4 + out 8*2*1*4 = 224; force 2 slices.
        let a = arch(200, 1 << 20);
        let plan = plan_slices(&g, &sgs, &a).unwrap();
        let steps = &plan.units[0].steps;
        assert_eq!(steps.len(), 2);
        let fetched: usize = steps.iter().map(|s| s.reads[0].region.h_len).sum();
        assert_eq!(fetched, 12, "each slice carries its 3x3 halo");
        assert_eq!(steps[0].reads[0].region, Region { h0: 0, h_len: 6, w0: 0, w_len: 4, d0: 0, d_len: 1 });
        assert_eq!(steps[1].reads[0].region, Region { h0: 4, h_len: 6, w0: 0, w_len: 4, d0: 0, d_len: 1 });
        // Writes tile the output exactly.
        assert_eq!(steps[0].write.region.h_len + steps[1].write.region.h_len, 8);
    }

    #[test]
    fn depth_slabs_accumulate_for_vector_like_conv() {
        // 1x1 spatial input with big depth: h/w cannot slice, so the input
        // depth is slabbed and partial sums accumulate.
        let (g, sgs) = single_conv(1, 1, 1, 4096, 64, 0);
        // in 4096*4 = 16 KiB, out 256 B; buffer 8 KiB forces >= 3 slabs.
        let a = arch(8 << 10, 1 << 20);
        let plan = plan_slices(&g, &sgs, &a).unwrap();
        let steps = &plan.units[0].steps;
        assert!(steps.len() >= 2, "expected depth slabs, got {}", steps.len());
        assert!(!steps[0].write.accumulate);
        for st in &steps[1..] {
            assert!(st.write.accumulate);
            assert_eq!(st.write.region.d_len, 64, "every slab rewrites the full output");
        }
        let total_c: usize = steps.iter().map(|s| s.c_slab.1).sum();
        assert_eq!(total_c, 4096);
        let slabs: Vec<_> = steps.iter().map(|s| s.c_slab).collect();
        assert_eq!(slabs[0].0, 0);
        for w in slabs.windows(2) {
            assert_eq!(w[0].0 + w[0].1, w[1].0, "slabs tile the input depth");
        }
    }

    #[test]
    fn filter_cache_splits_output_depth_into_quad_aligned_chunks() {
        // 3x3x64 filters for 64 outputs: 64*9*64*4 = 147456 B; cache 64 KiB
        // forces chunking; chunks stay multiples of lcm(k_vec=8, 4) = 8.
        let (g, sgs) = single_conv(8, 8, 3, 64, 64, 1);
        let a = arch(1 << 20, 64 << 10);
        let plan = plan_slices(&g, &sgs, &a).unwrap();
        let steps = &plan.units[0].steps;
        assert!(steps.len() >= 3);
        let mut k_cover = 0;
        for st in steps {
            let d = st.write.region;
            assert_eq!(d.d0, k_cover);
            assert!(st.conv_out.unwrap().d_len % 8 == 0 || d.d0 + d.d_len == 64);
            k_cover += d.d_len;
            // 9 * 64 * chunk * 4 bytes must fit the cache
            assert!(9 * 64 * d.d_len * 4 <= a.filter_cache_bytes);
        }
        assert_eq!(k_cover, 64);
    }

    #[test]
    fn group_slicing_keeps_intermediates_as_per_slice_entities() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = Graph::new(
            vec![
                conv_node("c1", INPUT_ID, 3, 4, 4, 1, 1, &mut rng),
                conv_node("c2", "c1", 3, 4, 4, 1, 1, &mut rng),
                conv_node("c3", "c2", 3, 4, 4, 1, 1, &mut rng),
            ],
            vec!["c3".into()],
            TensorShape::new(32, 32, 4).unwrap(),
        )
        .unwrap();
        // tensors are 32*32*4*4 = 16 KiB; buffer 8 KiB slices everything
        let a = arch(8 << 10, 1 << 20);
        let sgs = partition(&g, &a).unwrap();
        let simple = plan_slices(&g, &sgs, &a).unwrap();
        assert_eq!(simple.units.len(), 3);
        assert!(simple.units.iter().all(|u| u.steps.len() > 1));

        let grouped = plan_group_slices(&g, &sgs, &a, usize::MAX).unwrap();
        assert_eq!(grouped.units.len(), 1);
        let u = &grouped.units[0];
        assert!(u.grouped);
        assert_eq!(u.subgraphs, vec![0, 1, 2]);
        assert_eq!(u.inputs, vec![INPUT_ID.to_string()]);
        assert_eq!(u.output, "c3");
        // Slice-major: members cycle within each slice.
        let sg_seq: Vec<usize> = u.steps.iter().map(|s| s.subgraph).collect();
        assert_eq!(&sg_seq[0..3], &[0, 1, 2]);
        assert_eq!(sg_seq.len() % 3, 0);
        // Intermediates are per-slice entities tagged with their parent.
        let slice_entities: Vec<_> =
            grouped.entities.iter().filter(|(_, e)| e.slice_of.is_some()).collect();
        assert!(!slice_entities.is_empty());
        for (id, e) in &slice_entities {
            assert!(id.contains('@'), "{id}");
            let parent = e.slice_of.as_deref().unwrap();
            assert!(parent == "c1" || parent == "c2");
        }
        // Final writes tile the output height exactly.
        let mut rows = 0;
        for st in u.steps.iter().filter(|s| s.write.entity == "c3") {
            assert_eq!(st.write.region.h0, rows);
            rows += st.write.region.h_len;
        }
        assert_eq!(rows, 32);
        // group_depth=1 falls back to the simple plan.
        let depth1 = plan_group_slices(&g, &sgs, &a, 1).unwrap();
        assert_eq!(depth1, simple);
    }

    #[test]
    fn infeasible_when_unit_slice_exceeds_buffer() {
        let (g, sgs) = single_conv(4, 4, 3, 512, 8, 1);
        // One output pixel still needs a 3x3x512 window = 18 KiB > 4 KiB,
        // and 512 input slabs of one element each still carry the output.
        let a = arch(64, 1 << 20);
        let err = plan_slices(&g, &sgs, &a).unwrap_err();
        assert!(matches!(err, Error::Infeasible(_)), "{err}");
    }
}

