//! Lowering: an execution plan, schedule and allocation become the register
//! loads each kernel needs, one segment per step.
//!
//! Lowering is split in two phases. [`build_image`] packs filters, biases
//! and LSTM cell-state vectors into the external weight image and fixes the
//! staging addresses of the graph input and cell-state outputs; the
//! allocator can then be run with its external arena placed *after* that
//! image. [`emit_program`] walks the scheduled steps and emits one segment
//! each, resolving every tensor reference through the allocation.

use std::collections::HashMap;

use crate::alloc::{AllocationPlan, Location};
use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeKind};
use crate::partition::Subgraph;
use crate::scalar::{to_f64, Scalar};
use crate::schedule::Schedule;
use crate::slicing::{ExecPlan, ExecStep};

use super::encode::{Program, Section, Segment};
use super::registers::{self as reg, kernel};

/// Filter blocks are keyed by subgraph and the (K chunk, input slab) they
/// cover, so repeated steps (group slices) reuse one block.
type FilterKey = (usize, usize, usize, usize, usize);

/// One LSTM tail's staged cell state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailSlot {
    pub subgraph: usize,
    /// Graph node id of the tail, the key under which the host reads c'.
    pub node: String,
    pub hidden: usize,
    pub c_init_addr: u64,
    pub c_out_addr: u64,
}

/// The packed external image and the addresses lowered programs refer to.
/// All addresses and lengths are in elements.
#[derive(Debug, Clone, Default)]
pub struct ImageLayout {
    /// Weights, biases and initial cell states, in packing order from
    /// external address 0.
    pub image: Vec<f64>,
    /// Where the host stages the graph input.
    pub input_addr: u64,
    pub input_elems: u64,
    /// First element past everything lowering reserved; the allocator's
    /// external arena starts here (scaled to bytes).
    pub end_elems: u64,
    pub tails: Vec<TailSlot>,
    filters: HashMap<FilterKey, (u64, u64)>,
    biases: HashMap<(usize, usize, usize), u64>,
}

impl ImageLayout {
    /// `(address, element count)` of the filter block for one step.
    pub fn filter_block(&self, key: FilterKey) -> Option<(u64, u64)> {
        self.filters.get(&key).copied()
    }
}

fn conv_attrs<'g, S: Scalar>(
    g: &'g Graph<S>,
    sg: &Subgraph,
) -> Option<&'g crate::graph::ConvAttrs<S>> {
    let cid = sg.conv.as_ref()?;
    match &g.node(cid).kind {
        NodeKind::Convolution(a) => Some(a),
        _ => None,
    }
}

/// Pack every filter block, bias run and cell-state vector the plan's steps
/// will reference, then reserve the input staging range.
pub fn build_image<S: Scalar>(
    g: &Graph<S>,
    sgs: &[Subgraph],
    plan: &ExecPlan,
) -> Result<ImageLayout> {
    let mut layout = ImageLayout::default();
    for unit in &plan.units {
        for step in &unit.steps {
            let sg = &sgs[step.subgraph];
            let Some(a) = conv_attrs(g, sg) else { continue };
            let Some(conv_out) = &step.conv_out else { continue };
            let (k0, klen) = (conv_out.d0, conv_out.d_len);
            let (c0, clen) = step.c_slab;
            let key = (step.subgraph, k0, klen, c0, clen);
            if !layout.filters.contains_key(&key) {
                let addr = layout.image.len() as u64;
                for k in k0..k0 + klen {
                    for r in 0..a.filter_h {
                        for s in 0..a.filter_w {
                            for c in a.read_set(k) {
                                if c >= c0 && c < c0 + clen {
                                    layout.image.push(to_f64(a.weight(k, r, s, c)));
                                }
                            }
                        }
                    }
                }
                let len = layout.image.len() as u64 - addr;
                layout.filters.insert(key, (addr, len));
            }
            if c0 == 0 {
                let bkey = (step.subgraph, k0, klen);
                if !layout.biases.contains_key(&bkey) {
                    let addr = layout.image.len() as u64;
                    for k in k0..k0 + klen {
                        layout.image.push(to_f64(a.bias[k]));
                    }
                    layout.biases.insert(bkey, addr);
                }
            }
        }
    }
    // Cell-state vectors, one slot per tail-bearing subgraph.
    for (i, sg) in sgs.iter().enumerate() {
        let Some(tid) = &sg.tail else { continue };
        let NodeKind::LstmTail(t) = &g.node(tid).kind else {
            return Err(Error::Schema(format!("`{tid}` is not an LSTM tail")));
        };
        let c_init_addr = layout.image.len() as u64;
        for j in 0..t.hidden {
            layout.image.push(to_f64(t.c_init[j]));
        }
        layout.tails.push(TailSlot {
            subgraph: i,
            node: tid.clone(),
            hidden: t.hidden,
            c_init_addr,
            c_out_addr: 0, // placed after the input staging range below
        });
    }
    layout.input_addr = layout.image.len() as u64;
    layout.input_elems = g.input_shape.elems();
    let mut cur = layout.input_addr + layout.input_elems;
    for slot in &mut layout.tails {
        slot.c_out_addr = cur;
        cur += slot.hidden as u64;
    }
    layout.end_elems = cur;
    Ok(layout)
}

/// Codegen toggles that change register contents but not program shape.
#[derive(Debug, Clone, Copy, Default)]
pub struct LowerOptions {
    /// Mark eligible unit-filter convolutions so the performance model
    /// applies the S-lane output-pixel optimization.
    pub one_by_one: bool,
}

fn word(x: u64, what: &str) -> Result<u32> {
    u32::try_from(x).map_err(|_| Error::Overflow(format!("{what} {x} exceeds a 32-bit register")))
}

fn uword(x: usize, what: &str) -> Result<u32> {
    word(x as u64, what)
}

/// Resolve an entity to its `(LOC, element address)` register pair.
fn entity_loc(
    alloc: &AllocationPlan,
    entity: &str,
    bpe: u64,
) -> Result<(u32, u64)> {
    let placement = alloc
        .placements
        .get(entity)
        .ok_or_else(|| Error::Schema(format!("`{entity}` was never placed")))?;
    let (loc, byte_addr) = match placement.location {
        Location::StreamBuffer { offset } => (reg::reader::LOC_STREAM, offset),
        Location::External { address } => (reg::reader::LOC_EXTERNAL, address),
    };
    if byte_addr % bpe != 0 {
        return Err(Error::Overflow(format!(
            "`{entity}` placed at byte {byte_addr}, not element-aligned"
        )));
    }
    Ok((loc, byte_addr / bpe))
}

struct Emitter<'a, S: Scalar> {
    g: &'a Graph<S>,
    sgs: &'a [Subgraph],
    plan: &'a ExecPlan,
    alloc: &'a AllocationPlan,
    layout: &'a ImageLayout,
    arch: &'a ArchConfig,
    opts: LowerOptions,
}

impl<S: Scalar> Emitter<'_, S> {
    fn bpe(&self) -> u64 {
        self.arch.bytes_per_element as u64
    }

    fn reader_section(&self, step: &ExecStep) -> Result<Section> {
        let mut words = vec![0u32; reg::reader::WORDS];
        if step.reads.len() > reg::reader::MAX_SLOTS {
            return Err(Error::Overflow(format!(
                "step reads {} sources; the reader has {} slots",
                step.reads.len(),
                reg::reader::MAX_SLOTS
            )));
        }
        words[reg::reader::SLOTS] = uword(step.reads.len(), "reader slots")?;
        for (i, read) in step.reads.iter().enumerate() {
            let base = 1 + i * reg::reader::SLOT_WORDS;
            let info = self
                .plan
                .entities
                .get(&read.entity)
                .ok_or_else(|| Error::Schema(format!("unknown entity `{}`", read.entity)))?;
            let (loc, addr) = entity_loc(self.alloc, &read.entity, self.bpe())?;
            let r = &read.region;
            // A flattened view reads the entity's row-major storage as one
            // flat vector, so the slot advertises a (1, 1, elems) extent and
            // the depth window does all the addressing.
            let src = if read.flat {
                if r.h0 != 0 || r.w0 != 0 || r.h_len != 1 || r.w_len != 1 {
                    return Err(Error::Schema(format!(
                        "flattened read of `{}` must be a single spatial pixel",
                        read.entity
                    )));
                }
                (1, 1, info.shape.elems() as usize)
            } else {
                (info.shape.h, info.shape.w, info.shape.d)
            };
            words[base + reg::reader::LOC] = loc;
            words[base + reg::reader::ADDR] = word(addr, "reader addr")?;
            words[base + reg::reader::SRC_H] = uword(src.0, "src_h")?;
            words[base + reg::reader::SRC_W] = uword(src.1, "src_w")?;
            words[base + reg::reader::SRC_D] = uword(src.2, "src_d")?;
            words[base + reg::reader::H_STRIDE] = uword(read.h_stride, "h_stride")?;
            words[base + reg::reader::W_STRIDE] = uword(read.w_stride, "w_stride")?;
            words[base + reg::reader::H0] = uword(r.h0, "h0")?;
            words[base + reg::reader::H_LEN] = uword(r.h_len, "h_len")?;
            words[base + reg::reader::W0] = uword(r.w0, "w0")?;
            words[base + reg::reader::W_LEN] = uword(r.w_len, "w_len")?;
            words[base + reg::reader::D0] = uword(r.d0, "d0")?;
            words[base + reg::reader::D_LEN] = uword(r.d_len, "d_len")?;
        }
        Ok(Section { kernel: kernel::STREAM_READER, words })
    }

    fn conv_and_prefetch(&self, step: &ExecStep) -> Result<(Section, Section)> {
        let sg = &self.sgs[step.subgraph];
        let mut words = vec![0u32; reg::conv::WORDS];
        let mut pf = vec![0u32; reg::prefetch::WORDS];
        let in_h = step.reads[0].region.h_len;
        let in_w = step.reads[0].region.w_len;
        let in_c: usize = step.reads.iter().map(|r| r.region.d_len).sum();
        words[reg::conv::IN_H] = uword(in_h, "in_h")?;
        words[reg::conv::IN_W] = uword(in_w, "in_w")?;
        words[reg::conv::IN_C] = uword(in_c, "in_c")?;
        match (conv_attrs(self.g, sg), &step.conv_out) {
            (Some(a), Some(out)) => {
                words[reg::conv::MODE] = reg::conv::MODE_CONV;
                words[reg::conv::OUT_H] = uword(out.h_len, "out_h")?;
                words[reg::conv::OUT_W] = uword(out.w_len, "out_w")?;
                words[reg::conv::OUT_K] = uword(out.d_len, "out_k")?;
                words[reg::conv::FILT_H] = uword(a.filter_h, "filt_h")?;
                words[reg::conv::FILT_W] = uword(a.filter_w, "filt_w")?;
                words[reg::conv::STRIDE] = uword(a.stride, "stride")?;
                words[reg::conv::PAD_TOP] = uword(step.pad_top, "pad_top")?;
                words[reg::conv::PAD_LEFT] = uword(step.pad_left, "pad_left")?;
                words[reg::conv::K_START] = uword(out.d0, "k_start")?;
                let full_depth: usize = sg.inputs.iter().map(|v| v.view_shape.d).sum();
                let mut flags = 0u32;
                if step.c_slab.0 == 0 {
                    flags |= reg::conv::flags::BIAS;
                }
                if sg.relu && step.c_slab == (0, full_depth) {
                    flags |= reg::conv::flags::RELU;
                }
                if let Some(si) = &a.shorten {
                    flags |= reg::conv::flags::BAND;
                    words[reg::conv::GROUP] = uword(si.group, "group")?;
                    words[reg::conv::BAND_DEPTH] = uword(si.band_depth, "band_depth")?;
                    words[reg::conv::DENSE_START] = uword(si.dense_start, "dense_start")?;
                    words[reg::conv::DENSE_LEN] = uword(si.dense_len, "dense_len")?;
                }
                if self.opts.one_by_one && a.filter_h == 1 && a.filter_w == 1 && a.stride == 1 {
                    flags |= reg::conv::flags::ONE_BY_ONE;
                }
                words[reg::conv::FLAGS] = flags;
                let key = (step.subgraph, out.d0, out.d_len, step.c_slab.0, step.c_slab.1);
                let (addr, count) = self.layout.filter_block(key).ok_or_else(|| {
                    Error::Schema(format!("no packed filters for subgraph `{}`", sg.id))
                })?;
                pf[reg::prefetch::ADDR] = word(addr, "filter addr")?;
                pf[reg::prefetch::COUNT] = word(count, "filter count")?;
                if step.c_slab.0 == 0 {
                    let baddr = self.layout.biases[&(step.subgraph, out.d0, out.d_len)];
                    pf[reg::prefetch::BIAS_ADDR] = word(baddr, "bias addr")?;
                    pf[reg::prefetch::BIAS_COUNT] = uword(out.d_len, "bias count")?;
                }
            }
            _ => {
                words[reg::conv::MODE] = reg::conv::MODE_BYPASS;
                words[reg::conv::OUT_H] = uword(in_h, "out_h")?;
                words[reg::conv::OUT_W] = uword(in_w, "out_w")?;
                words[reg::conv::OUT_K] = uword(in_c, "out_k")?;
                if sg.relu {
                    words[reg::conv::FLAGS] = reg::conv::flags::RELU;
                }
            }
        }
        Ok((
            Section { kernel: kernel::CONV_PE_ARRAY, words },
            Section { kernel: kernel::FILTER_PREFETCH, words: pf },
        ))
    }

    fn xbar_section(&self) -> Result<Section> {
        let mut words = vec![uword(self.arch.xbar_kernels.len(), "chain length")?];
        for name in &self.arch.xbar_kernels {
            words.push(u32::from(match name.as_str() {
                "pool" => kernel::POOL,
                "lrn" => kernel::LRN,
                "lstm_tail" => kernel::LSTM_TAIL,
                other => return Err(Error::ArchConfig(format!("unknown crossbar kernel `{other}`"))),
            }));
        }
        Ok(Section { kernel: kernel::XBAR, words })
    }

    fn pool_section(&self, step: &ExecStep) -> Result<Section> {
        let sg = &self.sgs[step.subgraph];
        let Some(pid) = &sg.pool else {
            return Ok(Section { kernel: kernel::POOL, words: vec![reg::BYPASS_WORD] });
        };
        let (kind, p) = match &self.g.node(pid).kind {
            NodeKind::MaxPool(p) => (reg::pool::KIND_MAX, p),
            NodeKind::AvgPool(p) => (reg::pool::KIND_AVG, p),
            _ => return Err(Error::Schema(format!("`{pid}` is not a pooling op"))),
        };
        // The pool consumes the conv stage's output when one is fused,
        // otherwise the fed window itself.
        let (img_h, img_w, img_d) = match &step.conv_out {
            Some(c) => (c.h_len, c.w_len, c.d_len),
            None => (
                step.reads[0].region.h_len,
                step.reads[0].region.w_len,
                step.reads.iter().map(|r| r.region.d_len).sum(),
            ),
        };
        if step.pool_pad_top > 0xFF || step.pool_pad_left > 0xFF {
            return Err(Error::Overflow("pool padding exceeds its packed field".into()));
        }
        let mut words = vec![0u32; reg::pool::WORDS];
        words[reg::pool::BYPASS] = 0;
        words[reg::pool::IMG_H] = uword(img_h, "img_h")?;
        words[reg::pool::IMG_W] = uword(img_w, "img_w")?;
        words[reg::pool::IMG_D] = uword(img_d, "img_d")?;
        words[reg::pool::WIN_H] = uword(p.window_h, "win_h")?;
        words[reg::pool::WIN_W] = uword(p.window_w, "win_w")?;
        words[reg::pool::STRIDE] = uword(p.stride, "stride")?;
        words[reg::pool::PAD] =
            (step.pool_pad_top as u32) | ((step.pool_pad_left as u32) << 8);
        words[reg::pool::KIND] = kind;
        words[reg::pool::OUT_H] = uword(step.write.region.h_len, "out_h")?;
        words[reg::pool::OUT_W] = uword(step.write.region.w_len, "out_w")?;
        Ok(Section { kernel: kernel::POOL, words })
    }

    fn lrn_section(&self, step: &ExecStep) -> Result<Section> {
        let sg = &self.sgs[step.subgraph];
        let Some(lid) = &sg.lrn else {
            return Ok(Section { kernel: kernel::LRN, words: vec![reg::BYPASS_WORD] });
        };
        let NodeKind::Lrn(a) = &self.g.node(lid).kind else {
            return Err(Error::Schema(format!("`{lid}` is not an LRN op")));
        };
        let r = &step.write.region;
        let mut words = vec![0u32; reg::lrn::WORDS];
        words[reg::lrn::BYPASS] = 0;
        words[reg::lrn::IMG_H] = uword(r.h_len, "img_h")?;
        words[reg::lrn::IMG_W] = uword(r.w_len, "img_w")?;
        words[reg::lrn::IMG_D] = uword(r.d_len, "img_d")?;
        words[reg::lrn::LOCAL_SIZE] = uword(a.local_size, "local_size")?;
        let (ahi, alo) = reg::split_f64(to_f64(a.alpha));
        let (bhi, blo) = reg::split_f64(to_f64(a.beta));
        let (khi, klo) = reg::split_f64(to_f64(a.k));
        words[reg::lrn::ALPHA_HI] = ahi;
        words[reg::lrn::ALPHA_LO] = alo;
        words[reg::lrn::BETA_HI] = bhi;
        words[reg::lrn::BETA_LO] = blo;
        words[reg::lrn::K_HI] = khi;
        words[reg::lrn::K_LO] = klo;
        Ok(Section { kernel: kernel::LRN, words })
    }

    fn tail_section(&self, step: &ExecStep) -> Result<Section> {
        let sg = &self.sgs[step.subgraph];
        if sg.tail.is_none() {
            return Ok(Section { kernel: kernel::LSTM_TAIL, words: vec![reg::BYPASS_WORD] });
        }
        let slot = self
            .layout
            .tails
            .iter()
            .find(|t| t.subgraph == step.subgraph)
            .ok_or_else(|| Error::Schema(format!("no cell-state slot for `{}`", sg.id)))?;
        let tid = sg.tail.as_ref().unwrap();
        let NodeKind::LstmTail(t) = &self.g.node(tid).kind else {
            return Err(Error::Schema(format!("`{tid}` is not an LSTM tail")));
        };
        let r = &step.write.region;
        let mut words = vec![0u32; reg::tail::WORDS];
        words[reg::tail::BYPASS] = 0;
        words[reg::tail::HIDDEN] = uword(r.d_len, "hidden")?;
        words[reg::tail::INTERLEAVED] = u32::from(t.interleaved);
        words[reg::tail::C_INIT_ADDR] = word(slot.c_init_addr + r.d0 as u64, "c_init_addr")?;
        words[reg::tail::C_OUT_ADDR] = word(slot.c_out_addr + r.d0 as u64, "c_out_addr")?;
        Ok(Section { kernel: kernel::LSTM_TAIL, words })
    }

    fn writer_section(&self, step: &ExecStep) -> Result<Section> {
        let wr = &step.write;
        let info = self
            .plan
            .entities
            .get(&wr.entity)
            .ok_or_else(|| Error::Schema(format!("unknown entity `{}`", wr.entity)))?;
        let (loc, addr) = entity_loc(self.alloc, &wr.entity, self.bpe())?;
        let mut words = vec![0u32; reg::writer::WORDS];
        words[reg::writer::LOC] = loc;
        words[reg::writer::ADDR] = word(addr, "writer addr")?;
        words[reg::writer::DST_H] = uword(info.shape.h, "dst_h")?;
        words[reg::writer::DST_W] = uword(info.shape.w, "dst_w")?;
        words[reg::writer::DST_D] = uword(info.shape.d, "dst_d")?;
        words[reg::writer::H0] = uword(wr.region.h0, "h0")?;
        words[reg::writer::H_LEN] = uword(wr.region.h_len, "h_len")?;
        words[reg::writer::W0] = uword(wr.region.w0, "w0")?;
        words[reg::writer::W_LEN] = uword(wr.region.w_len, "w_len")?;
        words[reg::writer::D0] = uword(wr.region.d0, "d0")?;
        words[reg::writer::D_LEN] = uword(wr.region.d_len, "d_len")?;
        let mut flags = 0u32;
        if wr.accumulate {
            flags |= reg::writer::flags::ACCUMULATE;
        }
        if wr.relu {
            flags |= reg::writer::flags::RELU;
        }
        words[reg::writer::FLAGS] = flags;
        Ok(Section { kernel: kernel::STREAM_WRITER, words })
    }

    fn step_segment(&self, index: u32, step: &ExecStep) -> Result<Segment> {
        let (conv, prefetch) = self.conv_and_prefetch(step)?;
        Ok(Segment {
            index,
            sections: vec![
                prefetch,
                self.reader_section(step)?,
                conv,
                self.xbar_section()?,
                self.pool_section(step)?,
                self.lrn_section(step)?,
                self.tail_section(step)?,
                self.writer_section(step)?,
            ],
        })
    }

    /// The synthetic first segment that copies the staged input from
    /// external memory into its stream-buffer home.
    fn stage_in_segment(&self, index: u32, stream_addr: u64) -> Result<Segment> {
        let shape = self.g.input_shape;
        let mut rd = vec![0u32; reg::reader::WORDS];
        rd[reg::reader::SLOTS] = 1;
        let base = 1;
        rd[base + reg::reader::LOC] = reg::reader::LOC_EXTERNAL;
        rd[base + reg::reader::ADDR] = word(self.layout.input_addr, "input addr")?;
        rd[base + reg::reader::SRC_H] = uword(shape.h, "src_h")?;
        rd[base + reg::reader::SRC_W] = uword(shape.w, "src_w")?;
        rd[base + reg::reader::SRC_D] = uword(shape.d, "src_d")?;
        rd[base + reg::reader::H_STRIDE] = 1;
        rd[base + reg::reader::W_STRIDE] = 1;
        rd[base + reg::reader::H_LEN] = uword(shape.h, "h_len")?;
        rd[base + reg::reader::W_LEN] = uword(shape.w, "w_len")?;
        rd[base + reg::reader::D_LEN] = uword(shape.d, "d_len")?;
        let mut cv = vec![0u32; reg::conv::WORDS];
        cv[reg::conv::MODE] = reg::conv::MODE_BYPASS;
        cv[reg::conv::OUT_H] = uword(shape.h, "out_h")?;
        cv[reg::conv::OUT_W] = uword(shape.w, "out_w")?;
        cv[reg::conv::OUT_K] = uword(shape.d, "out_k")?;
        cv[reg::conv::IN_H] = uword(shape.h, "in_h")?;
        cv[reg::conv::IN_W] = uword(shape.w, "in_w")?;
        cv[reg::conv::IN_C] = uword(shape.d, "in_c")?;
        let mut wr = vec![0u32; reg::writer::WORDS];
        wr[reg::writer::LOC] = reg::reader::LOC_STREAM;
        wr[reg::writer::ADDR] = word(stream_addr, "input stream addr")?;
        wr[reg::writer::DST_H] = uword(shape.h, "dst_h")?;
        wr[reg::writer::DST_W] = uword(shape.w, "dst_w")?;
        wr[reg::writer::DST_D] = uword(shape.d, "dst_d")?;
        wr[reg::writer::H_LEN] = uword(shape.h, "h_len")?;
        wr[reg::writer::W_LEN] = uword(shape.w, "w_len")?;
        wr[reg::writer::D_LEN] = uword(shape.d, "d_len")?;
        Ok(Segment {
            index,
            sections: vec![
                Section { kernel: kernel::FILTER_PREFETCH, words: vec![0; reg::prefetch::WORDS] },
                Section { kernel: kernel::STREAM_READER, words: rd },
                Section { kernel: kernel::CONV_PE_ARRAY, words: cv },
                self.xbar_section()?,
                Section { kernel: kernel::POOL, words: vec![reg::BYPASS_WORD] },
                Section { kernel: kernel::LRN, words: vec![reg::BYPASS_WORD] },
                Section { kernel: kernel::LSTM_TAIL, words: vec![reg::BYPASS_WORD] },
                Section { kernel: kernel::STREAM_WRITER, words: wr },
            ],
        })
    }
}

/// Emit one segment per scheduled step. When the allocator kept the graph
/// input resident in the stream buffer, a stage-in segment that copies it
/// from its external staging address is prepended.
pub fn emit_program<S: Scalar>(
    g: &Graph<S>,
    sgs: &[Subgraph],
    plan: &ExecPlan,
    schedule: &Schedule,
    alloc: &AllocationPlan,
    layout: &ImageLayout,
    arch: &ArchConfig,
    opts: LowerOptions,
) -> Result<Program> {
    let em = Emitter { g, sgs, plan, alloc, layout, arch, opts };
    let mut segments = Vec::new();
    let input_home = alloc
        .placements
        .get(crate::graph::INPUT_ID)
        .ok_or_else(|| Error::Schema("the graph input was never placed".into()))?;
    if let Location::StreamBuffer { offset } = input_home.location {
        if offset % em.bpe() != 0 {
            return Err(Error::Overflow(format!(
                "input placed at byte {offset}, not element-aligned"
            )));
        }
        segments.push(em.stage_in_segment(0, offset / em.bpe())?);
    }
    for &u in &schedule.order {
        for step in &plan.units[u].steps {
            let index = word(segments.len() as u64, "segment index")?;
            segments.push(em.step_segment(index, step)?);
        }
    }
    Ok(Program { segments })
}
