//! Overlay simulator: executes a program functionally against a stream
//! buffer and external memory, and models its cycle cost analytically.
//!
//! Both halves work from the decoded register words alone — nothing is
//! smuggled in from the compiler's intermediate structures, so a program
//! that round-trips through bytes behaves identically. The functional half
//! is the differential-testing anchor: outputs must match the reference
//! interpreter to 1e-9. The analytic half implements the vectorized loop
//! nest count, the filter-cache and prefetch-horizon overlap rule, and the
//! external-bandwidth charge.

use std::collections::HashMap;

use serde::Serialize;

use crate::arch::ArchConfig;
use crate::error::{Error, Result};
use crate::scalar::{from_f64, Scalar};
use crate::vliw::encode::{segment_wire_bytes, Program, Section, Segment};
use crate::vliw::registers::{self as reg, kernel};

// ---------------------------------------------------------------------------
// Functional execution.

/// Machine memory after a run: the stream buffer (element-granular, `None`
/// where nothing was ever written) and external memory as a sparse map of
/// element addresses.
#[derive(Debug, Clone)]
pub struct MachineState<S: Scalar> {
    pub stream: Vec<Option<S>>,
    pub external: HashMap<u64, S>,
}

impl<S: Scalar> MachineState<S> {
    /// Read `len` contiguous elements from one memory space.
    pub fn read_span(&self, loc: u32, addr: u64, len: u64) -> Result<Vec<S>> {
        (0..len).map(|i| self.load(loc, addr + i)).collect()
    }

    fn load(&self, loc: u32, addr: u64) -> Result<S> {
        match loc {
            reg::reader::LOC_STREAM => self
                .stream
                .get(usize::try_from(addr).unwrap_or(usize::MAX))
                .copied()
                .flatten()
                .ok_or_else(|| {
                    Error::AddressFault(format!("stream read of unwritten element {addr}"))
                }),
            reg::reader::LOC_EXTERNAL => self.external.get(&addr).copied().ok_or_else(|| {
                Error::AddressFault(format!("external read of unwritten element {addr}"))
            }),
            other => Err(Error::Framing(format!("bad location code {other}"))),
        }
    }

    fn store(&mut self, loc: u32, addr: u64, value: S, accumulate: bool, relu: bool) -> Result<()> {
        let mut v = value;
        match loc {
            reg::reader::LOC_STREAM => {
                let i = usize::try_from(addr).unwrap_or(usize::MAX);
                let slot = self.stream.get_mut(i).ok_or_else(|| {
                    Error::AddressFault(format!("stream write past the buffer at {addr}"))
                })?;
                if accumulate {
                    v += slot.ok_or_else(|| {
                        Error::AddressFault(format!("accumulate into unwritten element {addr}"))
                    })?;
                }
                if relu && v < S::zero() {
                    v = S::zero();
                }
                *slot = Some(v);
            }
            reg::reader::LOC_EXTERNAL => {
                if accumulate {
                    v += self.external.get(&addr).copied().ok_or_else(|| {
                        Error::AddressFault(format!("accumulate into unwritten element {addr}"))
                    })?;
                }
                if relu && v < S::zero() {
                    v = S::zero();
                }
                self.external.insert(addr, v);
            }
            other => return Err(Error::Framing(format!("bad location code {other}"))),
        }
        Ok(())
    }
}

fn section<'a>(seg: &'a Segment, id: u8) -> Result<&'a Section> {
    seg.sections.iter().find(|s| s.kernel == id).ok_or_else(|| {
        Error::Framing(format!(
            "segment {} has no {} section",
            seg.index,
            reg::kernel_name(id).unwrap_or("?")
        ))
    })
}

fn wordn(sec: &Section, idx: usize) -> Result<u32> {
    sec.words.get(idx).copied().ok_or_else(|| {
        Error::Framing(format!(
            "{} section is {} words, need index {idx}",
            reg::kernel_name(sec.kernel).unwrap_or("?"),
            sec.words.len()
        ))
    })
}

fn is_bypassed(sec: &Section) -> bool {
    sec.words.first().copied() != Some(0)
}

/// A small dense tensor local to one segment's pipeline.
struct Local<S> {
    h: usize,
    w: usize,
    d: usize,
    data: Vec<S>,
}

impl<S: Scalar> Local<S> {
    fn zeros(h: usize, w: usize, d: usize) -> Self {
        Local { h, w, d, data: vec![S::zero(); h * w * d] }
    }
    fn at(&self, h: usize, w: usize, d: usize) -> S {
        self.data[(h * self.w + w) * self.d + d]
    }
    fn set(&mut self, h: usize, w: usize, d: usize, v: S) {
        self.data[(h * self.w + w) * self.d + d] = v;
    }
}

fn gather<S: Scalar>(mem: &MachineState<S>, rd: &Section) -> Result<Local<S>> {
    let slots = wordn(rd, reg::reader::SLOTS)? as usize;
    if slots == 0 || slots > reg::reader::MAX_SLOTS {
        return Err(Error::Framing(format!("reader has {slots} active slots")));
    }
    let slot = |i: usize, w: usize| wordn(rd, 1 + i * reg::reader::SLOT_WORDS + w);
    let h = slot(0, reg::reader::H_LEN)? as usize;
    let w = slot(0, reg::reader::W_LEN)? as usize;
    let mut d_total = 0usize;
    for i in 0..slots {
        if slot(i, reg::reader::H_LEN)? as usize != h || slot(i, reg::reader::W_LEN)? as usize != w
        {
            return Err(Error::Framing("reader slots disagree on the window".into()));
        }
        d_total += slot(i, reg::reader::D_LEN)? as usize;
    }
    let mut out = Local::zeros(h, w, d_total);
    let mut d_base = 0usize;
    for i in 0..slots {
        let loc = slot(i, reg::reader::LOC)?;
        let addr = u64::from(slot(i, reg::reader::ADDR)?);
        let (src_h, src_w, src_d) = (
            u64::from(slot(i, reg::reader::SRC_H)?),
            u64::from(slot(i, reg::reader::SRC_W)?),
            u64::from(slot(i, reg::reader::SRC_D)?),
        );
        let (h_stride, w_stride) =
            (slot(i, reg::reader::H_STRIDE)? as usize, slot(i, reg::reader::W_STRIDE)? as usize);
        let (h0, w0, d0) = (
            slot(i, reg::reader::H0)? as usize,
            slot(i, reg::reader::W0)? as usize,
            slot(i, reg::reader::D0)? as usize,
        );
        let d_len = slot(i, reg::reader::D_LEN)? as usize;
        for vi in 0..h {
            let row = (h0 + vi * h_stride) as u64;
            for vj in 0..w {
                let col = (w0 + vj * w_stride) as u64;
                for dd in 0..d_len {
                    let dep = (d0 + dd) as u64;
                    if row >= src_h || col >= src_w || dep >= src_d {
                        return Err(Error::AddressFault(format!(
                            "reader slot {i} indexes ({row},{col},{dep}) outside its \
                             {src_h}x{src_w}x{src_d} source"
                        )));
                    }
                    let idx = (row * src_w + col) * src_d + dep;
                    out.set(vi, vj, d_base + dd, mem.load(loc, addr + idx)?);
                }
            }
        }
        d_base += d_len;
    }
    Ok(out)
}

/// Per-filter input channel lists and the packed-weight base offset of each
/// filter, derived from the conv section alone.
fn filter_channels(cv: &Section) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    let out_k = wordn(cv, reg::conv::OUT_K)? as usize;
    let in_c = wordn(cv, reg::conv::IN_C)? as usize;
    let k_start = wordn(cv, reg::conv::K_START)? as usize;
    let flags = wordn(cv, reg::conv::FLAGS)?;
    let band = flags & reg::conv::flags::BAND != 0;
    let rs = (wordn(cv, reg::conv::FILT_H)? * wordn(cv, reg::conv::FILT_W)?) as usize;
    let mut chans = Vec::with_capacity(out_k);
    let mut bases = Vec::with_capacity(out_k);
    let mut base = 0usize;
    for k in 0..out_k {
        let ch = if band {
            reg::read_channels(
                k_start + k,
                wordn(cv, reg::conv::GROUP)? as usize,
                wordn(cv, reg::conv::BAND_DEPTH)? as usize,
                wordn(cv, reg::conv::DENSE_START)? as usize,
                wordn(cv, reg::conv::DENSE_LEN)? as usize,
                in_c,
            )
        } else {
            (0..in_c).collect()
        };
        bases.push(base);
        base += rs * ch.len();
        chans.push(ch);
    }
    Ok((chans, bases))
}

fn convolve<S: Scalar>(
    mem: &MachineState<S>,
    cv: &Section,
    pf: &Section,
    input: Local<S>,
) -> Result<Local<S>> {
    let flags = wordn(cv, reg::conv::FLAGS)?;
    let relu = flags & reg::conv::flags::RELU != 0;
    if wordn(cv, reg::conv::MODE)? == reg::conv::MODE_BYPASS {
        let mut out = input;
        if relu {
            for v in &mut out.data {
                if *v < S::zero() {
                    *v = S::zero();
                }
            }
        }
        return Ok(out);
    }
    let (out_h, out_w, out_k) = (
        wordn(cv, reg::conv::OUT_H)? as usize,
        wordn(cv, reg::conv::OUT_W)? as usize,
        wordn(cv, reg::conv::OUT_K)? as usize,
    );
    let (filt_h, filt_w) =
        (wordn(cv, reg::conv::FILT_H)? as usize, wordn(cv, reg::conv::FILT_W)? as usize);
    let stride = wordn(cv, reg::conv::STRIDE)? as usize;
    let (pad_top, pad_left) =
        (wordn(cv, reg::conv::PAD_TOP)? as usize, wordn(cv, reg::conv::PAD_LEFT)? as usize);
    let weights = mem.read_span(
        reg::reader::LOC_EXTERNAL,
        u64::from(wordn(pf, reg::prefetch::ADDR)?),
        u64::from(wordn(pf, reg::prefetch::COUNT)?),
    )?;
    let bias_count = wordn(pf, reg::prefetch::BIAS_COUNT)?;
    let use_bias = flags & reg::conv::flags::BIAS != 0;
    if use_bias && (bias_count as usize) < out_k {
        return Err(Error::Framing("bias run shorter than the filter count".into()));
    }
    let biases = mem.read_span(
        reg::reader::LOC_EXTERNAL,
        u64::from(wordn(pf, reg::prefetch::BIAS_ADDR)?),
        u64::from(if use_bias { bias_count } else { 0 }),
    )?;
    let (chans, bases) = filter_channels(cv)?;
    if bases.last().map_or(0, |b| b + filt_h * filt_w * chans.last().unwrap().len())
        != weights.len()
    {
        return Err(Error::Framing("packed filter block size mismatch".into()));
    }
    let mut out = Local::zeros(out_h, out_w, out_k);
    for k in 0..out_k {
        let ch = &chans[k];
        for oh in 0..out_h {
            for ow in 0..out_w {
                let mut acc = if use_bias { biases[k] } else { S::zero() };
                for r in 0..filt_h {
                    let ih = (oh * stride + r) as isize - pad_top as isize;
                    if ih < 0 || ih as usize >= input.h {
                        continue;
                    }
                    for s in 0..filt_w {
                        let iw = (ow * stride + s) as isize - pad_left as isize;
                        if iw < 0 || iw as usize >= input.w {
                            continue;
                        }
                        let wbase = bases[k] + (r * filt_w + s) * ch.len();
                        for (ci, &c) in ch.iter().enumerate() {
                            acc += weights[wbase + ci] * input.at(ih as usize, iw as usize, c);
                        }
                    }
                }
                if relu && acc < S::zero() {
                    acc = S::zero();
                }
                out.set(oh, ow, k, acc);
            }
        }
    }
    Ok(out)
}

fn pool_apply<S: Scalar>(sec: &Section, input: Local<S>) -> Result<Local<S>> {
    let (img_h, img_w, img_d) = (
        wordn(sec, reg::pool::IMG_H)? as usize,
        wordn(sec, reg::pool::IMG_W)? as usize,
        wordn(sec, reg::pool::IMG_D)? as usize,
    );
    if (img_h, img_w, img_d) != (input.h, input.w, input.d) {
        return Err(Error::Framing(format!(
            "pool expects a {img_h}x{img_w}x{img_d} image, fed {}x{}x{}",
            input.h, input.w, input.d
        )));
    }
    let (win_h, win_w) =
        (wordn(sec, reg::pool::WIN_H)? as usize, wordn(sec, reg::pool::WIN_W)? as usize);
    let stride = wordn(sec, reg::pool::STRIDE)? as usize;
    let pad = wordn(sec, reg::pool::PAD)?;
    let (pad_top, pad_left) = ((pad & 0xFF) as usize, ((pad >> 8) & 0xFF) as usize);
    let kind = wordn(sec, reg::pool::KIND)?;
    let (out_h, out_w) =
        (wordn(sec, reg::pool::OUT_H)? as usize, wordn(sec, reg::pool::OUT_W)? as usize);
    let mut out = Local::zeros(out_h, out_w, img_d);
    let area = from_f64::<S>((win_h * win_w) as f64);
    for oh in 0..out_h {
        for ow in 0..out_w {
            for d in 0..img_d {
                let mut best = S::neg_infinity();
                let mut sum = S::zero();
                for u in 0..win_h {
                    let ih = (oh * stride + u) as isize - pad_top as isize;
                    if ih < 0 || ih as usize >= input.h {
                        continue;
                    }
                    for v in 0..win_w {
                        let iw = (ow * stride + v) as isize - pad_left as isize;
                        if iw < 0 || iw as usize >= input.w {
                            continue;
                        }
                        let x = input.at(ih as usize, iw as usize, d);
                        if x > best {
                            best = x;
                        }
                        sum += x;
                    }
                }
                let y = if kind == reg::pool::KIND_MAX { best } else { sum / area };
                out.set(oh, ow, d, y);
            }
        }
    }
    Ok(out)
}

fn lrn_apply<S: Scalar>(sec: &Section, input: Local<S>) -> Result<Local<S>> {
    let n = wordn(sec, reg::lrn::LOCAL_SIZE)? as usize;
    let alpha = from_f64::<S>(reg::join_f64(
        wordn(sec, reg::lrn::ALPHA_HI)?,
        wordn(sec, reg::lrn::ALPHA_LO)?,
    ));
    let beta = from_f64::<S>(reg::join_f64(
        wordn(sec, reg::lrn::BETA_HI)?,
        wordn(sec, reg::lrn::BETA_LO)?,
    ));
    let kk =
        from_f64::<S>(reg::join_f64(wordn(sec, reg::lrn::K_HI)?, wordn(sec, reg::lrn::K_LO)?));
    let half = (n - 1) / 2;
    let mut out = Local::zeros(input.h, input.w, input.d);
    let alpha_over_n = alpha / from_f64::<S>(n as f64);
    for h in 0..input.h {
        for w in 0..input.w {
            for d in 0..input.d {
                let lo = d.saturating_sub(half);
                let hi = (d + half).min(input.d - 1);
                let mut sum = S::zero();
                for j in lo..=hi {
                    let x = input.at(h, w, j);
                    sum += x * x;
                }
                let denom = (kk + alpha_over_n * sum).powf(beta);
                out.set(h, w, d, input.at(h, w, d) / denom);
            }
        }
    }
    Ok(out)
}

fn tail_apply<S: Scalar>(
    mem: &mut MachineState<S>,
    sec: &Section,
    input: Local<S>,
) -> Result<Local<S>> {
    if input.h != 1 || input.w != 1 {
        return Err(Error::Framing(format!(
            "LSTM tail fed a {}x{} window; gate vectors are 1x1",
            input.h, input.w
        )));
    }
    let hidden = wordn(sec, reg::tail::HIDDEN)? as usize;
    if input.d != 4 * hidden {
        return Err(Error::Framing(format!(
            "LSTM tail fed depth {}, needs {}",
            input.d,
            4 * hidden
        )));
    }
    let interleaved = wordn(sec, reg::tail::INTERLEAVED)? != 0;
    let c_init_addr = u64::from(wordn(sec, reg::tail::C_INIT_ADDR)?);
    let c_out_addr = u64::from(wordn(sec, reg::tail::C_OUT_ADDR)?);
    let z = |gate: usize, j: usize| -> S {
        if interleaved {
            input.data[4 * j + gate]
        } else {
            input.data[gate * hidden + j]
        }
    };
    let one = S::one();
    let sigmoid = |x: S| one / (one + (-x).exp());
    let mut out = Local::zeros(1, 1, hidden);
    for j in 0..hidden {
        let c_prev = mem.load(reg::reader::LOC_EXTERNAL, c_init_addr + j as u64)?;
        let i = sigmoid(z(0, j));
        let g = z(1, j).tanh();
        let f = sigmoid(z(2, j));
        let o = sigmoid(z(3, j));
        let c = f * c_prev + i * g;
        mem.store(reg::reader::LOC_EXTERNAL, c_out_addr + j as u64, c, false, false)?;
        out.set(0, 0, j, o * c.tanh());
    }
    Ok(out)
}

fn scatter<S: Scalar>(mem: &mut MachineState<S>, wr: &Section, data: &Local<S>) -> Result<()> {
    let (h_len, w_len, d_len) = (
        wordn(wr, reg::writer::H_LEN)? as usize,
        wordn(wr, reg::writer::W_LEN)? as usize,
        wordn(wr, reg::writer::D_LEN)? as usize,
    );
    if (h_len, w_len, d_len) != (data.h, data.w, data.d) {
        return Err(Error::Framing(format!(
            "writer region {h_len}x{w_len}x{d_len} mismatches the {}x{}x{} result",
            data.h, data.w, data.d
        )));
    }
    let loc = wordn(wr, reg::writer::LOC)?;
    let addr = u64::from(wordn(wr, reg::writer::ADDR)?);
    let (dst_h, dst_w, dst_d) = (
        u64::from(wordn(wr, reg::writer::DST_H)?),
        u64::from(wordn(wr, reg::writer::DST_W)?),
        u64::from(wordn(wr, reg::writer::DST_D)?),
    );
    let (h0, w0, d0) = (
        wordn(wr, reg::writer::H0)? as u64,
        wordn(wr, reg::writer::W0)? as u64,
        wordn(wr, reg::writer::D0)? as u64,
    );
    let flags = wordn(wr, reg::writer::FLAGS)?;
    let acc = flags & reg::writer::flags::ACCUMULATE != 0;
    let relu = flags & reg::writer::flags::RELU != 0;
    for i in 0..h_len as u64 {
        for j in 0..w_len as u64 {
            for dd in 0..d_len as u64 {
                let (h, w, d) = (h0 + i, w0 + j, d0 + dd);
                if h >= dst_h || w >= dst_w || d >= dst_d {
                    return Err(Error::AddressFault(format!(
                        "writer indexes ({h},{w},{d}) outside its {dst_h}x{dst_w}x{dst_d} \
                         destination"
                    )));
                }
                let idx = (h * dst_w + w) * dst_d + d;
                let v = data.at(i as usize, j as usize, dd as usize);
                mem.store(loc, addr + idx, v, acc, relu)?;
            }
        }
    }
    Ok(())
}

/// Run a program. `external` seeds external memory (weight image, staged
/// input, anything else the host laid down); the returned state holds both
/// memories after the last segment.
pub fn execute<S: Scalar>(
    p: &Program,
    arch: &ArchConfig,
    external: HashMap<u64, S>,
) -> Result<MachineState<S>> {
    arch.validate()?;
    let stream_elems = arch.stream_buffer_bytes / arch.bytes_per_element;
    let mut mem = MachineState { stream: vec![None; stream_elems], external };
    for seg in &p.segments {
        let rd = section(seg, kernel::STREAM_READER)?;
        let cv = section(seg, kernel::CONV_PE_ARRAY)?;
        let pf = section(seg, kernel::FILTER_PREFETCH)?;
        let xb = section(seg, kernel::XBAR)?;
        let wr = section(seg, kernel::STREAM_WRITER)?;
        let mut cur = convolve(&mem, cv, pf, gather(&mem, rd)?)?;
        let hops = wordn(xb, reg::xbar::CHAIN_LEN)? as usize;
        for hop in 0..hops {
            let id = wordn(xb, 1 + hop)? as u8;
            let sec = section(seg, id)?;
            if is_bypassed(sec) {
                continue;
            }
            cur = match id {
                kernel::POOL => pool_apply(sec, cur)?,
                kernel::LRN => lrn_apply(sec, cur)?,
                kernel::LSTM_TAIL => tail_apply(&mut mem, sec, cur)?,
                other => {
                    return Err(Error::Framing(format!("kernel {other} cannot sit on the xbar")))
                }
            };
        }
        scatter(&mut mem, wr, &cur)?;
    }
    Ok(mem)
}

// ---------------------------------------------------------------------------
// Analytic cycle model.

/// Cycle breakdown of one segment.
#[derive(Debug, Clone, Serialize)]
pub struct SegmentCycles {
    pub index: u32,
    pub compute: f64,
    pub filter_load: f64,
    pub act_io: f64,
    pub programming: f64,
}

/// Modeled performance of one program on one configuration.
#[derive(Debug, Clone, Serialize)]
pub struct PerfReport {
    pub total_cycles: f64,
    pub modeled_fps: f64,
    /// Useful MACs over PE-array issue slots while computing.
    pub dsp_efficiency: f64,
    pub mac_count: u64,
    pub compute_cycles: f64,
    pub filter_load_cycles: f64,
    pub act_io_cycles: f64,
    pub programming_cycles: f64,
    pub programming_fraction: f64,
    pub ext_bytes_moved: u64,
    pub filter_bytes_fetched: u64,
    pub act_bytes_moved: u64,
    /// Externally spilled intermediate traffic points; filled in by the
    /// compiler driver from the allocation (the program alone cannot tell
    /// a spill from any other external tensor).
    pub spillpoint_count: u64,
    pub prefetch_horizon: usize,
    pub segments: Vec<SegmentCycles>,
}

fn div_ceil_u64(a: u64, b: u64) -> u64 {
    a.div_ceil(b.max(1))
}

/// Compute cycles and useful MACs of one conv section under the vectorized
/// loop nest: ceil(K/K_VEC)·ceil(Q/Q_VEC)·ceil(P/P_VEC)·ceil(C/C_VEC)·
/// ceil(S/S_VEC)·R, with banded filters iterated per filter group and the
/// unit-filter mode widening Q by the idle S lanes.
fn conv_cost(cv: &Section, arch: &ArchConfig) -> Result<(f64, u64)> {
    if wordn(cv, reg::conv::MODE)? == reg::conv::MODE_BYPASS {
        return Ok((0.0, 0));
    }
    let out_h = u64::from(wordn(cv, reg::conv::OUT_H)?);
    let out_w = u64::from(wordn(cv, reg::conv::OUT_W)?);
    let out_k = u64::from(wordn(cv, reg::conv::OUT_K)?);
    let in_c = u64::from(wordn(cv, reg::conv::IN_C)?);
    let filt_h = u64::from(wordn(cv, reg::conv::FILT_H)?);
    let filt_w = u64::from(wordn(cv, reg::conv::FILT_W)?);
    let flags = wordn(cv, reg::conv::FLAGS)?;
    let k_start = u64::from(wordn(cv, reg::conv::K_START)?);
    let q_eff = if flags & reg::conv::flags::ONE_BY_ONE != 0 {
        arch.q_vec as u64 * arch.s_vec as u64
    } else {
        arch.q_vec as u64
    };
    let spatial = div_ceil_u64(out_w, q_eff)
        * div_ceil_u64(out_h, arch.p_vec as u64)
        * div_ceil_u64(filt_w, arch.s_vec as u64)
        * filt_h;
    let pixels = out_h * out_w;
    let mut cycles = 0u64;
    let mut macs = 0u64;
    if flags & reg::conv::flags::BAND != 0 {
        let group = u64::from(wordn(cv, reg::conv::GROUP)?).max(1);
        let band_depth = wordn(cv, reg::conv::BAND_DEPTH)? as usize;
        let dense_start = wordn(cv, reg::conv::DENSE_START)? as usize;
        let dense_len = wordn(cv, reg::conv::DENSE_LEN)? as usize;
        let mut k = k_start;
        let end = k_start + out_k;
        while k < end {
            let block_end = ((k / group + 1) * group).min(end);
            let c_b = reg::read_channels(
                k as usize,
                group as usize,
                band_depth,
                dense_start,
                dense_len,
                in_c as usize,
            )
            .len() as u64;
            let klen = block_end - k;
            cycles += div_ceil_u64(klen, arch.k_vec as u64)
                * div_ceil_u64(c_b, arch.c_vec as u64)
                * spatial;
            macs += klen * pixels * filt_h * filt_w * c_b;
            k = block_end;
        }
    } else {
        cycles = div_ceil_u64(out_k, arch.k_vec as u64)
            * div_ceil_u64(in_c, arch.c_vec as u64)
            * spatial;
        macs = out_k * pixels * filt_h * filt_w * in_c;
    }
    Ok((cycles as f64, macs))
}

/// External activation bytes a segment's reader and writer move.
fn act_bytes(seg: &Segment) -> Result<u64> {
    let rd = section(seg, kernel::STREAM_READER)?;
    let mut elems = 0u64;
    let slots = wordn(rd, reg::reader::SLOTS)? as usize;
    for i in 0..slots {
        let base = 1 + i * reg::reader::SLOT_WORDS;
        if wordn(rd, base + reg::reader::LOC)? == reg::reader::LOC_EXTERNAL {
            elems += u64::from(wordn(rd, base + reg::reader::H_LEN)?)
                * u64::from(wordn(rd, base + reg::reader::W_LEN)?)
                * u64::from(wordn(rd, base + reg::reader::D_LEN)?);
        }
    }
    let wr = section(seg, kernel::STREAM_WRITER)?;
    if wordn(wr, reg::writer::LOC)? == reg::reader::LOC_EXTERNAL {
        elems += u64::from(wordn(wr, reg::writer::H_LEN)?)
            * u64::from(wordn(wr, reg::writer::W_LEN)?)
            * u64::from(wordn(wr, reg::writer::D_LEN)?);
    }
    Ok(elems)
}

/// A FIFO filter cache: blocks stay resident until capacity evicts them.
struct FilterCache {
    resident: indexmap::IndexMap<(u32, u32), u64>,
    bytes: u64,
    capacity: u64,
}

impl FilterCache {
    fn new(capacity: u64) -> Self {
        FilterCache { resident: indexmap::IndexMap::new(), bytes: 0, capacity }
    }

    /// Bytes actually fetched for this block (0 on a hit).
    fn fetch(&mut self, addr: u32, count: u32, bpe: u64) -> u64 {
        if count == 0 {
            return 0;
        }
        let key = (addr, count);
        if self.resident.contains_key(&key) {
            return 0;
        }
        let bytes = u64::from(count) * bpe;
        while self.bytes + bytes > self.capacity && !self.resident.is_empty() {
            let (_, evicted) = self.resident.shift_remove_index(0).unwrap();
            self.bytes -= evicted;
        }
        // A block larger than the whole cache streams straight through.
        if bytes <= self.capacity {
            self.resident.insert(key, bytes);
            self.bytes += bytes;
        }
        bytes
    }
}

/// Model a program's cycle cost. Filter loads for segment `i` may start as
/// soon as segment `i - horizon` finishes computing (double-buffered
/// registers and filter-cache prefetch); programming and compute/IO then
/// serialize per segment under the max-overlap rule.
pub fn model_cycles(p: &Program, arch: &ArchConfig, horizon: usize) -> Result<PerfReport> {
    arch.validate()?;
    let bpe = arch.bytes_per_element as u64;
    let bw = arch.ext_bandwidth_bytes_per_cycle;
    let horizon = horizon.max(1);
    let mut cache = FilterCache::new(arch.filter_cache_bytes as u64);
    let n = p.segments.len();
    let mut segments = Vec::with_capacity(n);
    let mut compute_done = vec![0.0f64; n];
    let mut load_done = vec![0.0f64; n];
    let mut mac_count = 0u64;
    let mut filter_bytes = 0u64;
    let mut act_total = 0u64;
    let (mut compute_sum, mut filter_sum, mut act_sum, mut prog_sum) = (0.0, 0.0, 0.0, 0.0);
    for (i, seg) in p.segments.iter().enumerate() {
        let cv = section(seg, kernel::CONV_PE_ARRAY)?;
        let pf = section(seg, kernel::FILTER_PREFETCH)?;
        let (compute, macs) = conv_cost(cv, arch)?;
        let fetched = cache.fetch(
            wordn(pf, reg::prefetch::ADDR)?,
            wordn(pf, reg::prefetch::COUNT)?,
            bpe,
        ) + cache.fetch(
            wordn(pf, reg::prefetch::BIAS_ADDR)?,
            wordn(pf, reg::prefetch::BIAS_COUNT)?,
            bpe,
        );
        let filter_load = fetched as f64 / bw;
        let a_bytes = act_bytes(seg)? * bpe;
        let act_io = a_bytes as f64 / bw;
        // Register words ride the same external interface as data, so a
        // segment's configuration costs its exact wire footprint.
        let programming = segment_wire_bytes(seg) as f64 / bw;
        let prev_compute = if i > 0 { compute_done[i - 1] } else { 0.0 };
        let hidden_behind =
            if i > horizon { compute_done[i - 1 - horizon] } else { 0.0 };
        let load_start = if i > 0 { load_done[i - 1].max(hidden_behind) } else { 0.0 };
        load_done[i] = load_start + filter_load;
        compute_done[i] =
            prev_compute.max(load_done[i]) + programming + compute.max(act_io);
        mac_count += macs;
        filter_bytes += fetched;
        act_total += a_bytes;
        compute_sum += compute;
        filter_sum += filter_load;
        act_sum += act_io;
        prog_sum += programming;
        segments.push(SegmentCycles {
            index: seg.index,
            compute,
            filter_load,
            act_io,
            programming,
        });
    }
    let total = if n > 0 { compute_done[n - 1] } else { 0.0 };
    let lanes = (arch.q_vec * arch.p_vec * arch.c_vec * arch.k_vec * arch.s_vec) as f64;
    let dsp_efficiency =
        if compute_sum > 0.0 { mac_count as f64 / (compute_sum * lanes) } else { 0.0 };
    Ok(PerfReport {
        total_cycles: total,
        modeled_fps: if total > 0.0 { arch.freq_mhz * 1e6 / total } else { 0.0 },
        dsp_efficiency,
        mac_count,
        compute_cycles: compute_sum,
        filter_load_cycles: filter_sum,
        act_io_cycles: act_sum,
        programming_cycles: prog_sum,
        programming_fraction: if total > 0.0 { prog_sum / total } else { 0.0 },
        ext_bytes_moved: filter_bytes + act_total,
        filter_bytes_fetched: filter_bytes,
        act_bytes_moved: act_total,
        spillpoint_count: 0,
        prefetch_horizon: horizon,
        segments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vliw::registers::kernel;

    fn arch() -> ArchConfig {
        ArchConfig {
            q_vec: 4,
            p_vec: 2,
            c_vec: 4,
            k_vec: 64,
            s_vec: 3,
            stream_buffer_bytes: 1 << 16,
            filter_cache_bytes: 1 << 20,
            bytes_per_element: 4,
            ext_bandwidth_bytes_per_cycle: 32.0,
            freq_mhz: 300.0,
            xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
        }
    }

    /// A conv section with everything dense and no flags.
    fn conv_section(out: (u32, u32, u32), in_c: u32, filt: (u32, u32)) -> Section {
        let mut w = vec![0u32; reg::conv::WORDS];
        w[reg::conv::MODE] = reg::conv::MODE_CONV;
        w[reg::conv::OUT_H] = out.0;
        w[reg::conv::OUT_W] = out.1;
        w[reg::conv::OUT_K] = out.2;
        w[reg::conv::IN_C] = in_c;
        w[reg::conv::FILT_H] = filt.0;
        w[reg::conv::FILT_W] = filt.1;
        w[reg::conv::STRIDE] = 1;
        Section { kernel: kernel::CONV_PE_ARRAY, words: w }
    }

    #[test]
    fn k_quantization_iterations_and_efficiency() {
        let a = arch();
        // K=96 on a 64-wide array: 2 iterations, 75% of K slots useful.
        // Every other dimension divides its vector exactly.
        let sec = conv_section((2, 4, 96), 4, (1, 3));
        let (cycles, macs) = conv_cost(&sec, &a).unwrap();
        assert_eq!(cycles, 2.0);
        let lanes = (a.q_vec * a.p_vec * a.c_vec * a.k_vec * a.s_vec) as f64;
        assert_eq!(macs as f64 / (cycles * lanes), 0.75);
        // K_VEC=32: 3 iterations at 100%.
        let mut a32 = a.clone();
        a32.k_vec = 32;
        let (cycles, macs) = conv_cost(&sec, &a32).unwrap();
        assert_eq!(cycles, 3.0);
        let lanes = (a32.q_vec * a32.p_vec * a32.c_vec * a32.k_vec * a32.s_vec) as f64;
        assert_eq!(macs as f64 / (cycles * lanes), 1.0);
    }

    #[test]
    fn unit_filter_mode_recovers_the_idle_s_lanes() {
        let a = arch();
        // 1x1 filters: naive cycles leave the 3 S lanes 2/3 idle.
        let mut sec = conv_section((2, 12, 64), 4, (1, 1));
        let (naive, macs) = conv_cost(&sec, &a).unwrap();
        sec.words[reg::conv::FLAGS] |= reg::conv::flags::ONE_BY_ONE;
        let (opt, macs_opt) = conv_cost(&sec, &a).unwrap();
        assert_eq!(macs, macs_opt);
        assert_eq!(naive / opt, 3.0);
        // With the optimization the 1x1 conv reaches the same efficiency
        // as a fully-vectorized 3x3.
        let lanes = (a.q_vec * a.p_vec * a.c_vec * a.k_vec * a.s_vec) as f64;
        assert_eq!(macs as f64 / (opt * lanes), 1.0);
    }

    #[test]
    fn banded_filters_cost_only_their_read_channels() {
        let a = arch();
        let mut sec = conv_section((2, 4, 128), 128, (1, 3));
        let (dense_cycles, dense_macs) = conv_cost(&sec, &a).unwrap();
        sec.words[reg::conv::FLAGS] |= reg::conv::flags::BAND;
        sec.words[reg::conv::GROUP] = 64;
        sec.words[reg::conv::BAND_DEPTH] = 128;
        sec.words[reg::conv::DENSE_START] = 128;
        sec.words[reg::conv::DENSE_LEN] = 0;
        // Each 64-filter group reads only its own 64-channel band: half the
        // channels, half the cycles and MACs.
        let (band_cycles, band_macs) = conv_cost(&sec, &a).unwrap();
        assert_eq!(band_cycles * 2.0, dense_cycles);
        assert_eq!(band_macs * 2, dense_macs);
    }

    #[test]
    fn filter_cache_hits_cost_nothing_and_horizon_hides_loads() {
        let a = arch();
        let seg = |index: u32, pf_addr: u32| Segment {
            index,
            sections: vec![
                Section {
                    kernel: kernel::FILTER_PREFETCH,
                    words: vec![pf_addr, 4096, 0, 0],
                },
                Section {
                    kernel: kernel::STREAM_READER,
                    words: vec![0; reg::reader::WORDS],
                },
                conv_section((2, 4, 64), 4, (1, 3)),
                Section { kernel: kernel::XBAR, words: vec![0] },
                Section { kernel: kernel::STREAM_WRITER, words: vec![0; reg::writer::WORDS] },
            ],
        };
        // Same block twice: the second fetch is a cache hit.
        let p = Program { segments: vec![seg(0, 0), seg(1, 0)] };
        let r = model_cycles(&p, &a, 1).unwrap();
        assert_eq!(r.segments[0].filter_load, 512.0);
        assert_eq!(r.segments[1].filter_load, 0.0);
        assert_eq!(r.filter_bytes_fetched, 4096 * 4);
        // Two distinct blocks, horizon 1: the second load starts while the
        // first segment still computes, so it only pushes the timeline by
        // what compute cannot hide.
        let p2 = Program { segments: vec![seg(0, 0), seg(1, 5000)] };
        let r2 = model_cycles(&p2, &a, 1).unwrap();
        let serial = r2.segments[0].filter_load
            + r2.segments[1].filter_load
            + r2.segments.iter().map(|s| s.programming + s.compute).sum::<f64>();
        assert!(r2.total_cycles < serial, "{} !< {serial}", r2.total_cycles);
    }

    #[test]
    fn reading_unwritten_stream_elements_faults() {
        let a = arch();
        let mut rd = vec![0u32; reg::reader::WORDS];
        rd[reg::reader::SLOTS] = 1;
        rd[1 + reg::reader::LOC] = reg::reader::LOC_STREAM;
        rd[1 + reg::reader::SRC_H] = 2;
        rd[1 + reg::reader::SRC_W] = 2;
        rd[1 + reg::reader::SRC_D] = 1;
        rd[1 + reg::reader::H_STRIDE] = 1;
        rd[1 + reg::reader::W_STRIDE] = 1;
        rd[1 + reg::reader::H_LEN] = 2;
        rd[1 + reg::reader::W_LEN] = 2;
        rd[1 + reg::reader::D_LEN] = 1;
        let mut cv = vec![0u32; reg::conv::WORDS];
        cv[reg::conv::MODE] = reg::conv::MODE_BYPASS;
        let mut wr = vec![0u32; reg::writer::WORDS];
        wr[reg::writer::LOC] = reg::reader::LOC_STREAM;
        wr[reg::writer::ADDR] = 64;
        wr[reg::writer::DST_H] = 2;
        wr[reg::writer::DST_W] = 2;
        wr[reg::writer::DST_D] = 1;
        wr[reg::writer::H_LEN] = 2;
        wr[reg::writer::W_LEN] = 2;
        wr[reg::writer::D_LEN] = 1;
        let p = Program {
            segments: vec![Segment {
                index: 0,
                sections: vec![
                    Section { kernel: kernel::FILTER_PREFETCH, words: vec![0; 4] },
                    Section { kernel: kernel::STREAM_READER, words: rd },
                    Section { kernel: kernel::CONV_PE_ARRAY, words: cv },
                    Section { kernel: kernel::XBAR, words: vec![0] },
                    Section { kernel: kernel::STREAM_WRITER, words: wr },
                ],
            }],
        };
        let err = execute::<f64>(&p, &a, HashMap::new()).unwrap_err();
        assert!(matches!(err, Error::AddressFault(_)), "got {err:?}");
    }
}
