//! Frozen register tables shared by the code generator, the simulator, and
//! the disassembler.
//!
//! Every kernel on the instruction ring is programmed with a fixed table of
//! 32-bit words ("counter end values and control flags" — there are no
//! opcodes). The tables below are the single source of truth for what each
//! word position means; `TABLE_VERSION` is bumped on any layout change so a
//! stale program is rejected loudly rather than misdecoded.

/// Version of the register layout. Encoded nowhere in the stream today, but
/// asserted between the lowering and decoding halves of the crate.
pub const TABLE_VERSION: u32 = 1;

/// Kernel ids as they appear in section headers on the ring.
pub mod kernel {
    pub const END_OF_PROGRAM: u8 = 0;
    pub const CONV_PE_ARRAY: u8 = 1;
    pub const POOL: u8 = 2;
    pub const LRN: u8 = 3;
    pub const XBAR: u8 = 4;
    pub const STREAM_READER: u8 = 5;
    pub const STREAM_WRITER: u8 = 6;
    pub const FILTER_PREFETCH: u8 = 7;
    pub const LSTM_TAIL: u8 = 8;
    pub const TRANSPORT: u8 = 9;
}

pub fn kernel_name(id: u8) -> Option<&'static str> {
    Some(match id {
        kernel::END_OF_PROGRAM => "end",
        kernel::CONV_PE_ARRAY => "conv",
        kernel::POOL => "pool",
        kernel::LRN => "lrn",
        kernel::XBAR => "xbar",
        kernel::STREAM_READER => "reader",
        kernel::STREAM_WRITER => "writer",
        kernel::FILTER_PREFETCH => "prefetch",
        kernel::LSTM_TAIL => "lstm_tail",
        kernel::TRANSPORT => "transport",
        _ => return None,
    })
}

/// Convolution PE array: 18 words.
///
/// `MODE` 0 computes; 1 passes the fed window through untouched (the
/// backbone kernel still frames every subgraph, e.g. pool-only ones).
/// When `FLAGS` has `BAND` set, the filters are structurally sparse and each
/// `GROUP`-wide output block reads only its aligned input band below
/// `BAND_DEPTH` plus the shared dense window — see [`read_channels`].
pub mod conv {
    pub const MODE: usize = 0;
    pub const OUT_H: usize = 1;
    pub const OUT_W: usize = 2;
    pub const OUT_K: usize = 3;
    pub const IN_H: usize = 4;
    pub const IN_W: usize = 5;
    pub const IN_C: usize = 6;
    pub const FILT_H: usize = 7;
    pub const FILT_W: usize = 8;
    pub const STRIDE: usize = 9;
    pub const PAD_TOP: usize = 10;
    pub const PAD_LEFT: usize = 11;
    pub const FLAGS: usize = 12;
    pub const GROUP: usize = 13;
    pub const BAND_DEPTH: usize = 14;
    pub const DENSE_START: usize = 15;
    pub const DENSE_LEN: usize = 16;
    /// Global output-depth index of this section's first filter (K chunks).
    pub const K_START: usize = 17;
    pub const WORDS: usize = 18;

    pub const MODE_CONV: u32 = 0;
    pub const MODE_BYPASS: u32 = 1;

    pub mod flags {
        /// Add the bias vector (set only on the first input-depth slab).
        pub const BIAS: u32 = 1 << 0;
        /// Structurally sparse filters; read set per [`super::super::read_channels`].
        pub const BAND: u32 = 1 << 1;
        /// Unit-filter mode: the S_VEC lanes produce extra output pixels.
        pub const ONE_BY_ONE: u32 = 1 << 2;
        /// Rectify outputs as they drain (whole sums only, never partials).
        pub const RELU: u32 = 1 << 3;
    }
}

/// Pooling: exactly 12 words when active, or the 1-word bypass `[1]`.
///
/// `PAD` packs the top padding in bits 0..8 and the left padding in bits
/// 8..16; bottom/right padding is implied by the output extents.
pub mod pool {
    pub const BYPASS: usize = 0;
    pub const IMG_H: usize = 1;
    pub const IMG_W: usize = 2;
    pub const IMG_D: usize = 3;
    pub const WIN_H: usize = 4;
    pub const WIN_W: usize = 5;
    pub const STRIDE: usize = 6;
    pub const PAD: usize = 7;
    pub const KIND: usize = 8;
    pub const OUT_H: usize = 9;
    pub const OUT_W: usize = 10;
    pub const RESERVED: usize = 11;
    pub const WORDS: usize = 12;

    pub const KIND_MAX: u32 = 0;
    pub const KIND_AVG: u32 = 1;
}

/// Local response normalization: 11 words when active, or the bypass `[1]`.
/// `alpha`, `beta` and `k` travel as split f64 bit patterns so the
/// functional model loses nothing to re-encoding.
pub mod lrn {
    pub const BYPASS: usize = 0;
    pub const IMG_H: usize = 1;
    pub const IMG_W: usize = 2;
    pub const IMG_D: usize = 3;
    pub const LOCAL_SIZE: usize = 4;
    pub const ALPHA_HI: usize = 5;
    pub const ALPHA_LO: usize = 6;
    pub const BETA_HI: usize = 7;
    pub const BETA_LO: usize = 8;
    pub const K_HI: usize = 9;
    pub const K_LO: usize = 10;
    pub const WORDS: usize = 11;
}

/// LSTM activation tail: 5 words when active, or the bypass `[1]`.
///
/// Consumes `4*HIDDEN` gate pre-activations, reads the previous cell state
/// at `C_INIT_ADDR` (external, elements), writes the new one to
/// `C_OUT_ADDR`, and emits the `HIDDEN` outputs. `INTERLEAVED` 1 means
/// gates arrive i,g,f,o per hidden index; 0 means four gate blocks.
pub mod tail {
    pub const BYPASS: usize = 0;
    pub const HIDDEN: usize = 1;
    pub const INTERLEAVED: usize = 2;
    pub const C_INIT_ADDR: usize = 3;
    pub const C_OUT_ADDR: usize = 4;
    pub const WORDS: usize = 5;
}

/// Crossbar: word 0 is the chain length, then one kernel id per hop in the
/// order data flows from the PE array drain to the writer.
pub mod xbar {
    pub const CHAIN_LEN: usize = 0;
}

/// Stream-buffer reader: a slot count followed by four 13-word source
/// slots (unused slots are zeroed). Depth ranges of the active slots
/// concatenate in slot order at the PE array input.
pub mod reader {
    pub const SLOTS: usize = 0;
    pub const SLOT_WORDS: usize = 13;
    pub const MAX_SLOTS: usize = 4;
    pub const WORDS: usize = 1 + MAX_SLOTS * SLOT_WORDS;

    /// Word offsets within one slot.
    pub const LOC: usize = 0;
    pub const ADDR: usize = 1;
    pub const SRC_H: usize = 2;
    pub const SRC_W: usize = 3;
    pub const SRC_D: usize = 4;
    pub const H_STRIDE: usize = 5;
    pub const W_STRIDE: usize = 6;
    pub const H0: usize = 7;
    /// Rows *read*: view row `i` comes from source row `H0 + i*H_STRIDE`.
    pub const H_LEN: usize = 8;
    pub const W0: usize = 9;
    pub const W_LEN: usize = 10;
    pub const D0: usize = 11;
    pub const D_LEN: usize = 12;

    pub const LOC_STREAM: u32 = 0;
    pub const LOC_EXTERNAL: u32 = 1;
}

/// Stream-buffer writer: 12 words. `ADDR` is the entity base (elements,
/// stream or external per `LOC`); the region indexes into the full
/// `DST_H x DST_W x DST_D` extent.
pub mod writer {
    pub const LOC: usize = 0;
    pub const ADDR: usize = 1;
    pub const DST_H: usize = 2;
    pub const DST_W: usize = 3;
    pub const DST_D: usize = 4;
    pub const H0: usize = 5;
    pub const H_LEN: usize = 6;
    pub const W0: usize = 7;
    pub const W_LEN: usize = 8;
    pub const D0: usize = 9;
    pub const D_LEN: usize = 10;
    pub const FLAGS: usize = 11;
    pub const WORDS: usize = 12;

    pub mod flags {
        /// Read-modify-write: add to what the destination already holds.
        pub const ACCUMULATE: u32 = 1 << 0;
        /// Rectify after the accumulate (final input-depth slab only).
        pub const RELU: u32 = 1 << 1;
    }
}

/// Filter prefetch: 4 words. Addresses are external element indices into
/// the packed weight image; counts are element counts. `COUNT` 0 means the
/// section has nothing to fetch (bypass convolutions).
pub mod prefetch {
    pub const ADDR: usize = 0;
    pub const COUNT: usize = 1;
    pub const BIAS_ADDR: usize = 2;
    pub const BIAS_COUNT: usize = 3;
    pub const WORDS: usize = 4;
}

/// The single-word section a bypassed pool/LRN/tail kernel receives.
pub const BYPASS_WORD: u32 = 1;

/// Input channels filter `k_global` reads, as the packing order defines
/// them: the `GROUP`-aligned band below `band_depth` first, then the dense
/// window. Mirrors the graph-side annotation exactly; both the weight
/// packer and the PE loop iterate this sequence.
pub fn read_channels(
    k_global: usize,
    group: usize,
    band_depth: usize,
    dense_start: usize,
    dense_len: usize,
    in_c: usize,
) -> Vec<usize> {
    let g = k_global / group.max(1);
    let band_lo = (g * group).min(band_depth);
    let band_hi = ((g + 1) * group).min(band_depth).min(in_c);
    let mut set: Vec<usize> = (band_lo..band_hi).collect();
    set.extend(dense_start..(dense_start + dense_len).min(in_c));
    set
}

/// Split an f64 into (high, low) register words.
pub fn split_f64(x: f64) -> (u32, u32) {
    let bits = x.to_bits();
    ((bits >> 32) as u32, bits as u32)
}

/// Reassemble an f64 from its (high, low) register words.
pub fn join_f64(hi: u32, lo: u32) -> f64 {
    f64::from_bits(((hi as u64) << 32) | lo as u64)
}

/// Human-readable name of a word position, for the disassembler.
pub fn word_name(kernel_id: u8, idx: usize) -> Option<&'static str> {
    const CONV: [&str; conv::WORDS] = [
        "mode", "out_h", "out_w", "out_k", "in_h", "in_w", "in_c", "filt_h", "filt_w", "stride",
        "pad_top", "pad_left", "flags", "group", "band_depth", "dense_start", "dense_len",
        "k_start",
    ];
    const POOL: [&str; pool::WORDS] = [
        "bypass", "img_h", "img_w", "img_d", "win_h", "win_w", "stride", "pad", "kind", "out_h",
        "out_w", "reserved",
    ];
    const LRN: [&str; lrn::WORDS] = [
        "bypass", "img_h", "img_w", "img_d", "local_size", "alpha_hi", "alpha_lo", "beta_hi",
        "beta_lo", "k_hi", "k_lo",
    ];
    const TAIL: [&str; tail::WORDS] =
        ["bypass", "hidden", "interleaved", "c_init_addr", "c_out_addr"];
    const SLOT: [&str; reader::SLOT_WORDS] = [
        "loc", "addr", "src_h", "src_w", "src_d", "h_stride", "w_stride", "h0", "h_len", "w0",
        "w_len", "d0", "d_len",
    ];
    const WRITER: [&str; writer::WORDS] = [
        "loc", "addr", "dst_h", "dst_w", "dst_d", "h0", "h_len", "w0", "w_len", "d0", "d_len",
        "flags",
    ];
    const PREFETCH: [&str; prefetch::WORDS] = ["addr", "count", "bias_addr", "bias_count"];
    match kernel_id {
        kernel::CONV_PE_ARRAY => CONV.get(idx).copied(),
        kernel::POOL => POOL.get(idx).copied(),
        kernel::LRN => LRN.get(idx).copied(),
        kernel::LSTM_TAIL => TAIL.get(idx).copied(),
        kernel::STREAM_READER => {
            if idx == 0 {
                Some("slots")
            } else {
                SLOT.get((idx - 1) % reader::SLOT_WORDS).copied()
            }
        }
        kernel::STREAM_WRITER => WRITER.get(idx).copied(),
        kernel::FILTER_PREFETCH => PREFETCH.get(idx).copied(),
        kernel::XBAR => {
            if idx == 0 {
                Some("chain_len")
            } else {
                Some("hop")
            }
        }
        kernel::TRANSPORT => Some("segment"),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn read_channels_matches_graph_annotation() {
        // Same fixture as the graph-side unit test: group 4, band 8, dense [8, 11).
        assert_eq!(read_channels(0, 4, 8, 8, 3, 11), vec![0, 1, 2, 3, 8, 9, 10]);
        assert_eq!(read_channels(5, 4, 8, 8, 3, 11), vec![4, 5, 6, 7, 8, 9, 10]);
        // A group past the band reads only the dense window.
        assert_eq!(read_channels(9, 4, 8, 8, 3, 11), vec![8, 9, 10]);
    }

    #[test]
    fn f64_words_round_trip() {
        for x in [0.0, 1.0, -2.5, 1e-9, 7.3e300, f64::MIN_POSITIVE] {
            let (hi, lo) = split_f64(x);
            assert_eq!(join_f64(hi, lo), x);
        }
    }
}
