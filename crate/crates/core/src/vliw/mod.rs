//! Instruction-stream codegen: register tables, the ring byte format, and
//! the lowering from execution plans to programs.

pub mod encode;
pub mod lower;
pub mod registers;

pub use encode::{decode, encode, Program, Section, Segment};
pub use lower::{build_image, emit_program, ImageLayout, LowerOptions, TailSlot};

use std::fmt::Write as _;

/// Human-readable listing of a program, one line per register word.
pub fn disasm(p: &Program) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "; {} segments, {} words", p.segments.len(), p.word_count());
    for seg in &p.segments {
        let _ = writeln!(out, "segment {}:", seg.index);
        for sec in &seg.sections {
            let name = registers::kernel_name(sec.kernel).unwrap_or("?");
            if sec.words == [registers::BYPASS_WORD]
                && matches!(
                    sec.kernel,
                    registers::kernel::POOL
                        | registers::kernel::LRN
                        | registers::kernel::LSTM_TAIL
                )
            {
                let _ = writeln!(out, "  {name}: bypass");
                continue;
            }
            let _ = writeln!(out, "  {name}:");
            for (i, w) in sec.words.iter().enumerate() {
                let label = registers::word_name(sec.kernel, i).unwrap_or("w");
                let _ = writeln!(out, "    [{i:>2}] {label:<12} = {w:#010x} ({w})");
            }
        }
    }
    out.push_str("end\n");
    out
}
