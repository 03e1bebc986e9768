//! Byte framing for the 8-bit instruction ring.
//!
//! The stream is a sequence of headers and little-endian 32-bit payload
//! words. A header is the escape byte `0xFF` followed by a kernel id; data
//! bytes equal to `0xFF` are written as `0xFF 0xFE` so a header is always
//! recognizable mid-stream. Each segment opens with a transport header and
//! its segment-index word, and the whole program ends with `[0xFF, 0x00]`.

use crate::error::{Error, Result};

use super::registers::kernel;

/// One kernel's register load: the words that follow its header.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub kernel: u8,
    pub words: Vec<u32>,
}

/// Everything delivered for one execution step, in ring order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub index: u32,
    pub sections: Vec<Section>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Program {
    pub segments: Vec<Segment>,
}

impl Program {
    /// Payload words, including each segment's index word.
    pub fn word_count(&self) -> usize {
        self.segments
            .iter()
            .map(|s| 1 + s.sections.iter().map(|sec| sec.words.len()).sum::<usize>())
            .sum()
    }

    /// Headers on the ring: one per section, one per segment, plus the
    /// end-of-program marker.
    pub fn header_count(&self) -> usize {
        1 + self.segments.iter().map(|s| 1 + s.sections.len()).sum::<usize>()
    }
}

const ESCAPE: u8 = 0xFF;
const LITERAL_ESCAPE: u8 = 0xFE;

fn push_word(out: &mut Vec<u8>, w: u32) {
    for b in w.to_le_bytes() {
        if b == ESCAPE {
            out.push(ESCAPE);
            out.push(LITERAL_ESCAPE);
        } else {
            out.push(b);
        }
    }
}

fn encode_segment(out: &mut Vec<u8>, seg: &Segment) {
    out.push(ESCAPE);
    out.push(kernel::TRANSPORT);
    push_word(out, seg.index);
    for sec in &seg.sections {
        out.push(ESCAPE);
        out.push(sec.kernel);
        for &w in &sec.words {
            push_word(out, w);
        }
    }
}

/// Exact on-the-wire size of one segment, escapes included — what the
/// performance model charges against external bandwidth.
pub fn segment_wire_bytes(seg: &Segment) -> u64 {
    let mut buf = Vec::new();
    encode_segment(&mut buf, seg);
    buf.len() as u64
}

pub fn encode(p: &Program) -> Vec<u8> {
    let mut out = Vec::new();
    for seg in &p.segments {
        encode_segment(&mut out, seg);
    }
    out.push(ESCAPE);
    out.push(kernel::END_OF_PROGRAM);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    /// Is the cursor sitting on a header (`0xFF` not followed by the
    /// literal-escape byte)?
    fn at_header(&self) -> bool {
        self.bytes.get(self.pos) == Some(&ESCAPE)
            && self.bytes.get(self.pos + 1) != Some(&LITERAL_ESCAPE)
    }

    fn take_header(&mut self) -> Result<u8> {
        if !self.at_header() {
            return Err(Error::Framing(format!(
                "expected a kernel header at byte {}",
                self.pos
            )));
        }
        let id = *self
            .bytes
            .get(self.pos + 1)
            .ok_or_else(|| Error::Framing("stream ends inside a header".into()))?;
        self.pos += 2;
        Ok(id)
    }

    fn take_word(&mut self) -> Result<u32> {
        let mut bytes = [0u8; 4];
        for b in &mut bytes {
            match self.bytes.get(self.pos) {
                None => return Err(Error::Framing("stream ends inside a word".into())),
                Some(&ESCAPE) => {
                    if self.bytes.get(self.pos + 1) != Some(&LITERAL_ESCAPE) {
                        return Err(Error::Framing(format!(
                            "header interrupts a word at byte {}",
                            self.pos
                        )));
                    }
                    *b = ESCAPE;
                    self.pos += 2;
                }
                Some(&v) => {
                    *b = v;
                    self.pos += 1;
                }
            }
        }
        Ok(u32::from_le_bytes(bytes))
    }

    /// Words up to the next header (which is never consumed).
    fn take_words(&mut self) -> Result<Vec<u32>> {
        let mut words = Vec::new();
        while self.pos < self.bytes.len() && !self.at_header() {
            words.push(self.take_word()?);
        }
        if self.pos >= self.bytes.len() {
            return Err(Error::Framing("stream ends without an end-of-program header".into()));
        }
        Ok(words)
    }
}

pub fn decode(bytes: &[u8]) -> Result<Program> {
    let mut r = Reader { bytes, pos: 0 };
    let mut segments: Vec<Segment> = Vec::new();
    loop {
        let id = r.take_header()?;
        match id {
            kernel::END_OF_PROGRAM => {
                if r.pos != bytes.len() {
                    return Err(Error::Framing(format!(
                        "{} trailing bytes after end-of-program",
                        bytes.len() - r.pos
                    )));
                }
                return Ok(Program { segments });
            }
            kernel::TRANSPORT => {
                let index = r.take_word()?;
                // The index word may be followed directly by another header.
                segments.push(Segment { index, sections: Vec::new() });
            }
            kernel::CONV_PE_ARRAY
            | kernel::POOL
            | kernel::LRN
            | kernel::XBAR
            | kernel::STREAM_READER
            | kernel::STREAM_WRITER
            | kernel::FILTER_PREFETCH
            | kernel::LSTM_TAIL => {
                let words = r.take_words()?;
                let seg = segments.last_mut().ok_or_else(|| {
                    Error::Framing("kernel section before any transport header".into())
                })?;
                seg.sections.push(Section { kernel: id, words });
            }
            other => return Err(Error::UnknownKernel(other)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_program_is_the_end_header() {
        let p = Program::default();
        assert_eq!(encode(&p), vec![0xFF, 0x00]);
        assert_eq!(decode(&[0xFF, 0x00]).unwrap(), p);
    }

    #[test]
    fn single_word_for_kernel_three() {
        let p = Program {
            segments: vec![Segment {
                index: 0,
                sections: vec![Section { kernel: 3, words: vec![0x01020304] }],
            }],
        };
        let bytes = encode(&p);
        // Segment header + index word, then the section.
        assert_eq!(
            bytes,
            vec![0xFF, 0x09, 0x00, 0x00, 0x00, 0x00, 0xFF, 0x03, 0x04, 0x03, 0x02, 0x01, 0xFF, 0x00]
        );
        // The section itself is the pinned byte pattern.
        assert_eq!(&bytes[6..12], &[0xFF, 0x03, 0x04, 0x03, 0x02, 0x01]);
        assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn escape_bytes_survive_round_trip() {
        let p = Program {
            segments: vec![Segment {
                index: 0xFFFF_FFFF,
                sections: vec![Section { kernel: 1, words: vec![0xFFFE_FFFF, 0xFF, 0xFE00] }],
            }],
        };
        let bytes = encode(&p);
        assert_eq!(decode(&bytes).unwrap(), p);
        // No unescaped 0xFF outside headers: every 0xFF is followed by a
        // kernel id (< 0x0A) or the literal marker.
        for (i, w) in bytes.windows(2).enumerate() {
            if w[0] == 0xFF {
                assert!(
                    w[1] == 0xFE || w[1] < 0x0A,
                    "naked escape at byte {i}: {:02x?}",
                    w
                );
            }
        }
    }

    #[test]
    fn truncated_word_is_a_framing_error() {
        let p = Program {
            segments: vec![Segment {
                index: 7,
                sections: vec![Section { kernel: 2, words: vec![1, 2] }],
            }],
        };
        let bytes = encode(&p);
        for cut in 1..bytes.len() {
            assert!(decode(&bytes[..cut]).is_err(), "cut at {cut} decoded");
        }
    }

    #[test]
    fn unknown_kernel_id_is_rejected() {
        let err = decode(&[0xFF, 0x42, 0xFF, 0x00]).unwrap_err();
        assert!(matches!(err, Error::UnknownKernel(0x42)));
    }

    #[test]
    fn section_before_any_segment_is_rejected() {
        let err = decode(&[0xFF, 0x01, 0x01, 0x02, 0x03, 0x04, 0xFF, 0x00]).unwrap_err();
        assert!(matches!(err, Error::Framing(_)));
    }

    fn arb_program() -> impl Strategy<Value = Program> {
        let section = (1u8..=8, proptest::collection::vec(any::<u32>(), 0..6))
            .prop_map(|(kernel, words)| Section { kernel, words });
        let segment = (any::<u32>(), proptest::collection::vec(section, 0..5))
            .prop_map(|(index, sections)| Segment { index, sections });
        proptest::collection::vec(segment, 0..6).prop_map(|segments| Program { segments })
    }

    proptest! {
        #[test]
        fn round_trip_identity(p in arb_program()) {
            let bytes = encode(&p);
            prop_assert_eq!(decode(&bytes).unwrap(), p);
        }
    }
}
