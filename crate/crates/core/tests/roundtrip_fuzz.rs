//! Wire-format fuzz: encode/decode must be an exact identity on thousands of
//! random programs (escape bytes included), byte-stable across calls, and
//! never panic on garbage input. Compiled pool-bearing programs must carry
//! fully-specified 12-word pool sections.

use overlay_core::arch::ArchConfig;
use overlay_core::compile::{compile_graph, CompileOptions};
use overlay_core::fixtures;
use overlay_core::graph::{Graph, Node, NodeKind, PoolAttrs, INPUT_ID};
use overlay_core::shape::TensorShape;
use overlay_core::vliw::registers::{kernel, pool};
use overlay_core::vliw::{decode, encode, Program, Section, Segment};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn arb_word(rng: &mut ChaCha8Rng) -> u32 {
    // Escape-heavy byte patterns dominate so the framing layer gets hit hard.
    match rng.gen_range(0..6) {
        0 => 0xFFFF_FFFF,
        1 => 0xFF00_FF00,
        2 => 0x00FF_00FF,
        3 => rng.gen::<u32>() | 0xFF,
        _ => rng.gen(),
    }
}

fn arb_program(rng: &mut ChaCha8Rng) -> Program {
    let segments = (0..rng.gen_range(1..=8))
        .map(|i| Segment {
            index: if rng.gen_bool(0.8) { i } else { arb_word(rng) },
            sections: (0..rng.gen_range(1..=6))
                .map(|_| Section {
                    kernel: rng.gen_range(kernel::CONV_PE_ARRAY..=kernel::LSTM_TAIL),
                    words: (0..rng.gen_range(0..=64)).map(|_| arb_word(rng)).collect(),
                })
                .collect(),
        })
        .collect();
    Program { segments }
}

#[test]
fn encode_decode_is_the_identity_on_random_programs() {
    let seed = fixtures::env_seed();
    let mut rng = fixtures::rng(seed ^ 0x5e71a);
    for case in 0..1000 {
        let p = arb_program(&mut rng);
        let bytes = encode(&p);
        assert_eq!(bytes, encode(&p), "case {case}, seed {seed}: encoding not stable");
        let back = decode(&bytes).unwrap_or_else(|e| panic!("case {case}, seed {seed}: {e}"));
        assert_eq!(back, p, "case {case}, seed {seed}: roundtrip changed the program");
    }
}

#[test]
fn decoding_garbage_errors_instead_of_panicking() {
    let seed = fixtures::env_seed();
    let mut rng = fixtures::rng(seed ^ 0x6a5ba6e);
    for _ in 0..1000 {
        let len = rng.gen_range(0..256);
        let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
        let _ = decode(&bytes); // any Err is fine; a panic is not
    }
    // Truncations of a valid stream must also fail cleanly.
    let p = arb_program(&mut rng);
    let bytes = encode(&p);
    for cut in 0..bytes.len() {
        let _ = decode(&bytes[..cut]);
    }
}

fn pool_graph(rng: &mut ChaCha8Rng) -> (Graph<f64>, ArchConfig) {
    let side = rng.gen_range(6..=12);
    let depth = rng.gen_range(2..=6);
    let shape = TensorShape::new(side, side, depth).unwrap();
    let conv = fixtures::rand_conv("c", &[INPUT_ID], depth, rng.gen_range(2..=8), 3, 1, 1, rng);
    let pool = Node::single(
        "p",
        "c",
        NodeKind::MaxPool(PoolAttrs { window_h: 2, window_w: 2, stride: 2, pad: 0 }),
    );
    let g = Graph::new(vec![conv, pool], vec!["p".into()], shape).unwrap();
    (g, fixtures::small_arch())
}

#[test]
fn compiled_programs_roundtrip_and_pool_sections_hold_twelve_words() {
    let seed = fixtures::env_seed();
    let mut rng = fixtures::rng(seed ^ 0x9001);
    let mut active_pools = 0usize;
    for case in 0..30 {
        let (g, arch) = pool_graph(&mut rng);
        let c = compile_graph(&g, &arch, &CompileOptions::default())
            .unwrap_or_else(|e| panic!("case {case}, seed {seed}: {e}"));
        let bytes = encode(&c.program);
        let back = decode(&bytes).unwrap();
        assert_eq!(back, c.program, "case {case}, seed {seed}: compiled roundtrip");
        for seg in &c.program.segments {
            for sec in seg.sections.iter().filter(|s| s.kernel == kernel::POOL) {
                if sec.words[pool::BYPASS] == 0 {
                    assert_eq!(
                        sec.words.len(),
                        pool::WORDS,
                        "case {case}: active pool section must carry every field"
                    );
                    assert_eq!(pool::WORDS, 12);
                    active_pools += 1;
                }
            }
        }
    }
    assert!(active_pools >= 30, "fixtures stopped producing pool segments");
}
