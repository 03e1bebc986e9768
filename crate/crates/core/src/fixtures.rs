//! Seeded fixture generators shared by the bundled test suites and the CLI
//! self-test: random graphs for differential testing, pattern graphs for
//! each rewrite pass, and the fixed benchmark networks the regression
//! criteria measure.
//!
//! Everything is deterministic given a seed; `env_seed` reads the
//! `OVERLAY_SEED` environment variable so a failing fixture can be replayed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::ArchConfig;
use crate::graph::{
    ConvAttrs, FcAttrs, Graph, LrnAttrs, LstmAttrs, Node, NodeKind, PoolAttrs, INPUT_ID,
};
use crate::scalar::Scalar;
use crate::shape::TensorShape;
use crate::tensor::Tensor;

pub const SEED_ENV: &str = "OVERLAY_SEED";
pub const DEFAULT_SEED: u64 = 20260501;

/// Seed from `OVERLAY_SEED`, or the fixed default.
pub fn env_seed() -> u64 {
    std::env::var(SEED_ENV).ok().and_then(|s| s.parse().ok()).unwrap_or(DEFAULT_SEED)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: TensorShape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let data = (0..shape.elems()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random dense convolution node.
#[allow(clippy::too_many_arguments)]
pub fn rand_conv(
    id: &str,
    inputs: &[&str],
    in_depth: usize,
    out_depth: usize,
    filter: usize,
    stride: usize,
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> Node<f64> {
    Node::conv(
        id,
        inputs,
        ConvAttrs {
            filter_h: filter,
            filter_w: filter,
            out_depth,
            in_depth,
            stride,
            pad,
            weights: (0..out_depth * filter * filter * in_depth)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
            bias: (0..out_depth).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            shorten: None,
        },
    )
}

/// Convolution whose filters are structurally sparse: filter `k` (in its
/// `group`-aligned block) has nonzero weights only in its own input band
/// below `tail_lo` plus the dense tail `[tail_lo, in_depth)`. This is the
/// structure the shortening pass detects.
#[allow(clippy::too_many_arguments)]
pub fn banded_conv(
    id: &str,
    input: &str,
    in_depth: usize,
    out_depth: usize,
    group: usize,
    tail_lo: usize,
    filter: usize,
    pad: usize,
    rng: &mut ChaCha8Rng,
) -> Node<f64> {
    let mut weights = vec![0.0f64; out_depth * filter * filter * in_depth];
    let nonzero = |rng: &mut ChaCha8Rng| -> f64 {
        let v: f64 = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            -v
        } else {
            v
        }
    };
    for k in 0..out_depth {
        let g = k / group;
        let band = (g * group).min(tail_lo)..((g + 1) * group).min(tail_lo).min(in_depth);
        for r in 0..filter {
            for s in 0..filter {
                let base = ((k * filter + r) * filter + s) * in_depth;
                for c in band.clone().chain(tail_lo..in_depth) {
                    weights[base + c] = nonzero(rng);
                }
            }
        }
    }
    Node::conv(
        id,
        &[input],
        ConvAttrs {
            filter_h: filter,
            filter_w: filter,
            out_depth,
            in_depth,
            stride: 1,
            pad,
            weights,
            bias: (0..out_depth).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            shorten: None,
        },
    )
}

fn rand_lstm_attrs(
    hidden: usize,
    n_x: usize,
    n_h: usize,
    rng: &mut ChaCha8Rng,
) -> LstmAttrs<f64> {
    let mat = |rng: &mut ChaCha8Rng, n: usize| -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect()
    };
    LstmAttrs {
        hidden,
        n_x,
        n_h,
        w: std::array::from_fn(|_| mat(rng, hidden * n_x)),
        u: std::array::from_fn(|_| mat(rng, hidden * n_h)),
        b: std::array::from_fn(|_| mat(rng, hidden)),
        c_init: mat(rng, hidden),
    }
}

// ---------------------------------------------------------------------------
// Architectures.

/// Small overlay build used by most functional tests: modest vectors so
/// quantization effects show up at toy sizes.
pub fn small_arch() -> ArchConfig {
    ArchConfig {
        q_vec: 4,
        p_vec: 2,
        c_vec: 4,
        k_vec: 8,
        s_vec: 3,
        stream_buffer_bytes: 1 << 16,
        filter_cache_bytes: 1 << 16,
        bytes_per_element: 4,
        ext_bandwidth_bytes_per_cycle: 16.0,
        freq_mhz: 300.0,
        xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
    }
}

/// Large overlay build: wide PE array, half-precision elements, the shape
/// of a batch-1 FPGA deployment.
pub fn wide_arch() -> ArchConfig {
    ArchConfig {
        q_vec: 4,
        p_vec: 2,
        c_vec: 8,
        k_vec: 64,
        s_vec: 3,
        stream_buffer_bytes: 4 << 20,
        filter_cache_bytes: 2 << 20,
        bytes_per_element: 2,
        ext_bandwidth_bytes_per_cycle: 64.0,
        freq_mhz: 300.0,
        xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
    }
}

/// Build for the residual-ladder benchmark: half-precision elements and a
/// stream buffer sized so the early full-resolution tensors spill unless
/// the planner slices them in groups.
pub fn ladder_arch() -> ArchConfig {
    ArchConfig {
        q_vec: 4,
        p_vec: 2,
        c_vec: 4,
        k_vec: 8,
        s_vec: 3,
        stream_buffer_bytes: 49152,
        filter_cache_bytes: 16384,
        bytes_per_element: 2,
        ext_bandwidth_bytes_per_cycle: 16.0,
        freq_mhz: 300.0,
        xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
    }
}

/// Build for the recurrent-network bandwidth study. `gb_per_s` is the
/// external interface speed; the datapath is held constant so latency
/// differences are pure memory effects.
pub fn lstm_arch(gb_per_s: f64) -> ArchConfig {
    let freq_mhz = 300.0;
    ArchConfig {
        q_vec: 1,
        p_vec: 1,
        c_vec: 16,
        k_vec: 64,
        s_vec: 1,
        stream_buffer_bytes: 4 << 20,
        filter_cache_bytes: 2 << 20,
        bytes_per_element: 2,
        ext_bandwidth_bytes_per_cycle: gb_per_s * 1e9 / (freq_mhz * 1e6),
        freq_mhz,
        xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
    }
}

// ---------------------------------------------------------------------------
// Random mixed graphs for differential testing.

/// A random network mixing convolution, pooling, LRN, element-wise adds,
/// fully-connected layers and LSTM cells, with an input to feed it.
/// Dimensions stay small so a hundred of these interpret in seconds.
pub fn random_graph(rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    if rng.gen_ratio(1, 5) {
        random_lstm_mix(rng)
    } else {
        random_spatial_mix(rng)
    }
}

fn random_spatial_mix(rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    let shape = TensorShape::new(
        rng.gen_range(4..=10),
        rng.gen_range(4..=10),
        rng.gen_range(1..=8),
    )
    .unwrap();
    let mut nodes: Vec<Node<f64>> = Vec::new();
    let mut cur = INPUT_ID.to_string();
    let mut cur_shape = shape;
    let mut n = 0usize;
    let mut fresh = move || {
        n += 1;
        format!("n{n}")
    };
    let ops = rng.gen_range(2..=6);
    for _ in 0..ops {
        let roll = rng.gen_range(0..100);
        if roll < 40 {
            // Convolution, sometimes strided.
            let f = if rng.gen_bool(0.5) { 3 } else { 1 };
            let pad = if f == 3 { 1 } else { 0 };
            let stride =
                if cur_shape.h >= 4 && cur_shape.w >= 4 && rng.gen_bool(0.15) { 2 } else { 1 };
            let out_d = rng.gen_range(1..=12);
            let id = fresh();
            nodes.push(rand_conv(&id, &[&cur], cur_shape.d, out_d, f, stride, pad, rng));
            cur_shape = TensorShape::new(
                (cur_shape.h + 2 * pad - f) / stride + 1,
                (cur_shape.w + 2 * pad - f) / stride + 1,
                out_d,
            )
            .unwrap();
            cur = id;
        } else if roll < 55 && cur_shape.h >= 2 && cur_shape.w >= 2 {
            let attrs = PoolAttrs { window_h: 2, window_w: 2, stride: 2, pad: 0 };
            let kind = if rng.gen_bool(0.5) {
                NodeKind::MaxPool(attrs)
            } else {
                NodeKind::AvgPool(attrs)
            };
            let id = fresh();
            nodes.push(Node::single(&id, &cur, kind));
            cur_shape =
                TensorShape::new((cur_shape.h - 2) / 2 + 1, (cur_shape.w - 2) / 2 + 1, cur_shape.d)
                    .unwrap();
            cur = id;
        } else if roll < 65 {
            let id = fresh();
            nodes.push(Node::single(
                &id,
                &cur,
                NodeKind::Lrn(LrnAttrs {
                    local_size: if rng.gen_bool(0.5) { 3 } else { 5 },
                    alpha: rng.gen_range(1e-4..1e-2),
                    beta: rng.gen_range(0.5..0.9),
                    k: rng.gen_range(1.0..2.0),
                }),
            ));
            cur = id;
        } else if roll < 75 {
            let id = fresh();
            nodes.push(Node::single(&id, &cur, NodeKind::Relu));
            cur = id;
        } else if roll < 90 {
            // Residual fork: two convolutions of equal shape, added.
            let (a, b, add) = (fresh(), fresh(), fresh());
            let d = cur_shape.d;
            nodes.push(rand_conv(&a, &[&cur], d, d, 1, 1, 0, rng));
            nodes.push(rand_conv(&b, &[&cur], d, d, 3, 1, 1, rng));
            nodes.push(Node {
                id: add.clone(),
                kind: NodeKind::EltwiseAdd,
                inputs: vec![a, b],
            });
            cur = add;
        } else {
            // Classifier tail; nothing video-shaped comes after it.
            let (fl, fc) = (fresh(), fresh());
            nodes.push(Node::single(&fl, &cur, NodeKind::Flatten));
            let in_dim = (cur_shape.elems()) as usize;
            let out_dim = rng.gen_range(1..=16);
            nodes.push(Node::single(
                &fc,
                &fl,
                NodeKind::FullyConnected(FcAttrs {
                    in_dim,
                    out_dim,
                    weights: (0..in_dim * out_dim).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                    bias: (0..out_dim).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                }),
            ));
            cur = fc;
            break;
        }
    }
    if nodes.is_empty() {
        let id = "n1".to_string();
        nodes.push(rand_conv(&id, &[INPUT_ID], shape.d, 4, 3, 1, 1, rng));
        cur = id;
    }
    let mut outputs = vec![cur];
    if nodes.len() > 2 && rng.gen_bool(0.2) {
        // A second output from the middle of the network.
        let mid = nodes[nodes.len() / 2 - 1].id.clone();
        if !outputs.contains(&mid) {
            outputs.push(mid);
        }
    }
    let g = Graph::new(nodes, outputs, shape).unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

fn random_lstm_mix(rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    let hidden = rng.gen_range(2..=8);
    let n_x = rng.gen_range(2..=8);
    let shape = TensorShape::new(1, 1, n_x + hidden).unwrap();
    let selector = |id: &str, lo: usize, n: usize| {
        let mut w = vec![0.0; n * (n_x + hidden)];
        for k in 0..n {
            w[k * (n_x + hidden) + lo + k] = 1.0;
        }
        Node::conv(
            id,
            &[INPUT_ID],
            ConvAttrs {
                filter_h: 1,
                filter_w: 1,
                out_depth: n,
                in_depth: n_x + hidden,
                stride: 1,
                pad: 0,
                weights: w,
                bias: vec![0.0; n],
                shorten: None,
            },
        )
    };
    let mut nodes = vec![
        selector("x", 0, n_x),
        selector("h", n_x, hidden),
        Node {
            id: "cell1".into(),
            kind: NodeKind::LstmCell(rand_lstm_attrs(hidden, n_x, hidden, rng)),
            inputs: vec!["x".into(), "h".into()],
        },
    ];
    let mut outputs = vec!["cell1".to_string()];
    if rng.gen_bool(0.5) {
        nodes.push(Node {
            id: "cell2".into(),
            kind: NodeKind::LstmCell(rand_lstm_attrs(hidden, hidden, hidden, rng)),
            inputs: vec!["cell1".into(), "cell1".into()],
        });
        outputs = vec!["cell2".into()];
    }
    let g = Graph::new(nodes, outputs, shape).unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

// ---------------------------------------------------------------------------
// Pattern fixtures, one family per rewrite pass.

/// Convolution stem into a flattened fully-connected head (one or two FC
/// layers) — the matrix-to-convolution mapping's home turf.
pub fn random_fc_graph(rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    let shape =
        TensorShape::new(rng.gen_range(2..=6), rng.gen_range(2..=6), rng.gen_range(1..=6))
            .unwrap();
    let d = rng.gen_range(2..=8);
    let mut nodes = vec![
        rand_conv("c", &[INPUT_ID], shape.d, d, 3, 1, 1, rng),
        Node::single("fl", "c", NodeKind::Flatten),
    ];
    let in_dim = shape.h * shape.w * d;
    let mid = rng.gen_range(2..=12);
    let fc = |id: &str, input: &str, n: usize, m: usize, rng: &mut ChaCha8Rng| {
        Node::single(
            id,
            input,
            NodeKind::FullyConnected(FcAttrs {
                in_dim: n,
                out_dim: m,
                weights: (0..n * m).map(|_| rng.gen_range(-0.3..0.3)).collect(),
                bias: (0..m).map(|_| rng.gen_range(-0.5..0.5)).collect(),
            }),
        )
    };
    nodes.push(fc("fc1", "fl", in_dim, mid, rng));
    let mut outputs = vec!["fc1".to_string()];
    if rng.gen_bool(0.5) {
        nodes.push(Node::single("r", "fc1", NodeKind::Relu));
        nodes.push(fc("fc2", "r", mid, rng.gen_range(1..=8), rng));
        outputs = vec!["fc2".into()];
    }
    let g = Graph::new(nodes, outputs, shape).unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

/// Average pooling (windowed or global) between convolutions.
pub fn random_avgpool_graph(rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    let shape =
        TensorShape::new(rng.gen_range(4..=10), rng.gen_range(4..=10), rng.gen_range(1..=6))
            .unwrap();
    let d = rng.gen_range(2..=8);
    let mut nodes = vec![rand_conv("c", &[INPUT_ID], shape.d, d, 3, 1, 1, rng)];
    if rng.gen_bool(0.5) {
        nodes.push(Node::single("gap", "c", NodeKind::GlobalAvgPool));
    } else {
        let win = rng.gen_range(2..=3.min(shape.h).min(shape.w));
        nodes.push(Node::single(
            "gap",
            "c",
            NodeKind::AvgPool(PoolAttrs {
                window_h: win,
                window_w: win,
                stride: rng.gen_range(1..=win),
                pad: 0,
            }),
        ));
    }
    let g = Graph::new(nodes, vec!["gap".into()], shape).unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

/// Element-wise addition of two branches that do *not* form a mergeable
/// residual module (mixed filter sizes) — the generic concat-identity
/// lowering handles these.
pub fn random_eltwise_graph(rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    let shape =
        TensorShape::new(rng.gen_range(4..=8), rng.gen_range(4..=8), rng.gen_range(1..=6))
            .unwrap();
    let d = rng.gen_range(2..=8);
    let mut nodes = vec![
        rand_conv("a", &[INPUT_ID], shape.d, d, 3, 1, 1, rng),
        rand_conv("b", &[INPUT_ID], shape.d, d, 3, 1, 1, rng),
        Node { id: "add".into(), kind: NodeKind::EltwiseAdd, inputs: vec!["a".into(), "b".into()] },
    ];
    let mut outputs = vec!["add".to_string()];
    if rng.gen_bool(0.5) {
        nodes.push(Node::single("r", "add", NodeKind::Relu));
        outputs = vec!["r".into()];
    }
    let g = Graph::new(nodes, outputs, shape).unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

/// A two-branch residual module. `kind` 1: both branches end in exclusive
/// 1x1 convolutions (directly mergeable). `kind` 2: both branch entries
/// are strided (the stride must be hoisted first). `kind` 3: the skip
/// branch is a bare wire (an identity convolution must be synthesized).
pub fn random_resmodule_graph(rng: &mut ChaCha8Rng, kind: u8) -> (Graph<f64>, Tensor<f64>) {
    let shape =
        TensorShape::new(rng.gen_range(6..=10), rng.gen_range(6..=10), rng.gen_range(2..=6))
            .unwrap();
    let d = rng.gen_range(2..=6);
    let stride = if kind == 2 { 2 } else { 1 };
    let mut nodes = vec![rand_conv("stem", &[INPUT_ID], shape.d, d, 3, 1, 1, rng)];
    match kind {
        1 | 2 => {
            nodes.push(rand_conv("p", &["stem"], d, d, 1, stride, 0, rng));
            nodes.push(rand_conv("q1", &["stem"], d, d, 1, stride, 0, rng));
            nodes.push(Node::single("q1r", "q1", NodeKind::Relu));
            nodes.push(rand_conv("q2", &["q1r"], d, d, 1, 1, 0, rng));
            nodes.push(Node {
                id: "add".into(),
                kind: NodeKind::EltwiseAdd,
                inputs: vec!["p".into(), "q2".into()],
            });
        }
        3 => {
            nodes.push(rand_conv("q1", &["stem"], d, d, 1, 1, 0, rng));
            nodes.push(Node::single("q1r", "q1", NodeKind::Relu));
            nodes.push(rand_conv("q2", &["q1r"], d, d, 1, 1, 0, rng));
            nodes.push(Node {
                id: "add".into(),
                kind: NodeKind::EltwiseAdd,
                inputs: vec!["stem".into(), "q2".into()],
            });
        }
        _ => panic!("kind must be 1, 2 or 3"),
    }
    nodes.push(Node::single("out", "add", NodeKind::Relu));
    let g = Graph::new(nodes, vec!["out".into()], shape).unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

/// Convolutions with genuinely banded filters for the shortening pass.
/// `group` should match the target architecture's K vector.
pub fn random_shorten_graph(rng: &mut ChaCha8Rng, group: usize) -> (Graph<f64>, Tensor<f64>) {
    let spatial = rng.gen_range(4..=8);
    let in_depth = group * rng.gen_range(2..=4);
    let shape = TensorShape::new(spatial, spatial, in_depth).unwrap();
    let out_depth = in_depth;
    let tail_lo = group * rng.gen_range(1..=(in_depth / group - 1));
    let nodes = vec![
        banded_conv("bc", INPUT_ID, in_depth, out_depth, group, tail_lo, 3, 1, rng),
        Node::single("r", "bc", NodeKind::Relu),
    ];
    let g = Graph::new(nodes, vec!["r".into()], shape).unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

/// An LSTM cell (with selector convolutions feeding x and h) for the
/// fusion pass.
pub fn random_lstm_graph(rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    random_lstm_mix(rng)
}

// ---------------------------------------------------------------------------
// Fixed benchmark networks.

/// A single LSTM cell reading the staged input as both x and h. Fuses to
/// one subgraph; decomposes to many.
pub fn lstm_cell_graph(hidden: usize, rng: &mut ChaCha8Rng) -> (Graph<f64>, Tensor<f64>) {
    let shape = TensorShape::new(1, 1, hidden).unwrap();
    let g = Graph::new(
        vec![Node {
            id: "cell".into(),
            kind: NodeKind::LstmCell(rand_lstm_attrs(hidden, hidden, hidden, rng)),
            inputs: vec![INPUT_ID.into(), INPUT_ID.into()],
        }],
        vec!["cell".into()],
        shape,
    )
    .unwrap();
    let t = rand_tensor(shape, rng);
    (g, t)
}

/// A stack of `layers` LSTM cells, `hidden` wide, single timestep: layer 1
/// reads the staged input as x and h, each later layer reads the previous
/// layer's output as both. Weights are zero — this network exists for the
/// performance model, where only dimensions matter.
pub fn lstm_stack<S: Scalar>(layers: usize, hidden: usize) -> Graph<S> {
    let shape = TensorShape::new(1, 1, hidden).unwrap();
    let zeros = |n: usize| vec![S::zero(); n];
    let mut nodes = Vec::with_capacity(layers);
    let mut prev = INPUT_ID.to_string();
    for l in 1..=layers {
        let id = format!("l{l}");
        nodes.push(Node {
            id: id.clone(),
            kind: NodeKind::LstmCell(LstmAttrs {
                hidden,
                n_x: hidden,
                n_h: hidden,
                w: std::array::from_fn(|_| zeros(hidden * hidden)),
                u: std::array::from_fn(|_| zeros(hidden * hidden)),
                b: std::array::from_fn(|_| zeros(hidden)),
                c_init: zeros(hidden),
            }),
            inputs: vec![prev.clone(), prev.clone()],
        });
        prev = id;
    }
    Graph::new(nodes, vec![prev], shape).unwrap()
}

/// Residual benchmark network for the optimization ladder, paired with
/// [`ladder_arch`]. Full-resolution 1x1 stages up front (memory-bound:
/// their tensors spill unless group-sliced), residual modules of all three
/// shapes in the middle (mergeable, 1x1-rich), and a banded 3x3
/// convolution near the end (shortenable). Fixed internal seed.
pub fn mini_resnet() -> (Graph<f64>, Tensor<f64>) {
    let mut rng = rng(0x5e5);
    let shape = TensorShape::new(32, 32, 16).unwrap();
    let nodes = vec![
        // Full-resolution region: 32x32x16 tensors, 32 KiB each at 2 B.
        rand_conv("stem", &[INPUT_ID], 16, 16, 3, 1, 1, &mut rng),
        Node::single("stem_r", "stem", NodeKind::Relu),
        rand_conv("f1", &["stem_r"], 16, 16, 1, 1, 0, &mut rng),
        Node::single("f1_r", "f1", NodeKind::Relu),
        rand_conv("f2", &["f1_r"], 16, 16, 1, 1, 0, &mut rng),
        Node::single("f2_r", "f2", NodeKind::Relu),
        // Downsample to 16x16x24.
        rand_conv("down", &["f2_r"], 16, 24, 3, 2, 1, &mut rng),
        Node::single("down_r", "down", NodeKind::Relu),
        // Type-1 module: both branches end in exclusive 1x1 convolutions.
        rand_conv("m1p", &["down_r"], 24, 24, 1, 1, 0, &mut rng),
        rand_conv("m1q1", &["down_r"], 24, 24, 3, 1, 1, &mut rng),
        Node::single("m1q1r", "m1q1", NodeKind::Relu),
        rand_conv("m1q2", &["m1q1r"], 24, 24, 1, 1, 0, &mut rng),
        Node {
            id: "m1add".into(),
            kind: NodeKind::EltwiseAdd,
            inputs: vec!["m1p".into(), "m1q2".into()],
        },
        Node::single("m1r", "m1add", NodeKind::Relu),
        // Type-2 module: strided branch entries, down to 8x8x32.
        rand_conv("m2p", &["m1r"], 24, 32, 1, 2, 0, &mut rng),
        rand_conv("m2q1", &["m1r"], 24, 32, 1, 2, 0, &mut rng),
        Node::single("m2q1r", "m2q1", NodeKind::Relu),
        rand_conv("m2q2", &["m2q1r"], 32, 32, 1, 1, 0, &mut rng),
        Node {
            id: "m2add".into(),
            kind: NodeKind::EltwiseAdd,
            inputs: vec!["m2p".into(), "m2q2".into()],
        },
        Node::single("m2r", "m2add", NodeKind::Relu),
        // Type-3 module: bare skip wire.
        rand_conv("m3q1", &["m2r"], 32, 32, 1, 1, 0, &mut rng),
        Node::single("m3q1r", "m3q1", NodeKind::Relu),
        rand_conv("m3q2", &["m3q1r"], 32, 32, 1, 1, 0, &mut rng),
        Node {
            id: "m3add".into(),
            kind: NodeKind::EltwiseAdd,
            inputs: vec!["m2r".into(), "m3q2".into()],
        },
        Node::single("m3r", "m3add", NodeKind::Relu),
        // Banded 3x3 stage: filters read their own 8-channel band plus the
        // dense tail [16, 32).
        banded_conv("bc", "m3r", 32, 32, 8, 16, 3, 1, &mut rng),
        Node::single("bc_r", "bc", NodeKind::Relu),
        rand_conv("head", &["bc_r"], 32, 16, 1, 1, 0, &mut rng),
        Node::single("head_r", "head", NodeKind::Relu),
    ];
    let g = Graph::new(nodes, vec!["head_r".into()], shape).unwrap();
    let mut rng_t = self::rng(0x5e5 + 1);
    let t = rand_tensor(shape, &mut rng_t);
    (g, t)
}

/// Wide fan-out network for scheduler studies: one stem feeding four
/// branches of very different tensor sizes, joined pairwise at the end.
/// Visit order decides how many fat branch outputs are live at once.
pub fn inception_like() -> (Graph<f64>, Tensor<f64>) {
    let mut rng = rng(0x1ce);
    let shape = TensorShape::new(16, 16, 8).unwrap();
    let mut nodes = vec![
        rand_conv("stem", &[INPUT_ID], 8, 16, 3, 1, 1, &mut rng),
        Node::single("stem_r", "stem", NodeKind::Relu),
    ];
    // Two fat branches (48-deep outputs) and two slim ones (4-deep). Each
    // join pairs one fat branch with one slim branch, so an order that
    // finishes a pair before opening the next fat branch holds one fat
    // output live — while a depth-first walk of the declarations holds both.
    let mut branch = |nodes: &mut Vec<Node<f64>>, name: &str, mid: usize, depth: usize| {
        nodes.push(rand_conv(&format!("{name}a"), &["stem_r"], 16, mid, 1, 1, 0, &mut rng));
        nodes.push(Node::single(&format!("{name}ar"), &format!("{name}a"), NodeKind::Relu));
        nodes.push(rand_conv(
            &format!("{name}b"),
            &[&format!("{name}ar")],
            mid,
            depth,
            3,
            1,
            1,
            &mut rng,
        ));
        nodes.push(Node::single(&format!("{name}br"), &format!("{name}b"), NodeKind::Relu));
    };
    branch(&mut nodes, "b1", 8, 48);
    branch(&mut nodes, "b2", 4, 4);
    branch(&mut nodes, "b3", 8, 48);
    branch(&mut nodes, "b4", 4, 4);
    for (join, l, dl, r, dr) in [("j1", "b1br", 48, "b2br", 4), ("j2", "b3br", 48, "b4br", 4)] {
        nodes.push(rand_conv(&format!("{join}l"), &[l], dl, 8, 1, 1, 0, &mut rng));
        nodes.push(rand_conv(&format!("{join}r"), &[r], dr, 8, 1, 1, 0, &mut rng));
        nodes.push(Node {
            id: join.to_string(),
            kind: NodeKind::EltwiseAdd,
            inputs: vec![format!("{join}l"), format!("{join}r")],
        });
    }
    nodes.push(Node {
        id: "out".into(),
        kind: NodeKind::EltwiseAdd,
        inputs: vec!["j1".into(), "j2".into()],
    });
    let g = Graph::new(nodes, vec!["out".into()], shape).unwrap();
    let mut rng_t = self::rng(0x1ce + 1);
    let t = rand_tensor(shape, &mut rng_t);
    (g, t)
}

/// Three chained 3x3 convolutions whose tensors are each twice the stream
/// buffer of the paired architecture — the group-slicing showcase.
pub fn conv_chain3() -> (Graph<f64>, Tensor<f64>, ArchConfig) {
    let mut rng = rng(0xc5a);
    let shape = TensorShape::new(32, 32, 8).unwrap();
    let nodes = vec![
        rand_conv("c1", &[INPUT_ID], 8, 8, 3, 1, 1, &mut rng),
        Node::single("r1", "c1", NodeKind::Relu),
        rand_conv("c2", &["r1"], 8, 8, 3, 1, 1, &mut rng),
        Node::single("r2", "c2", NodeKind::Relu),
        rand_conv("c3", &["r2"], 8, 8, 3, 1, 1, &mut rng),
    ];
    let g = Graph::new(nodes, vec!["c3".into()], shape).unwrap();
    let mut arch = small_arch();
    // Tensors are 32x32x8 x 4 B = 32 KiB; give the buffer half that.
    arch.stream_buffer_bytes = 16384;
    let mut rng_t = self::rng(0xc5a + 1);
    let t = rand_tensor(shape, &mut rng_t);
    (g, t, arch)
}
