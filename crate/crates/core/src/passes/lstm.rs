//! LSTM cell lowering.
//!
//! [`fuse_lstm`] maps a cell onto the overlay's preferred form: the eight
//! gate matrices collapse into one `(4*hidden) x (N_x + N_h)` matrix — gate
//! blocks concatenated along the width for the `[x; h]` input, rows
//! interleaved i, g, f, o so each hidden index streams its four gate values
//! back to back — expressed as a single 1x1 convolution feeding a streaming
//! tail node that applies the nonlinearities and the cell-state update.
//!
//! [`decompose_lstm`] is the unfused fallback the legalizer uses when the
//! fusion pass was not selected: eight separate matrix multiplies, four
//! element-wise additions, and a blocked tail. Functionally identical,
//! executes as 13 subgraphs instead of 1.

use crate::error::Result;
use crate::graph::{
    ConvAttrs, FcAttrs, Graph, LstmAttrs, LstmTailAttrs, Node, NodeKind, LSTM_GATES,
};
use crate::passes::{rebuild, report, unique_id, PassReport};
use crate::scalar::Scalar;

/// Interleaved fused weight matrix: row `4*j + gate` is
/// `[W_gate[j] ; U_gate[j]]`, flattened row-major.
pub fn fused_lstm_matrix<S: Scalar>(a: &LstmAttrs<S>) -> (usize, usize, Vec<S>) {
    let rows = 4 * a.hidden;
    let cols = a.n_x + a.n_h;
    let mut weights = Vec::with_capacity(rows * cols);
    for j in 0..a.hidden {
        for gate in 0..4 {
            weights.extend_from_slice(&a.w[gate][j * a.n_x..(j + 1) * a.n_x]);
            weights.extend_from_slice(&a.u[gate][j * a.n_h..(j + 1) * a.n_h]);
        }
    }
    (rows, cols, weights)
}

pub fn fuse_lstm<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(g.nodes.len());
    for node in g.nodes.values() {
        match &node.kind {
            NodeKind::LstmCell(a) => {
                let (rows, cols, weights) = fused_lstm_matrix(a);
                let bias: Vec<S> = (0..a.hidden)
                    .flat_map(|j| (0..4).map(move |gate| (gate, j)))
                    .map(|(gate, j)| a.b[gate][j])
                    .collect();
                let gates_id = unique_id(&nodes, format!("{}.gates", node.id));
                notes.push(format!(
                    "`{}`: 8 matrices fused into one {rows}x{cols}, rows interleaved {}",
                    node.id,
                    LSTM_GATES.iter().collect::<String>()
                ));
                nodes.push(Node {
                    id: gates_id.clone(),
                    kind: NodeKind::Convolution(ConvAttrs {
                        filter_h: 1,
                        filter_w: 1,
                        out_depth: rows,
                        in_depth: cols,
                        stride: 1,
                        pad: 0,
                        weights,
                        bias,
                        shorten: None,
                    }),
                    inputs: node.inputs.clone(),
                });
                nodes.push(Node {
                    id: node.id.clone(),
                    kind: NodeKind::LstmTail(LstmTailAttrs {
                        hidden: a.hidden,
                        interleaved: true,
                        c_init: a.c_init.clone(),
                    }),
                    inputs: vec![gates_id],
                });
            }
            _ => nodes.push(node.clone()),
        }
    }
    if notes.is_empty() {
        return Ok((g.clone(), report(notes)));
    }
    Ok((rebuild(g, nodes)?, report(notes)))
}

pub fn decompose_lstm<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(g.nodes.len());
    for node in g.nodes.values() {
        match &node.kind {
            NodeKind::LstmCell(a) => {
                let x_src = node.inputs[0].clone();
                let h_src = node.inputs[1].clone();
                let mut gate_sums = Vec::with_capacity(4);
                for (gi, gate) in LSTM_GATES.iter().enumerate() {
                    // out[j] = sum_n M[j][n] v[n]: transpose into the
                    // [input][output]-indexed weight layout.
                    let transpose = |m: &[S], n_in: usize| -> Vec<S> {
                        let mut t = vec![S::zero(); n_in * a.hidden];
                        for j in 0..a.hidden {
                            for n in 0..n_in {
                                t[n * a.hidden + j] = m[j * n_in + n];
                            }
                        }
                        t
                    };
                    let wf = unique_id(&nodes, format!("{}.mul_w{gate}", node.id));
                    nodes.push(Node {
                        id: wf.clone(),
                        kind: NodeKind::FullyConnected(FcAttrs {
                            in_dim: a.n_x,
                            out_dim: a.hidden,
                            weights: transpose(&a.w[gi], a.n_x),
                            bias: a.b[gi].clone(),
                        }),
                        inputs: vec![x_src.clone()],
                    });
                    let uf = unique_id(&nodes, format!("{}.mul_u{gate}", node.id));
                    nodes.push(Node {
                        id: uf.clone(),
                        kind: NodeKind::FullyConnected(FcAttrs {
                            in_dim: a.n_h,
                            out_dim: a.hidden,
                            weights: transpose(&a.u[gi], a.n_h),
                            bias: vec![S::zero(); a.hidden],
                        }),
                        inputs: vec![h_src.clone()],
                    });
                    let zf = unique_id(&nodes, format!("{}.z_{gate}", node.id));
                    nodes.push(Node {
                        id: zf.clone(),
                        kind: NodeKind::EltwiseAdd,
                        inputs: vec![wf, uf],
                    });
                    gate_sums.push(zf);
                }
                notes.push(format!(
                    "`{}`: cell decomposed into 8 multiplies + 4 adds + tail",
                    node.id
                ));
                nodes.push(Node {
                    id: node.id.clone(),
                    kind: NodeKind::LstmTail(LstmTailAttrs {
                        hidden: a.hidden,
                        interleaved: false,
                        c_init: a.c_init.clone(),
                    }),
                    inputs: gate_sums,
                });
            }
            _ => nodes.push(node.clone()),
        }
    }
    if notes.is_empty() {
        return Ok((g.clone(), report(notes)));
    }
    Ok((rebuild(g, nodes)?, report(notes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::INPUT_ID;
    use crate::interp::eval;
    use crate::shape::TensorShape;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_cell(hidden: usize, n_x: usize, n_h: usize, rng: &mut ChaCha8Rng) -> LstmAttrs<f64> {
        let mut mk = |len: usize| -> Vec<f64> {
            (0..len).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        LstmAttrs {
            hidden,
            n_x,
            n_h,
            w: [mk(hidden * n_x), mk(hidden * n_x), mk(hidden * n_x), mk(hidden * n_x)],
            u: [mk(hidden * n_h), mk(hidden * n_h), mk(hidden * n_h), mk(hidden * n_h)],
            b: [mk(hidden), mk(hidden), mk(hidden), mk(hidden)],
            c_init: mk(hidden),
        }
    }

    /// x and h both come from the graph input split by two 1x1 convs.
    fn cell_graph(attrs: LstmAttrs<f64>) -> Graph<f64> {
        let (n_x, n_h) = (attrs.n_x, attrs.n_h);
        let input_shape = TensorShape::new(1, 1, n_x + n_h).unwrap();
        let mut wx = vec![0.0; n_x * (n_x + n_h)];
        for i in 0..n_x {
            wx[i * (n_x + n_h) + i] = 1.0;
        }
        let mut wh = vec![0.0; n_h * (n_x + n_h)];
        for i in 0..n_h {
            wh[i * (n_x + n_h) + n_x + i] = 1.0;
        }
        let sel = |id: &str, w: Vec<f64>, out: usize| {
            Node::conv(
                id,
                &[INPUT_ID],
                ConvAttrs {
                    filter_h: 1,
                    filter_w: 1,
                    out_depth: out,
                    in_depth: n_x + n_h,
                    stride: 1,
                    pad: 0,
                    weights: w,
                    bias: vec![0.0; out],
                    shorten: None,
                },
            )
        };
        Graph::new(
            vec![
                sel("x", wx, n_x),
                sel("h", wh, n_h),
                Node {
                    id: "cell".into(),
                    kind: NodeKind::LstmCell(attrs),
                    inputs: vec!["x".into(), "h".into()],
                },
            ],
            vec!["cell".into()],
            input_shape,
        )
        .unwrap()
    }

    #[test]
    fn fused_matrix_dimensions_and_row_order() {
        // hidden=2, N_x=N_h=2 -> 8x4, rows [i0,g0,f0,o0,i1,g1,f1,o1].
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let mut a = rand_cell(2, 2, 2, &mut rng);
        for gate in 0..4 {
            for j in 0..2 {
                for n in 0..2 {
                    // Tag each entry so provenance is readable in a row.
                    a.w[gate][j * 2 + n] = (100 * gate + 10 * j + n) as f64;
                    a.u[gate][j * 2 + n] = (100 * gate + 10 * j + n) as f64 + 0.5;
                }
            }
        }
        let (rows, cols, m) = fused_lstm_matrix(&a);
        assert_eq!((rows, cols), (8, 4));
        // Row 0 = gate i (0), j=0: W then U.
        assert_eq!(&m[0..4], &[0.0, 1.0, 0.5, 1.5]);
        // Row 1 = gate g (1), j=0.
        assert_eq!(&m[4..8], &[100.0, 101.0, 100.5, 101.5]);
        // Row 4 = gate i, j=1.
        assert_eq!(&m[16..20], &[10.0, 11.0, 10.5, 11.5]);
    }

    #[test]
    fn fused_cell_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let g = cell_graph(rand_cell(8, 5, 8, &mut rng));
        let (fused, _) = fuse_lstm(&g).unwrap();
        assert!(fused.nodes.values().all(|n| !matches!(n.kind, NodeKind::LstmCell(_))));
        for _ in 0..10 {
            let x = Tensor::new(
                g.input_shape,
                (0..g.input_shape.elems()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let before = eval(&g, &x).unwrap();
            let after = eval(&fused, &x).unwrap();
            for j in 0..8 {
                let b = before.values["cell"].data[j];
                let a = after.values["cell"].data[j];
                assert!((b - a).abs() < 1e-9, "h'[{j}]: {b} vs {a}");
                let bc = before.cell_states["cell"][j];
                let ac = after.cell_states["cell"][j];
                assert!((bc - ac).abs() < 1e-9, "c[{j}]: {bc} vs {ac}");
            }
        }
    }

    #[test]
    fn decomposed_cell_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let g = cell_graph(rand_cell(6, 4, 6, &mut rng));
        let (dec, _) = decompose_lstm(&g).unwrap();
        // 1 cell -> 8 multiplies + 4 adds + 1 tail.
        assert_eq!(dec.nodes.len(), g.nodes.len() - 1 + 13);
        for _ in 0..10 {
            let x = Tensor::new(
                g.input_shape,
                (0..g.input_shape.elems()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let before = eval(&g, &x).unwrap();
            let after = eval(&dec, &x).unwrap();
            for j in 0..6 {
                assert!((before.values["cell"].data[j] - after.values["cell"].data[j]).abs() < 1e-9);
                assert!(
                    (before.cell_states["cell"][j] - after.cell_states["cell"][j]).abs() < 1e-9
                );
            }
        }
    }

    #[test]
    fn fusion_is_idempotent() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let g = cell_graph(rand_cell(4, 3, 4, &mut rng));
        let (f1, _) = fuse_lstm(&g).unwrap();
        let (f2, rep) = fuse_lstm(&f1).unwrap();
        assert_eq!(f1, f2);
        assert!(rep.notes.is_empty());
    }
}
