//! Mappings of non-convolution primitives onto the PE array.
//!
//! The overlay computes everything of consequence on the convolution engine;
//! these passes express fully-connected layers, average pooling and
//! element-wise addition as convolutions with constructed filters.

use indexmap::IndexMap;

use crate::error::Result;
use crate::graph::{ConvAttrs, Graph, Node, NodeKind, PoolAttrs, INPUT_ID};
use crate::passes::{rebuild, report, PassReport};
use crate::scalar::{from_f64, Scalar};
use crate::shape::TensorShape;

/// Shape of a producer id, treating the reserved input id as the graph input.
pub(crate) fn producer_shape<S: Scalar>(
    g: &Graph<S>,
    shapes: &IndexMap<String, TensorShape>,
    id: &str,
) -> TensorShape {
    if id == INPUT_ID {
        g.input_shape
    } else {
        shapes[id]
    }
}

/// `FullyConnected(N -> M)` becomes a convolution with M filters of shape
/// `1x1xN`; filter m is column m of the weight matrix.
pub fn fc_to_conv<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(g.nodes.len());
    for node in g.nodes.values() {
        match &node.kind {
            NodeKind::FullyConnected(a) => {
                let mut weights = vec![S::zero(); a.out_dim * a.in_dim];
                for m in 0..a.out_dim {
                    for n in 0..a.in_dim {
                        weights[m * a.in_dim + n] = a.weight(n, m);
                    }
                }
                notes.push(format!("`{}`: {}x{} matrix -> {} 1x1x{} filters",
                    node.id, a.in_dim, a.out_dim, a.out_dim, a.in_dim));
                nodes.push(Node {
                    id: node.id.clone(),
                    kind: NodeKind::Convolution(ConvAttrs {
                        filter_h: 1,
                        filter_w: 1,
                        out_depth: a.out_dim,
                        in_depth: a.in_dim,
                        stride: 1,
                        pad: 0,
                        weights,
                        bias: a.bias.clone(),
                        shorten: None,
                    }),
                    inputs: node.inputs.clone(),
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

/// Average pooling (windowed or global) becomes a convolution with D
/// filters of the window's shape; filter d is zero everywhere except its
/// depth-d surface, which is uniformly `1/(window_h * window_w)`.
pub fn avgpool_to_conv<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let shapes = g.shapes()?;
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(g.nodes.len());
    for node in g.nodes.values() {
        let pool = match &node.kind {
            NodeKind::AvgPool(a) => Some(*a),
            NodeKind::GlobalAvgPool => {
                let in_shape = producer_shape(g, &shapes, &node.inputs[0]);
                Some(PoolAttrs {
                    window_h: in_shape.h,
                    window_w: in_shape.w,
                    stride: 1,
                    pad: 0,
                })
            }
            _ => None,
        };
        match pool {
            Some(p) => {
                let depth = producer_shape(g, &shapes, &node.inputs[0]).d;
                let inv = from_f64::<S>(1.0 / (p.window_h * p.window_w) as f64);
                let mut weights =
                    vec![S::zero(); depth * p.window_h * p.window_w * depth];
                for d in 0..depth {
                    for r in 0..p.window_h {
                        for s in 0..p.window_w {
                            weights[((d * p.window_h + r) * p.window_w + s) * depth + d] = inv;
                        }
                    }
                }
                notes.push(format!(
                    "`{}`: {}x{} average window -> {depth} {}x{}x{depth} filters",
                    node.id, p.window_h, p.window_w, p.window_h, p.window_w
                ));
                nodes.push(Node {
                    id: node.id.clone(),
                    kind: NodeKind::Convolution(ConvAttrs {
                        filter_h: p.window_h,
                        filter_w: p.window_w,
                        out_depth: depth,
                        in_depth: depth,
                        stride: p.stride,
                        pad: p.pad,
                        weights,
                        bias: vec![S::zero(); depth],
                        shorten: None,
                    }),
                    inputs: node.inputs.clone(),
                });
            }
            None => nodes.push(node.clone()),
        }
    }
    if notes.is_empty() {
        return Ok((g.clone(), report(notes)));
    }
    Ok((rebuild(g, nodes)?, report(notes)))
}

/// `EltwiseAdd` of two `HxWxD` tensors becomes a 1x1 convolution over their
/// depth concatenation: D filters of shape `1x1x2D`, filter d carrying 1's
/// at depths d and D+d.
pub fn eltwise_to_conv<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let shapes = g.shapes()?;
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(g.nodes.len());
    for node in g.nodes.values() {
        match &node.kind {
            NodeKind::EltwiseAdd => {
                let d = shapes[node.id.as_str()].d;
                let mut weights = vec![S::zero(); d * 2 * d];
                for k in 0..d {
                    weights[k * 2 * d + k] = S::one();
                    weights[k * 2 * d + d + k] = S::one();
                }
                notes.push(format!("`{}`: addition of two depth-{d} tensors", node.id));
                nodes.push(Node {
                    id: node.id.clone(),
                    kind: NodeKind::Convolution(ConvAttrs {
                        filter_h: 1,
                        filter_w: 1,
                        out_depth: d,
                        in_depth: 2 * d,
                        stride: 1,
                        pad: 0,
                        weights,
                        bias: vec![S::zero(); d],
                        shorten: None,
                    }),
                    inputs: node.inputs.clone(),
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

/// Legalization helper: rewrite `GlobalAvgPool` into an explicit `AvgPool`
/// window covering the whole input, so the backend sees only windowed pools.
/// (The optimization pass [`avgpool_to_conv`] subsumes this when selected.)
pub fn global_pool_to_window<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let shapes = g.shapes()?;
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(g.nodes.len());
    for node in g.nodes.values() {
        match &node.kind {
            NodeKind::GlobalAvgPool => {
                let in_shape = producer_shape(g, &shapes, &node.inputs[0]);
                notes.push(format!("`{}`: global -> {}x{} window", node.id, in_shape.h, in_shape.w));
                nodes.push(Node {
                    id: node.id.clone(),
                    kind: NodeKind::AvgPool(PoolAttrs {
                        window_h: in_shape.h,
                        window_w: in_shape.w,
                        stride: 1,
                        pad: 0,
                    }),
                    inputs: node.inputs.clone(),
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
    use crate::graph::{FcAttrs, INPUT_ID};
    use crate::interp::eval_outputs;
    use crate::shape::TensorShape;
    use crate::tensor::{max_rel_err, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: TensorShape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.elems()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn fc_filter_m_is_column_m() {
        // N=4, M=3, W[n][m] = 10n + m.
        let weights: Vec<f64> = (0..4).flat_map(|n| (0..3).map(move |m| (10 * n + m) as f64)).collect();
        let g = Graph::new(
            vec![Node {
                id: "fc".into(),
                kind: NodeKind::FullyConnected(FcAttrs {
                    in_dim: 4,
                    out_dim: 3,
                    weights,
                    bias: vec![0.0; 3],
                }),
                inputs: vec![INPUT_ID.into()],
            }],
            vec!["fc".into()],
            TensorShape::new(1, 1, 4).unwrap(),
        )
        .unwrap();
        let (g2, _) = fc_to_conv(&g).unwrap();
        let NodeKind::Convolution(a) = &g2.node("fc").kind else { panic!() };
        assert_eq!((a.filter_h, a.filter_w, a.out_depth, a.in_depth), (1, 1, 3, 4));
        // Filter m=1 must be column 1 of W: [1, 11, 21, 31].
        let col: Vec<f64> = (0..4).map(|n| a.weight(1, 0, 0, n)).collect();
        assert_eq!(col, vec![1.0, 11.0, 21.0, 31.0]);
    }

    #[test]
    fn identity_fc_conv_reproduces_vector() {
        let n = 5;
        let mut weights = vec![0.0; n * n];
        for i in 0..n {
            weights[i * n + i] = 1.0;
        }
        let g = Graph::new(
            vec![Node {
                id: "fc".into(),
                kind: NodeKind::FullyConnected(FcAttrs {
                    in_dim: n,
                    out_dim: n,
                    weights,
                    bias: vec![0.0; n],
                }),
                inputs: vec![INPUT_ID.into()],
            }],
            vec!["fc".into()],
            TensorShape::new(1, 1, n).unwrap(),
        )
        .unwrap();
        let (g2, _) = fc_to_conv(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(g.input_shape, &mut rng);
        assert_eq!(eval_outputs(&g2, &x).unwrap()[0].data, x.data);
    }

    #[test]
    fn global_avgpool_conv_has_uniform_surfaces() {
        let g = Graph::new(
            vec![Node::single("gap", INPUT_ID, NodeKind::<f64>::GlobalAvgPool)],
            vec!["gap".into()],
            TensorShape::new(7, 7, 2).unwrap(),
        )
        .unwrap();
        let (g2, _) = avgpool_to_conv(&g).unwrap();
        let NodeKind::Convolution(a) = &g2.node("gap").kind else { panic!() };
        assert_eq!((a.filter_h, a.filter_w, a.out_depth, a.in_depth), (7, 7, 2, 2));
        for k in 0..2 {
            for r in 0..7 {
                for s in 0..7 {
                    for c in 0..2 {
                        let expect = if c == k { 1.0 / 49.0 } else { 0.0 };
                        assert_eq!(a.weight(k, r, s, c), expect);
                    }
                }
            }
        }
    }

    #[test]
    fn avgpool_conv_matches_oracle() {
        let shape = TensorShape::new(4, 4, 3).unwrap();
        let g = Graph::new(
            vec![Node::single(
                "p",
                INPUT_ID,
                NodeKind::<f64>::AvgPool(PoolAttrs { window_h: 2, window_w: 2, stride: 2, pad: 0 }),
            )],
            vec!["p".into()],
            shape,
        )
        .unwrap();
        let (g2, _) = avgpool_to_conv(&g).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10 {
            let x = rand_tensor(shape, &mut rng);
            let a = eval_outputs(&g, &x).unwrap();
            let b = eval_outputs(&g2, &x).unwrap();
            assert!(max_rel_err(&a[0], &b[0]) < 1e-9);
        }
    }

    #[test]
    fn eltwise_filters_have_paired_ones() {
        // D=2: filter 0 = [1,0,1,0], filter 1 = [0,1,0,1].
        let shape = TensorShape::new(2, 2, 2).unwrap();
        let g = Graph::new(
            vec![Node {
                id: "e".into(),
                kind: NodeKind::<f64>::EltwiseAdd,
                inputs: vec![INPUT_ID.into(), INPUT_ID.into()],
            }],
            vec!["e".into()],
            shape,
        )
        .unwrap();
        let (g2, _) = eltwise_to_conv(&g).unwrap();
        let NodeKind::Convolution(a) = &g2.node("e").kind else { panic!() };
        let f = |k: usize| -> Vec<f64> { (0..4).map(|c| a.weight(k, 0, 0, c)).collect() };
        assert_eq!(f(0), vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(f(1), vec![0.0, 1.0, 0.0, 1.0]);
        // x + 0 behaves as identity on the x half.
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = rand_tensor(shape, &mut rng);
        let out = eval_outputs(&g2, &x).unwrap();
        for (o, i) in out[0].data.iter().zip(&x.data) {
            assert!((o - 2.0 * i).abs() < 1e-12);
        }
    }

    #[test]
    fn mapping_passes_are_idempotent() {
        let shape = TensorShape::new(4, 4, 2).unwrap();
        let g = Graph::new(
            vec![
                Node::single(
                    "p",
                    INPUT_ID,
                    NodeKind::<f64>::AvgPool(PoolAttrs {
                        window_h: 2,
                        window_w: 2,
                        stride: 2,
                        pad: 0,
                    }),
                ),
                Node {
                    id: "e".into(),
                    kind: NodeKind::EltwiseAdd,
                    inputs: vec!["p".into(), "p".into()],
                },
            ],
            vec!["e".into()],
            shape,
        )
        .unwrap();
        let (g1, _) = avgpool_to_conv(&g).unwrap();
        let (g2, _) = avgpool_to_conv(&g1).unwrap();
        assert_eq!(g1, g2);
        let (g3, _) = eltwise_to_conv(&g2).unwrap();
        let (g4, _) = eltwise_to_conv(&g3).unwrap();
        assert_eq!(g3, g4);
    }
}
