//! Residual-module rewrites.
//!
//! A residual module is an element-wise addition joining two branches that
//! originate at a shared producer. Three structural cases are handled:
//!
//! - **Merging** (the payoff): an addition whose inputs are both 1x1
//!   convolutions collapses into one convolution over the depth-concatenated
//!   branch inputs — filter k of the merged convolution is the concatenation
//!   of the two original filters k, biases add, and the addition disappears.
//! - **Type 2 -> Type 1**: when both branch-entry convolutions are 1x1 with
//!   stride 2, the subsampling is hoisted above the branches (a 1x1 stride-2
//!   convolution only ever reads the kept pixels), leaving stride-1 entries.
//!   A peephole then absorbs the hoisted subsample into a preceding
//!   convolution's stride where one exists with no other consumers.
//! - **Type 3 -> Type 1**: when one addition input is the raw module input
//!   (a skip connection), that branch gains an identity convolution so
//!   merging applies.

use crate::error::{Error, Result};
use crate::graph::{identity_conv_attrs, ConvAttrs, Graph, Node, NodeKind};
use crate::passes::{rebuild, report, unique_id, PassReport};
use crate::scalar::Scalar;

/// True if the node is a 1x1, stride-1, unpadded convolution — the only
/// form that merges soundly.
fn is_mergeable_conv<S: Scalar>(node: &Node<S>) -> Option<&ConvAttrs<S>> {
    match &node.kind {
        NodeKind::Convolution(a)
            if a.filter_h == 1 && a.filter_w == 1 && a.stride == 1 && a.pad == 0 =>
        {
            Some(a)
        }
        _ => None,
    }
}

/// Check one `EltwiseAdd` node for mergeability and build the merged
/// convolution. Errors with `PatternMismatch` describing the first blocking
/// condition; the pipeline pass treats that as "skip", while tests can
/// assert on it directly.
pub fn try_merge_eltwise<S: Scalar>(g: &Graph<S>, eltwise_id: &str) -> Result<Node<S>> {
    let e = g.node(eltwise_id);
    if !matches!(e.kind, NodeKind::EltwiseAdd) {
        return Err(Error::PatternMismatch(format!("`{eltwise_id}` is not an element-wise add")));
    }
    let (a_id, b_id) = (&e.inputs[0], &e.inputs[1]);
    if a_id == b_id {
        return Err(Error::PatternMismatch(format!(
            "`{eltwise_id}` adds `{a_id}` to itself; nothing to merge"
        )));
    }
    let consumers = g.consumers();
    for id in [a_id, b_id] {
        if id == crate::graph::INPUT_ID {
            return Err(Error::PatternMismatch(format!(
                "`{eltwise_id}` reads the graph input directly (type-3 shape)"
            )));
        }
        let n = g.node(id);
        if is_mergeable_conv(n).is_none() {
            return Err(Error::PatternMismatch(format!(
                "`{eltwise_id}` input `{id}` is {} (need a 1x1 stride-1 convolution)",
                n.kind.name()
            )));
        }
        if consumers[id.as_str()].len() != 1 || g.outputs.contains(id) {
            return Err(Error::PatternMismatch(format!(
                "`{id}` has other consumers; merging would orphan them"
            )));
        }
    }
    let a = is_mergeable_conv(g.node(a_id)).unwrap();
    let b = is_mergeable_conv(g.node(b_id)).unwrap();
    if a.out_depth != b.out_depth {
        return Err(Error::PatternMismatch(format!(
            "`{eltwise_id}` branch depths differ: {} vs {}",
            a.out_depth, b.out_depth
        )));
    }
    let k_out = a.out_depth;
    let in_depth = a.in_depth + b.in_depth;
    let mut weights = Vec::with_capacity(k_out * in_depth);
    for k in 0..k_out {
        weights.extend_from_slice(&a.weights[k * a.in_depth..(k + 1) * a.in_depth]);
        weights.extend_from_slice(&b.weights[k * b.in_depth..(k + 1) * b.in_depth]);
    }
    let bias = (0..k_out).map(|k| a.bias[k] + b.bias[k]).collect();
    let mut inputs = g.node(a_id).inputs.clone();
    inputs.extend(g.node(b_id).inputs.iter().cloned());
    Ok(Node {
        id: eltwise_id.to_string(),
        kind: NodeKind::Convolution(ConvAttrs {
            filter_h: 1,
            filter_w: 1,
            out_depth: k_out,
            in_depth,
            stride: 1,
            pad: 0,
            weights,
            bias,
            shorten: None,
        }),
        inputs,
    })
}

/// Merge every element-wise addition whose branches end in exclusive 1x1
/// convolutions. Non-matching additions are left alone (a later mapping
/// pass still lowers them).
pub fn merge_resmodule<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let mut notes = Vec::new();
    let mut cur = g.clone();
    // Re-scan after each merge: a merged conv can enable the next one
    // (nested residual structures).
    loop {
        let candidate = cur
            .nodes
            .values()
            .filter(|n| matches!(n.kind, NodeKind::EltwiseAdd))
            .find_map(|n| try_merge_eltwise(&cur, &n.id).ok().map(|m| (n.id.clone(), m)));
        let Some((eid, merged)) = candidate else { break };
        let (a_id, b_id) = {
            let e = cur.node(&eid);
            (e.inputs[0].clone(), e.inputs[1].clone())
        };
        notes.push(format!("merged `{a_id}` + `{b_id}` into `{eid}`"));
        let nodes: Vec<Node<S>> = cur
            .nodes
            .values()
            .filter(|n| n.id != a_id && n.id != b_id)
            .map(|n| if n.id == eid { merged.clone() } else { n.clone() })
            .collect();
        cur = rebuild(&cur, nodes)?;
    }
    Ok((cur, report(notes)))
}

/// Walk up from `start` through single-input nodes, reporting whether any
/// node on the walk reads `target` among its inputs.
fn chain_reads<S: Scalar>(g: &Graph<S>, start: &str, target: &str) -> bool {
    let mut cur = start.to_string();
    loop {
        if cur == crate::graph::INPUT_ID {
            return false;
        }
        let node = g.node(&cur);
        if node.inputs.iter().any(|i| i == target) {
            return true;
        }
        if node.inputs.len() != 1 {
            return false;
        }
        cur = node.inputs[0].clone();
    }
}

/// Type 3 -> Type 1: give the skip branch an identity convolution.
pub fn convert_type3<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let shapes = g.shapes()?;
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = g.nodes.values().cloned().collect();
    let eltwise_ids: Vec<String> = g
        .nodes
        .values()
        .filter(|n| matches!(n.kind, NodeKind::EltwiseAdd))
        .map(|n| n.id.clone())
        .collect();
    for eid in eltwise_ids {
        let (x, y) = {
            let e = g.node(&eid);
            (e.inputs[0].clone(), e.inputs[1].clone())
        };
        if x == y {
            continue;
        }
        // The skip input is the one the other branch's chain reads upstream.
        let skip = if chain_reads(g, &x, &y) {
            Some(y.clone())
        } else if chain_reads(g, &y, &x) {
            Some(x.clone())
        } else {
            None
        };
        let Some(skip_id) = skip else { continue };
        // Identity-convolution nodes produced by an earlier run make the
        // module Type 1 already; don't stack another one.
        let depth = super::mapping::producer_shape(g, &shapes, &skip_id).d;
        let new_id = unique_id(&nodes, format!("{eid}.skip_identity"));
        notes.push(format!("`{eid}`: skip branch `{skip_id}` gains identity convolution `{new_id}`"));
        let insert_at = nodes.iter().position(|n| n.id == eid).unwrap();
        nodes.insert(
            insert_at,
            Node::conv(&new_id, &[skip_id.as_str()], identity_conv_attrs::<S>(depth)),
        );
        let e = nodes.iter_mut().find(|n| n.id == eid).unwrap();
        let slot = e.inputs.iter().position(|i| *i == skip_id).unwrap();
        e.inputs[slot] = new_id;
    }
    if notes.is_empty() {
        return Ok((g.clone(), report(notes)));
    }
    Ok((rebuild(g, nodes)?, report(notes)))
}

/// Node ids along the single-input walk up from `start`, ending with the
/// terminal producer (the graph input or the first multi-input node).
fn walk_chain<S: Scalar>(g: &Graph<S>, start: &str) -> Vec<String> {
    let mut path = Vec::new();
    let mut cur = start.to_string();
    loop {
        if cur == crate::graph::INPUT_ID {
            path.push(cur);
            return path;
        }
        let node = g.node(&cur);
        path.push(cur.clone());
        if node.inputs.len() != 1 {
            return path;
        }
        cur = node.inputs[0].clone();
    }
}

/// Where two branches of an addition diverge: the per-branch entry nodes
/// (each reading the shared producer directly), or `None` when the walks
/// share no tail or one input sits on the other's chain.
fn branch_entries<S: Scalar>(g: &Graph<S>, x: &str, y: &str) -> Option<(String, String)> {
    let pa = walk_chain(g, x);
    let pb = walk_chain(g, y);
    let mut l = 0;
    while l < pa.len() && l < pb.len() && pa[pa.len() - 1 - l] == pb[pb.len() - 1 - l] {
        l += 1;
    }
    if l == 0 || pa.len() == l || pb.len() == l {
        return None;
    }
    Some((pa[pa.len() - 1 - l].clone(), pb[pb.len() - 1 - l].clone()))
}

/// Type 2 -> Type 1: hoist the common stride out of both branch entries,
/// then absorb hoisted subsamples into upstream convolutions where sound.
/// Rewrites one module at a time against the current graph so modules that
/// share entry convolutions are seen with up-to-date strides.
pub fn convert_type2<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let mut notes = Vec::new();
    let mut cur = g.clone();
    loop {
        let mut found = None;
        for e in cur.nodes.values().filter(|n| matches!(n.kind, NodeKind::EltwiseAdd)) {
            let Some((a_id, b_id)) = branch_entries(&cur, &e.inputs[0], &e.inputs[1]) else {
                continue;
            };
            let (NodeKind::Convolution(a), NodeKind::Convolution(b)) =
                (&cur.node(&a_id).kind, &cur.node(&b_id).kind)
            else {
                continue;
            };
            let a_src = cur.node(&a_id).inputs[0].clone();
            if a.stride != b.stride || a.stride < 2 {
                continue;
            }
            if a.filter_h != 1 || a.filter_w != 1 || b.filter_h != 1 || b.filter_w != 1 {
                // Hoisting past a wider window would change what it reads.
                continue;
            }
            found = Some((e.id.clone(), a_id, b_id, a_src, a.stride));
            break;
        }
        let Some((eid, a_id, b_id, src, stride)) = found else { break };
        let mut nodes: Vec<Node<S>> = cur.nodes.values().cloned().collect();
        let sub_id = unique_id(&nodes, format!("{eid}.hoisted_subsample"));
        notes.push(format!(
            "`{eid}`: hoisted stride {stride} from `{a_id}`/`{b_id}` into `{sub_id}`"
        ));
        let insert_at = nodes.iter().position(|n| n.id == a_id || n.id == b_id).unwrap();
        nodes.insert(insert_at, Node::single(&sub_id, &src, NodeKind::Subsample { stride }));
        for id in [&a_id, &b_id] {
            let n = nodes.iter_mut().find(|n| n.id == *id).unwrap();
            n.inputs = vec![sub_id.clone()];
            let NodeKind::Convolution(ref mut attrs) = n.kind else { unreachable!() };
            attrs.stride = 1;
        }
        cur = rebuild(&cur, nodes)?;
    }
    if notes.is_empty() {
        return Ok((cur, report(notes)));
    }
    let (absorbed, mut extra) = absorb_subsample(&cur)?;
    notes.append(&mut extra.notes);
    Ok((absorbed, report(notes)))
}

/// Peephole: a subsample whose sole producer is a convolution with no other
/// consumers folds into that convolution's stride (`floor(floor(x/s)/k) =
/// floor(x/(s*k))` keeps the output grid identical).
pub fn absorb_subsample<S: Scalar>(g: &Graph<S>) -> Result<(Graph<S>, PassReport)> {
    let mut notes = Vec::new();
    let mut cur = g.clone();
    loop {
        let consumers = cur.consumers();
        let target = cur.nodes.values().find_map(|n| match n.kind {
            NodeKind::Subsample { stride } => {
                let p_id = &n.inputs[0];
                if p_id == crate::graph::INPUT_ID || cur.outputs.contains(&n.id) {
                    return None;
                }
                let p = cur.node(p_id);
                let sole = consumers[p_id.as_str()].len() == 1 && !cur.outputs.contains(p_id);
                match (&p.kind, sole) {
                    (NodeKind::Convolution(_), true) => {
                        Some((n.id.clone(), p_id.clone(), stride))
                    }
                    _ => None,
                }
            }
            _ => None,
        });
        let Some((sub_id, conv_id, k)) = target else { break };
        notes.push(format!("absorbed `{sub_id}` (stride {k}) into `{conv_id}`"));
        let nodes: Vec<Node<S>> = cur
            .nodes
            .values()
            .filter(|n| n.id != sub_id)
            .map(|n| {
                let mut n = n.clone();
                if n.id == conv_id {
                    let NodeKind::Convolution(ref mut a) = n.kind else { unreachable!() };
                    a.stride *= k;
                }
                for i in n.inputs.iter_mut() {
                    if *i == sub_id {
                        *i = conv_id.clone();
                    }
                }
                n
            })
            .collect();
        cur = rebuild(&cur, nodes)?;
    }
    Ok((cur, report(notes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::INPUT_ID;
    use crate::interp::eval_outputs;
    use crate::shape::TensorShape;
    use crate::tensor::{max_rel_err, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_conv(
        id: &str,
        input: &str,
        in_depth: usize,
        out_depth: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Node<f64> {
        Node::conv(
            id,
            &[input],
            ConvAttrs {
                filter_h: 1,
                filter_w: 1,
                out_depth,
                in_depth,
                stride,
                pad: 0,
                weights: (0..out_depth * in_depth).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                bias: (0..out_depth).map(|_| rng.gen_range(-0.5..0.5)).collect(),
                shorten: None,
            },
        )
    }

    fn rand_tensor(shape: TensorShape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let data = (0..shape.elems()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape, data).unwrap()
    }

    /// input -> a (1x1), input -> b1 -> b3, add(a, b3): canonical two-branch
    /// module with mergeable tails.
    fn type1_fixture(rng: &mut ChaCha8Rng) -> Graph<f64> {
        let shape = TensorShape::new(4, 4, 3).unwrap();
        Graph::new(
            vec![
                rand_conv("a", INPUT_ID, 3, 2, 1, rng),
                rand_conv("b1", INPUT_ID, 3, 5, 1, rng),
                rand_conv("b3", "b1", 5, 2, 1, rng),
                Node {
                    id: "add".into(),
                    kind: NodeKind::EltwiseAdd,
                    inputs: vec!["a".into(), "b3".into()],
                },
            ],
            vec!["add".into()],
            shape,
        )
        .unwrap()
    }

    #[test]
    fn merge_concatenates_filters_and_drops_two_nodes() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = type1_fixture(&mut rng);
        let (m, rep) = merge_resmodule(&g).unwrap();
        assert_eq!(g.nodes.len() - m.nodes.len(), 2, "{:?}", rep.notes);
        let NodeKind::Convolution(a) = &m.node("add").kind else { panic!() };
        assert_eq!((a.in_depth, a.out_depth), (3 + 5, 2));
        assert_eq!(m.node("add").inputs, vec![INPUT_ID.to_string(), "b1".to_string()]);
        // Oracle equivalence on random inputs.
        for _ in 0..10 {
            let x = rand_tensor(g.input_shape, &mut rng);
            let before = eval_outputs(&g, &x).unwrap();
            let after = eval_outputs(&m, &x).unwrap();
            assert!(max_rel_err(&before[0], &after[0]) < 1e-9);
        }
    }

    #[test]
    fn merge_skips_branch_with_relu() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let shape = TensorShape::new(4, 4, 3).unwrap();
        let g = Graph::new(
            vec![
                rand_conv("a", INPUT_ID, 3, 2, 1, &mut rng),
                rand_conv("b", INPUT_ID, 3, 2, 1, &mut rng),
                Node::single("r", "b", NodeKind::Relu),
                Node {
                    id: "add".into(),
                    kind: NodeKind::EltwiseAdd,
                    inputs: vec!["a".into(), "r".into()],
                },
            ],
            vec!["add".into()],
            shape,
        )
        .unwrap();
        let err = try_merge_eltwise(&g, "add").unwrap_err();
        assert!(matches!(err, Error::PatternMismatch(_)), "{err}");
        let (m, _) = merge_resmodule(&g).unwrap();
        assert_eq!(m, g);
    }

    #[test]
    fn type3_inserts_identity_then_merges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let shape = TensorShape::new(4, 4, 3).unwrap();
        // Skip connection: add(input-processed branch, raw branch source).
        let g = Graph::new(
            vec![
                rand_conv("stem", INPUT_ID, 3, 4, 1, &mut rng),
                rand_conv("b1", "stem", 4, 6, 1, &mut rng),
                rand_conv("b3", "b1", 6, 4, 1, &mut rng),
                Node {
                    id: "add".into(),
                    kind: NodeKind::EltwiseAdd,
                    inputs: vec!["b3".into(), "stem".into()],
                },
            ],
            vec!["add".into()],
            shape,
        )
        .unwrap();
        let (t3, rep) = convert_type3(&g).unwrap();
        assert_eq!(t3.nodes.len(), g.nodes.len() + 1, "{:?}", rep.notes);
        let id_conv = t3.node("add.skip_identity");
        let NodeKind::Convolution(a) = &id_conv.kind else { panic!() };
        // One-hot identity rows.
        for k in 0..4 {
            for c in 0..4 {
                assert_eq!(a.weight(k, 0, 0, c), if k == c { 1.0 } else { 0.0 });
            }
        }
        let (merged, _) = merge_resmodule(&t3).unwrap();
        assert!(merged.nodes.len() < t3.nodes.len());
        for _ in 0..10 {
            let x = rand_tensor(shape, &mut rng);
            let before = eval_outputs(&g, &x).unwrap();
            let after = eval_outputs(&merged, &x).unwrap();
            assert!(max_rel_err(&before[0], &after[0]) < 1e-9);
        }
        // Idempotence: the rewritten module no longer matches the pattern.
        let (t3_again, _) = convert_type3(&t3).unwrap();
        assert_eq!(t3, t3_again);
    }

    #[test]
    fn type2_hoists_stride_and_halves_spatial_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let shape = TensorShape::new(8, 8, 3).unwrap();
        let g = Graph::new(
            vec![
                rand_conv("a", INPUT_ID, 3, 2, 2, &mut rng),
                rand_conv("b1", INPUT_ID, 3, 5, 2, &mut rng),
                rand_conv("b3", "b1", 5, 2, 1, &mut rng),
                Node {
                    id: "add".into(),
                    kind: NodeKind::EltwiseAdd,
                    inputs: vec!["a".into(), "b3".into()],
                },
            ],
            vec!["add".into()],
            shape,
        )
        .unwrap();
        let (t2, _) = convert_type2(&g).unwrap();
        let shapes = t2.shapes().unwrap();
        assert_eq!(shapes["add.hoisted_subsample"], TensorShape { h: 4, w: 4, d: 3 });
        for id in ["a", "b1"] {
            let NodeKind::Convolution(a) = &t2.node(id).kind else { panic!() };
            assert_eq!(a.stride, 1);
        }
        for _ in 0..10 {
            let x = rand_tensor(shape, &mut rng);
            let before = eval_outputs(&g, &x).unwrap();
            let after = eval_outputs(&t2, &x).unwrap();
            assert!(max_rel_err(&before[0], &after[0]) < 1e-9);
        }
    }

    #[test]
    fn absorbing_subsample_into_conv_quarters_macs() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let shape = TensorShape::new(8, 8, 3).unwrap();
        // stem conv at full resolution, then a type-2 module downstream.
        let g = Graph::new(
            vec![
                rand_conv("stem", INPUT_ID, 3, 3, 1, &mut rng),
                rand_conv("a", "stem", 3, 2, 2, &mut rng),
                rand_conv("b1", "stem", 3, 5, 2, &mut rng),
                rand_conv("b3", "b1", 5, 2, 1, &mut rng),
                Node {
                    id: "add".into(),
                    kind: NodeKind::EltwiseAdd,
                    inputs: vec!["a".into(), "b3".into()],
                },
            ],
            vec!["add".into()],
            shape,
        )
        .unwrap();
        let stem_macs_before = 8 * 8 * 3 * 3u64;
        let (t2, rep) = convert_type2(&g).unwrap();
        assert!(
            rep.notes.iter().any(|n| n.contains("absorbed")),
            "peephole should fire: {:?}",
            rep.notes
        );
        // Subsample gone, stem now stride 2 computing a 4x4 output.
        assert!(t2.nodes.values().all(|n| !matches!(n.kind, NodeKind::Subsample { .. })));
        let NodeKind::Convolution(stem) = &t2.node("stem").kind else { panic!() };
        assert_eq!(stem.stride, 2);
        let stem_macs_after = 4 * 4 * 3 * 3u64;
        assert_eq!(stem_macs_before / stem_macs_after, 4);
        for _ in 0..10 {
            let x = rand_tensor(shape, &mut rng);
            let before = eval_outputs(&g, &x).unwrap();
            let after = eval_outputs(&t2, &x).unwrap();
            assert!(max_rel_err(&before[0], &after[0]) < 1e-9);
        }
    }
}
