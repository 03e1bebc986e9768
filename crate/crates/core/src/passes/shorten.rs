//! Sparse filter shortening.
//!
//! Filters produced by the mapping passes are structurally sparse: an
//! identity convolution's filter k reads only input depth k, an
//! average-pool convolution's filter d only depth d, and a merged residual
//! convolution's filter k reads depth k of the identity half plus the dense
//! half appended behind it. The PE array processes filters in groups of
//! K_VEC, so whenever every filter in a group confines its nonzero weights
//! to the group's own K_VEC-aligned input slab (plus, optionally, one dense
//! window shared by all groups), the convolution is annotated with a
//! [`ShortenInfo`]: stored filter depth and modeled MACs shrink from the
//! full input depth to the slab actually read. Weights in the graph stay
//! complete — the annotation changes what the code generator packs and what
//! the cost model counts, never the arithmetic.

use crate::arch::ArchConfig;
use crate::error::Result;
use crate::graph::{Graph, Node, NodeKind, ShortenInfo};
use crate::passes::{rebuild, report, PassReport};
use crate::scalar::Scalar;

/// Nonzero input depths of filter `k` (union over the spatial extent).
fn nonzero_depths<S: Scalar>(a: &crate::graph::ConvAttrs<S>, k: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for c in 0..a.in_depth {
        'scan: for r in 0..a.filter_h {
            for s in 0..a.filter_w {
                if a.weight(k, r, s, c) != S::zero() {
                    out.push(c);
                    break 'scan;
                }
            }
        }
    }
    out
}

/// Try to derive a band(+tail) annotation for one convolution. `None` when
/// the structure does not fit or brings no reduction.
fn analyze<S: Scalar>(a: &crate::graph::ConvAttrs<S>, group: usize) -> Option<ShortenInfo> {
    let n_groups = a.out_depth.div_ceil(group);
    // Reads outside each group's aligned slab must form one shared window.
    let mut tail_lo = usize::MAX;
    let mut tail_hi = 0usize;
    for g in 0..n_groups {
        for k in g * group..((g + 1) * group).min(a.out_depth) {
            for c in nonzero_depths(a, k) {
                if c / group != g {
                    tail_lo = tail_lo.min(c);
                    tail_hi = tail_hi.max(c + 1);
                }
            }
        }
    }
    let (band_depth, dense_start, dense_len) = if tail_lo == usize::MAX {
        (a.in_depth, a.in_depth, 0)
    } else {
        // Bands must sit strictly below the dense window, or the encoded
        // read set would overlap itself.
        (tail_lo, tail_lo, tail_hi - tail_lo)
    };
    let si = ShortenInfo { group, band_depth, dense_start, dense_len };
    // Soundness: every nonzero weight depth must be inside the encoded
    // read set of its filter.
    let mut total_read = 0usize;
    for k in 0..a.out_depth {
        let set = si.read_set(k, a.in_depth);
        for c in nonzero_depths(a, k) {
            if !set.contains(&c) {
                return None;
            }
        }
        total_read += set.len();
    }
    // Worth annotating only if it actually shrinks the working filters.
    if total_read >= a.out_depth * a.in_depth {
        return None;
    }
    Some(si)
}

/// Annotate structurally sparse convolutions with the input-depth band each
/// K_VEC filter group actually reads.
pub fn sparse_shortening<S: Scalar>(
    g: &Graph<S>,
    arch: &ArchConfig,
) -> Result<(Graph<S>, PassReport)> {
    let mut notes = Vec::new();
    let mut nodes: Vec<Node<S>> = Vec::with_capacity(g.nodes.len());
    for node in g.nodes.values() {
        match &node.kind {
            NodeKind::Convolution(a) => {
                let analyzed = analyze(a, arch.k_vec);
                match analyzed {
                    Some(si) if a.shorten != Some(si) => {
                        notes.push(format!(
                            "`{}`: filter depth {} -> band {} + dense {}",
                            node.id,
                            a.in_depth,
                            si.group.min(si.band_depth),
                            si.dense_len
                        ));
                        let mut a = a.clone();
                        a.shorten = Some(si);
                        nodes.push(Node {
                            id: node.id.clone(),
                            kind: NodeKind::Convolution(a),
                            inputs: node.inputs.clone(),
                        });
                    }
                    _ => nodes.push(node.clone()),
                }
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
    use crate::graph::{identity_conv_attrs, ConvAttrs, INPUT_ID};
    use crate::interp::eval_outputs;
    use crate::shape::TensorShape;
    use crate::tensor::{max_rel_err, Tensor};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn arch_kvec(k_vec: usize) -> ArchConfig {
        ArchConfig {
            q_vec: 4,
            p_vec: 2,
            c_vec: 4,
            k_vec,
            s_vec: 1,
            stream_buffer_bytes: 1 << 16,
            filter_cache_bytes: 1 << 16,
            bytes_per_element: 4,
            ext_bandwidth_bytes_per_cycle: 16.0,
            freq_mhz: 300.0,
            xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
        }
    }

    #[test]
    fn identity_conv_macs_shrink_by_depth_over_kvec() {
        // D=256, K_VEC=64: every filter group reads its own 64-deep slab.
        let shape = TensorShape::new(2, 2, 256).unwrap();
        let g = Graph::new(
            vec![Node::conv("id", &[INPUT_ID], identity_conv_attrs::<f64>(256))],
            vec!["id".into()],
            shape,
        )
        .unwrap();
        let macs_before = g.mac_count().unwrap();
        let (s, _) = sparse_shortening(&g, &arch_kvec(64)).unwrap();
        let macs_after = s.mac_count().unwrap();
        assert_eq!(macs_before / macs_after, 4); // 256 / 64
        let NodeKind::Convolution(a) = &s.node("id").kind else { panic!() };
        let si = a.shorten.unwrap();
        assert_eq!(si.group, 64);
        assert_eq!(si.band_depth, 256);
        assert_eq!(si.dense_len, 0);
        assert_eq!(a.read_set(70), (64..128).collect::<Vec<_>>());
    }

    #[test]
    fn aligned_depth_equal_kvec_is_left_alone() {
        let shape = TensorShape::new(2, 2, 64).unwrap();
        let g = Graph::new(
            vec![Node::conv("id", &[INPUT_ID], identity_conv_attrs::<f64>(64))],
            vec!["id".into()],
            shape,
        )
        .unwrap();
        let (s, rep) = sparse_shortening(&g, &arch_kvec(64)).unwrap();
        assert_eq!(s, g, "{:?}", rep.notes);
    }

    #[test]
    fn band_plus_dense_tail_from_merged_identity() {
        // Filter k reads depth k (identity half) plus the dense window
        // [16, 24) — the shape a merged skip branch produces.
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (k_out, c_a, c_b) = (16, 16, 8);
        let in_depth = c_a + c_b;
        let mut weights = vec![0.0f64; k_out * in_depth];
        for k in 0..k_out {
            weights[k * in_depth + k] = 1.0;
            for c in c_a..in_depth {
                weights[k * in_depth + c] = rng.gen_range(-1.0..1.0);
            }
        }
        let attrs = ConvAttrs {
            filter_h: 1,
            filter_w: 1,
            out_depth: k_out,
            in_depth,
            stride: 1,
            pad: 0,
            weights,
            bias: vec![0.0; k_out],
            shorten: None,
        };
        let shape = TensorShape::new(3, 3, in_depth).unwrap();
        let g = Graph::new(
            vec![Node::conv("m", &[INPUT_ID], attrs)],
            vec!["m".into()],
            shape,
        )
        .unwrap();
        let (s, _) = sparse_shortening(&g, &arch_kvec(4)).unwrap();
        let NodeKind::Convolution(a) = &s.node("m").kind else { panic!() };
        let si = a.shorten.unwrap();
        assert_eq!((si.band_depth, si.dense_start, si.dense_len), (16, 16, 8));
        // Filter 5 reads its group-1 band [4,8) plus the tail.
        let mut expect: Vec<usize> = (4..8).collect();
        expect.extend(16..24);
        assert_eq!(a.read_set(5), expect);
        // Annotation changes no arithmetic.
        for _ in 0..5 {
            let x = Tensor::new(
                shape,
                (0..shape.elems()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let before = eval_outputs(&g, &x).unwrap();
            let after = eval_outputs(&s, &x).unwrap();
            assert!(max_rel_err(&before[0], &after[0]) < 1e-12);
        }
        assert!(s.mac_count().unwrap() < g.mac_count().unwrap());
    }

    #[test]
    fn dense_filters_are_not_annotated() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let attrs = ConvAttrs {
            filter_h: 1,
            filter_w: 1,
            out_depth: 8,
            in_depth: 16,
            stride: 1,
            pad: 0,
            weights: (0..8 * 16).map(|_| rng.gen_range(0.1..1.0)).collect(),
            bias: vec![0.0; 8],
            shorten: None,
        };
        let g = Graph::new(
            vec![Node::conv("c", &[INPUT_ID], attrs)],
            vec!["c".into()],
            TensorShape::new(2, 2, 16).unwrap(),
        )
        .unwrap();
        let (s, _) = sparse_shortening(&g, &arch_kvec(4)).unwrap();
        assert_eq!(s, g);
    }

    #[test]
    fn shortening_is_idempotent() {
        let shape = TensorShape::new(2, 2, 32).unwrap();
        let g = Graph::new(
            vec![Node::conv("id", &[INPUT_ID], identity_conv_attrs::<f64>(32))],
            vec!["id".into()],
            shape,
        )
        .unwrap();
        let arch = arch_kvec(8);
        let (s1, _) = sparse_shortening(&g, &arch).unwrap();
        let (s2, rep) = sparse_shortening(&s1, &arch).unwrap();
        assert_eq!(s1, s2);
        assert!(rep.notes.is_empty());
    }
}
