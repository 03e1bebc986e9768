//! Execution-order selection over plan units.
//!
//! Ready units sit in a priority queue keyed by the ratio of output bytes
//! to effective input bytes (each input weighted by how many of its readers
//! still remain). The lowest ratio runs first: units that shrink their data
//! release buffer space early, which lowers the peak footprint on branchy
//! graphs. Costs are recomputed on every pop because executing a unit
//! changes the remaining-reader counts; ties fall back to the unit id so
//! schedules are byte-identical across runs.

use indexmap::IndexMap;
use serde::Serialize;

use crate::slicing::ExecPlan;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Schedule {
    /// Unit indices in execution order.
    pub order: Vec<usize>,
    pub unit_ids: Vec<String>,
    /// Peak of the summed live whole-tensor entity bytes, the footprint an
    /// ideally compacting allocator would need.
    pub peak_stream_bytes: u64,
    /// Live whole-tensor entities at each position.
    pub live: Vec<Vec<String>>,
}

/// Producer unit of each whole-tensor entity.
fn producers(plan: &ExecPlan) -> IndexMap<&str, usize> {
    plan.units.iter().enumerate().map(|(i, u)| (u.output.as_str(), i)).collect()
}

/// Predecessor units of each unit, in input order, deduplicated.
fn preds(plan: &ExecPlan) -> Vec<Vec<usize>> {
    let prod = producers(plan);
    plan.units
        .iter()
        .map(|u| {
            let mut ps = Vec::new();
            for inp in &u.inputs {
                if let Some(&p) = prod.get(inp.as_str()) {
                    if !ps.contains(&p) {
                        ps.push(p);
                    }
                }
            }
            ps
        })
        .collect()
}

pub fn schedule(plan: &ExecPlan) -> Schedule {
    let n = plan.units.len();
    let deps = preds(plan);
    let mut remaining_users: IndexMap<&str, u64> = IndexMap::new();
    for u in &plan.units {
        for inp in &u.inputs {
            *remaining_users.entry(inp.as_str()).or_insert(0) += 1;
        }
    }
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let mut best: Option<(f64, &str, usize)> = None;
        for i in 0..n {
            if done[i] || !deps[i].iter().all(|&p| done[p]) {
                continue;
            }
            let u = &plan.units[i];
            let out_bytes = plan.entities[u.output.as_str()].bytes as f64;
            // Credit each input by its share of the bytes this read brings
            // closer to being freed: the final remaining reader gets full
            // credit, one of four gets a quarter.
            let eff_in: f64 = u
                .inputs
                .iter()
                .map(|e| {
                    plan.entities[e.as_str()].bytes as f64 / remaining_users[e.as_str()] as f64
                })
                .sum();
            let cost = out_bytes / eff_in.max(1.0);
            if best.map_or(true, |(c, id, _)| (cost, u.id.as_str()) < (c, id)) {
                best = Some((cost, u.id.as_str(), i));
            }
        }
        let (_, _, i) = best.expect("plan units form a DAG");
        done[i] = true;
        for inp in &plan.units[i].inputs {
            *remaining_users.get_mut(inp.as_str()).unwrap() -= 1;
        }
        order.push(i);
    }
    finish(plan, order)
}

/// Baseline: depth-first from each unit in declaration order, visiting
/// predecessors leftmost-first (the order the unit lists its inputs).
pub fn dfs_leftmost(plan: &ExecPlan) -> Vec<usize> {
    let deps = preds(plan);
    let mut seen = vec![false; plan.units.len()];
    let mut order = Vec::new();
    fn visit(i: usize, deps: &[Vec<usize>], seen: &mut [bool], order: &mut Vec<usize>) {
        if seen[i] {
            return;
        }
        seen[i] = true;
        for &p in &deps[i] {
            visit(p, deps, seen, order);
        }
        order.push(i);
    }
    for i in 0..plan.units.len() {
        visit(i, &deps, &mut seen, &mut order);
    }
    order
}

/// Peak summed live bytes of an arbitrary execution order.
pub fn order_peak(plan: &ExecPlan, order: &[usize]) -> u64 {
    lifetimes_peak(plan, order).0
}

fn lifetimes_peak(plan: &ExecPlan, order: &[usize]) -> (u64, Vec<Vec<String>>) {
    let n = order.len();
    let mut pos = vec![0usize; plan.units.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    let prod = producers(plan);
    let mut spans: Vec<(&str, u64, usize, usize)> = Vec::new();
    for (id, info) in &plan.entities {
        if info.slice_of.is_some() {
            continue;
        }
        let fw = match prod.get(id.as_str()) {
            Some(&u) => pos[u],
            None => 0, // the graph input is resident from the start
        };
        let mut lr = fw;
        for (u, unit) in plan.units.iter().enumerate() {
            if unit.inputs.iter().any(|e| e == id) {
                lr = lr.max(pos[u]);
            }
        }
        spans.push((id.as_str(), info.bytes, fw, lr));
    }
    let mut peak = 0;
    let mut live = Vec::with_capacity(n);
    for t in 0..n {
        let mut total = 0;
        let mut at = Vec::new();
        for &(id, bytes, fw, lr) in &spans {
            if fw <= t && t <= lr {
                total += bytes;
                at.push(id.to_string());
            }
        }
        peak = peak.max(total);
        live.push(at);
    }
    (peak, live)
}

fn finish(plan: &ExecPlan, order: Vec<usize>) -> Schedule {
    let (peak, live) = lifetimes_peak(plan, &order);
    Schedule {
        unit_ids: order.iter().map(|&i| plan.units[i].id.clone()).collect(),
        order,
        peak_stream_bytes: peak,
        live,
    }
}

/// Every topological order of the plan's units. Intended for exhaustive
/// comparison on small fixtures; refuses oversized plans.
pub fn all_topo_orders(plan: &ExecPlan) -> Vec<Vec<usize>> {
    assert!(plan.units.len() <= 8, "exhaustive enumeration is for small fixtures");
    let deps = preds(plan);
    let mut orders = Vec::new();
    let mut prefix = Vec::new();
    let mut done = vec![false; plan.units.len()];
    fn rec(
        deps: &[Vec<usize>],
        done: &mut Vec<bool>,
        prefix: &mut Vec<usize>,
        orders: &mut Vec<Vec<usize>>,
    ) {
        if prefix.len() == done.len() {
            orders.push(prefix.clone());
            return;
        }
        for i in 0..done.len() {
            if !done[i] && deps[i].iter().all(|&p| done[p]) {
                done[i] = true;
                prefix.push(i);
                rec(deps, done, prefix, orders);
                prefix.pop();
                done[i] = false;
            }
        }
    }
    rec(&deps, &mut done, &mut prefix, &mut orders);
    orders
}

/// `true` when `order` respects every producer→consumer edge.
pub fn is_topological(plan: &ExecPlan, order: &[usize]) -> bool {
    let deps = preds(plan);
    let mut pos = vec![usize::MAX; plan.units.len()];
    for (p, &i) in order.iter().enumerate() {
        pos[i] = p;
    }
    order.len() == plan.units.len()
        && pos.iter().all(|&p| p != usize::MAX)
        && (0..plan.units.len()).all(|i| deps[i].iter().all(|&p| pos[p] < pos[i]))
}

/// Step-by-step textual trace for debugging.
pub fn trace(plan: &ExecPlan, s: &Schedule) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    for (t, &i) in s.order.iter().enumerate() {
        let u = &plan.units[i];
        let live: u64 = s.live[t].iter().map(|e| plan.entities[e.as_str()].bytes).sum();
        writeln!(
            out,
            "{t:4}  {:<12} reads [{}] writes {} ({} B live)",
            u.id,
            u.inputs.join(", "),
            u.output,
            live
        )
        .unwrap();
    }
    writeln!(out, "peak {} B", s.peak_stream_bytes).unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::ArchConfig;
    use crate::graph::{ConvAttrs, Graph, Node, INPUT_ID};
    use crate::partition::partition;
    use crate::shape::TensorShape;
    use crate::slicing::plan_slices;

    fn arch() -> ArchConfig {
        ArchConfig {
            q_vec: 4,
            p_vec: 2,
            c_vec: 4,
            k_vec: 8,
            s_vec: 1,
            stream_buffer_bytes: 1 << 20,
            filter_cache_bytes: 1 << 20,
            bytes_per_element: 4,
            ext_bandwidth_bytes_per_cycle: 16.0,
            freq_mhz: 300.0,
            xbar_kernels: vec!["pool".into(), "lrn".into(), "lstm_tail".into()],
        }
    }

    fn conv1x1(id: &str, input: &str, cin: usize, cout: usize) -> Node<f64> {
        Node::conv(
            id,
            &[input],
            ConvAttrs {
                filter_h: 1,
                filter_w: 1,
                out_depth: cout,
                in_depth: cin,
                stride: 1,
                pad: 0,
                weights: vec![0.5; cout * cin],
                bias: vec![0.0; cout],
                shorten: None,
            },
        )
    }

    fn planned(nodes: Vec<Node<f64>>, outputs: Vec<String>, shape: TensorShape) -> ExecPlan {
        let g = Graph::new(nodes, outputs, shape).unwrap();
        let a = arch();
        let sgs = partition(&g, &a).unwrap();
        plan_slices(&g, &sgs, &a).unwrap()
    }

    #[test]
    fn linear_chain_has_unique_order() {
        let plan = planned(
            vec![conv1x1("a", INPUT_ID, 4, 4), conv1x1("b", "a", 4, 4), conv1x1("c", "b", 4, 4)],
            vec!["c".into()],
            TensorShape::new(4, 4, 4).unwrap(),
        );
        let s = schedule(&plan);
        assert_eq!(s.order, vec![0, 1, 2]);
        assert!(is_topological(&plan, &s.order));
        // No freedom: the exhaustive set is a single order.
        assert_eq!(all_topo_orders(&plan).len(), 1);
    }

    #[test]
    fn lower_ratio_runs_first() {
        // Both branches are ready; the shrinking one (4->2 depth) must run
        // before the growing one (4->8 depth).
        let plan = planned(
            vec![conv1x1("grow", INPUT_ID, 4, 8), conv1x1("shrink", INPUT_ID, 4, 2)],
            vec!["grow".into(), "shrink".into()],
            TensorShape::new(4, 4, 4).unwrap(),
        );
        let s = schedule(&plan);
        assert_eq!(s.unit_ids, vec!["sg0001", "sg0000"], "shrink (sg0001) first");
    }

    #[test]
    fn deterministic_tie_breaks_on_unit_id() {
        let plan = planned(
            vec![conv1x1("x", INPUT_ID, 4, 4), conv1x1("y", INPUT_ID, 4, 4)],
            vec!["x".into(), "y".into()],
            TensorShape::new(4, 4, 4).unwrap(),
        );
        let a = schedule(&plan);
        let b = schedule(&plan);
        assert_eq!(a, b);
        assert_eq!(a.order, vec![0, 1], "equal costs resolve by id");
    }

    #[test]
    fn priority_beats_leftmost_dfs_on_uneven_branches() {
        // Two branches off the input: the left one explodes depth before
        // shrinking, the right one shrinks immediately; a join consumes
        // both. Leftmost DFS runs the exploding branch first and holds its
        // big tensor while the input is still live.
        let plan = planned(
            vec![
                conv1x1("big", INPUT_ID, 4, 32),
                conv1x1("big2", "big", 32, 2),
                conv1x1("small", INPUT_ID, 4, 2),
                Node::conv(
                    "join",
                    &["big2", "small"],
                    ConvAttrs {
                        filter_h: 1,
                        filter_w: 1,
                        out_depth: 2,
                        in_depth: 4,
                        stride: 1,
                        pad: 0,
                        weights: vec![0.1; 2 * 4],
                        bias: vec![0.0; 2],
                        shorten: None,
                    },
                ),
            ],
            vec!["join".into()],
            TensorShape::new(8, 8, 4).unwrap(),
        );
        let s = schedule(&plan);
        assert!(is_topological(&plan, &s.order));
        let dfs_peak = order_peak(&plan, &dfs_leftmost(&plan));
        assert!(
            s.peak_stream_bytes <= dfs_peak,
            "priority {} vs dfs {dfs_peak}",
            s.peak_stream_bytes
        );
        // And it is no worse than the median of every legal order.
        let mut peaks: Vec<u64> =
            all_topo_orders(&plan).iter().map(|o| order_peak(&plan, o)).collect();
        peaks.sort_unstable();
        let median = peaks[peaks.len() / 2];
        assert!(s.peak_stream_bytes <= median);
    }
}
