//! Allocator fuzz: thousands of synthesized item sets and real-graph
//! schedules, with an independent pairwise interval check — two entities
//! whose lifetimes overlap must never share bytes in the same address space.

use overlay_core::alloc::{
    allocate, allocate_items, collect_items, verify, AllocItem, AllocationPlan, ItemClass,
    Location,
};
use overlay_core::fixtures;
use overlay_core::partition::partition;
use overlay_core::passes::legalize;
use overlay_core::schedule::{all_topo_orders, order_peak, schedule, Schedule};
use overlay_core::slicing::plan_slices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Allocator-independent oracle: overlapping lifetimes, same space, shared
/// bytes — report the colliding pair.
fn find_collision(plan: &AllocationPlan) -> Option<(String, String)> {
    let entries: Vec<_> = plan.placements.iter().collect();
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let (ia, a) = entries[i];
            let (ib, b) = entries[j];
            let lives_overlap = a.lifetime.0 <= b.lifetime.1 && b.lifetime.0 <= a.lifetime.1;
            if !lives_overlap {
                continue;
            }
            let spans = match (&a.location, &b.location) {
                (Location::StreamBuffer { offset: x }, Location::StreamBuffer { offset: y }) => {
                    Some((*x, a.size_bytes, *y, b.size_bytes))
                }
                (Location::External { address: x }, Location::External { address: y }) => {
                    Some((*x, a.size_bytes, *y, b.size_bytes))
                }
                _ => None,
            };
            if let Some((x, xl, y, yl)) = spans {
                if x < y + yl && y < x + xl {
                    return Some((ia.clone(), ib.clone()));
                }
            }
        }
    }
    None
}

fn random_items(rng: &mut ChaCha8Rng) -> (Vec<AllocItem>, u64) {
    let n = rng.gen_range(2..=24);
    let horizon = n * 2;
    let capacity = rng.gen_range(64..=4096) as u64 * 8;
    let mut items = Vec::with_capacity(n);
    for i in 0..n {
        let first_write = rng.gen_range(0..horizon);
        let last_read = rng.gen_range(first_write..horizon.max(first_write + 1));
        let class = match rng.gen_range(0..10) {
            0 => ItemClass::GraphInput,
            1 => ItemClass::GraphOutput,
            _ => ItemClass::Intermediate,
        };
        // Sizes straddle the capacity so some sets fit entirely and others
        // force spills; a few items dwarf the whole buffer.
        let bytes = match rng.gen_range(0..10) {
            0 => capacity + rng.gen_range(1..=1024),
            _ => rng.gen_range(8..=capacity.max(9)) / 2,
        };
        items.push(AllocItem {
            id: format!("e{i}"),
            bytes: bytes.max(8),
            first_write,
            last_read,
            class,
            consumers: rng.gen_range(0..4),
            producer_reads: (0..i.min(2)).map(|k| format!("e{}", i - 1 - k)).collect(),
        });
    }
    (items, capacity)
}

#[test]
fn synthesized_item_sets_never_collide() {
    let seed = fixtures::env_seed();
    let mut rng = fixtures::rng(seed ^ 0xa110c);
    for case in 0..1000 {
        let (items, capacity) = random_items(&mut rng);
        let plan = allocate_items(&items, capacity, capacity * 4);
        let ctx = format!("case {case}, seed {seed}");
        assert_eq!(plan.placements.len(), items.len(), "{ctx}: item dropped");
        if let Some((a, b)) = find_collision(&plan) {
            panic!("{ctx}: `{a}` and `{b}` overlap in space and time");
        }
        verify(&plan, capacity).unwrap_or_else(|e| panic!("{ctx}: {e}"));
        let mut expect_spills = 0u64;
        for item in &items {
            let p = plan.placement(&item.id);
            assert_eq!(p.size_bytes, item.bytes, "{ctx}: size mangled");
            assert_eq!(p.lifetime, (item.first_write, item.last_read), "{ctx}: lifetime mangled");
            match p.location {
                Location::StreamBuffer { offset } => {
                    assert!(offset + p.size_bytes <= capacity, "{ctx}: `{}` overflows", item.id);
                }
                Location::External { address } => {
                    assert!(address >= capacity * 4, "{ctx}: `{}` below external base", item.id);
                    if matches!(item.class, ItemClass::Intermediate) {
                        expect_spills += 1 + item.consumers as u64;
                    }
                }
            }
        }
        assert_eq!(plan.spillpoint_count, expect_spills, "{ctx}: spillpoint count");
    }
}

/// Kahn's algorithm with random tie-breaking: a uniform-ish random
/// topological order, independent of the scheduler under test.
fn random_topo_order(plan: &overlay_core::slicing::ExecPlan, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = plan.units.len();
    let producer: std::collections::HashMap<&str, usize> = plan
        .units
        .iter()
        .enumerate()
        .map(|(i, u)| (u.output.as_str(), i))
        .collect();
    let mut indeg = vec![0usize; n];
    let mut succs: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, u) in plan.units.iter().enumerate() {
        for inp in &u.inputs {
            if let Some(&p) = producer.get(inp.as_str()) {
                succs[p].push(i);
                indeg[i] += 1;
            }
        }
    }
    let mut ready: Vec<usize> = (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while !ready.is_empty() {
        let pick = rng.gen_range(0..ready.len());
        let u = ready.swap_remove(pick);
        order.push(u);
        for &s in &succs[u] {
            indeg[s] -= 1;
            if indeg[s] == 0 {
                ready.push(s);
            }
        }
    }
    assert_eq!(order.len(), n, "cycle in plan");
    order
}

#[test]
fn real_plans_under_random_orders_never_collide() {
    let seed = fixtures::env_seed();
    let mut rng = fixtures::rng(seed ^ 0x0d3a);
    let arch = fixtures::small_arch();
    let mut runs = 0usize;
    while runs < 200 {
        let (g, _input) = fixtures::random_graph(&mut rng);
        let (g, _) = legalize(&g, &arch).unwrap();
        let sgs = partition(&g, &arch).unwrap();
        let plan = plan_slices(&g, &sgs, &arch).unwrap();
        let order = random_topo_order(&plan, &mut rng);
        let sched = Schedule {
            unit_ids: order.iter().map(|&u| plan.units[u].id.clone()).collect(),
            peak_stream_bytes: order_peak(&plan, &order),
            live: Vec::new(),
            order,
        };
        // Tiny capacities force heavy spilling; large ones exercise reuse.
        let capacity = [512u64, 4096, 65536].choose(&mut rng).copied().unwrap();
        let alloc = allocate(&plan, &sched, &g.outputs, capacity, capacity);
        let ctx = format!("run {runs}, seed {seed}");
        if let Some((a, b)) = find_collision(&alloc) {
            panic!("{ctx}: `{a}` and `{b}` overlap in space and time");
        }
        verify(&alloc, capacity).unwrap_or_else(|e| panic!("{ctx}: {e}"));
        runs += 1;
    }
}

#[test]
fn every_order_of_a_small_plan_allocates_cleanly() {
    let seed = fixtures::env_seed();
    let mut rng = fixtures::rng(seed ^ 0x70b0);
    let arch = fixtures::small_arch();
    let mut checked = 0usize;
    let mut attempts = 0usize;
    while checked < 25 {
        attempts += 1;
        assert!(attempts < 1000, "random graphs stopped yielding small plans");
        let (g, _input) = fixtures::random_graph(&mut rng);
        let (g, _) = legalize(&g, &arch).unwrap();
        let sgs = partition(&g, &arch).unwrap();
        let plan = plan_slices(&g, &sgs, &arch).unwrap();
        if plan.units.len() > 5 {
            continue;
        }
        for order in all_topo_orders(&plan) {
            let sched = Schedule {
                unit_ids: order.iter().map(|&u| plan.units[u].id.clone()).collect(),
                peak_stream_bytes: order_peak(&plan, &order),
                live: Vec::new(),
                order,
            };
            for capacity in [256u64, 2048, 1 << 20] {
                let alloc = allocate(&plan, &sched, &g.outputs, capacity, capacity);
                if let Some((a, b)) = find_collision(&alloc) {
                    panic!("seed {seed}: `{a}`/`{b}` collide at capacity {capacity}");
                }
                let items = collect_items(&plan, &sched, &g.outputs);
                assert_eq!(items.len(), alloc.placements.len());
            }
        }
        checked += 1;
    }
}
