//! Double-ended stream-buffer allocation with lifetime tracking.
//!
//! The graph input grows from address 0 upward and each unit's output is
//! anchored at the top of the buffer growing downward, so a linear chain
//! ping-pongs between the two ends: when a unit's stream-resident source
//! sits against the top, its output flips to the low end instead. Branch
//! residuals that fit neither end take the first fitting hole scanning up
//! from address 0. Expired lifetimes release their ranges. Whatever cannot
//! fit is spilled to external memory, which never runs out; every spilled
//! intermediate costs one write plus one read per consumer, and that count
//! is the plan's `spillpoint_count`.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::INPUT_ID;
use crate::schedule::Schedule;
use crate::slicing::ExecPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Location {
    StreamBuffer { offset: u64 },
    External { address: u64 },
}

impl Location {
    pub fn is_stream(&self) -> bool {
        matches!(self, Location::StreamBuffer { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Placement {
    pub location: Location,
    pub size_bytes: u64,
    /// `[first_write_step, last_read_step]`, inclusive global step indices.
    pub lifetime: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AllocationPlan {
    pub placements: IndexMap<String, Placement>,
    pub peak_stream_bytes: u64,
    pub spillpoint_count: u64,
    /// One past the highest external address handed out.
    pub external_end: u64,
}

impl AllocationPlan {
    pub fn placement(&self, entity: &str) -> &Placement {
        &self.placements[entity]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ItemClass {
    GraphInput,
    GraphOutput,
    Intermediate,
}

/// One entity to place. This is the allocator's whole interface, so plans
/// can be synthesized directly for fuzzing.
#[derive(Debug, Clone)]
pub struct AllocItem {
    pub id: String,
    pub bytes: u64,
    pub first_write: usize,
    pub last_read: usize,
    pub class: ItemClass,
    /// Units (or steps, for slices) that read this entity.
    pub consumers: usize,
    /// Entities the producing step reads; drives the high/low flip.
    pub producer_reads: Vec<String>,
}

struct Resident {
    id: String,
    offset: u64,
    bytes: u64,
    last_read: usize,
}

fn gaps(active: &[Resident], capacity: u64) -> Vec<(u64, u64)> {
    let mut sorted: Vec<(u64, u64)> = active.iter().map(|r| (r.offset, r.bytes)).collect();
    sorted.sort_unstable();
    let mut out = Vec::new();
    let mut cursor = 0;
    for (off, len) in sorted {
        if off > cursor {
            out.push((cursor, off - cursor));
        }
        cursor = cursor.max(off + len);
    }
    if cursor < capacity {
        out.push((cursor, capacity - cursor));
    }
    out
}

/// Place every item, processing in `first_write` order (stable on ties).
pub fn allocate_items(items: &[AllocItem], capacity: u64, external_base: u64) -> AllocationPlan {
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by_key(|&i| items[i].first_write);
    let mut stream: Vec<Resident> = Vec::new();
    let mut external: Vec<Resident> = Vec::new();
    let mut placements: IndexMap<String, Placement> = IndexMap::new();
    let mut peak = 0u64;
    let mut spillpoints = 0u64;
    let mut external_end = external_base;
    for &ix in &order {
        let item = &items[ix];
        stream.retain(|r| r.last_read >= item.first_write);
        external.retain(|r| r.last_read >= item.first_write);
        let free = gaps(&stream, capacity);
        let low_fit = free.iter().find(|&&(_, len)| len >= item.bytes).map(|&(off, _)| off);
        let offset = match item.class {
            ItemClass::GraphInput => low_fit,
            _ => {
                let top_blocked = item.producer_reads.iter().any(|src| {
                    stream.iter().any(|r| r.id == *src && r.offset + r.bytes == capacity)
                });
                if top_blocked {
                    low_fit
                } else {
                    // Anchor at the high end of the highest gap.
                    free.iter()
                        .rev()
                        .find(|&&(_, len)| len >= item.bytes)
                        .map(|&(off, len)| off + len - item.bytes)
                        .or(low_fit)
                }
            }
        };
        let location = match offset {
            Some(off) => {
                stream.push(Resident {
                    id: item.id.clone(),
                    offset: off,
                    bytes: item.bytes,
                    last_read: item.last_read,
                });
                Location::StreamBuffer { offset: off }
            }
            None => {
                if item.class == ItemClass::Intermediate {
                    spillpoints += 1 + item.consumers as u64;
                }
                let efree = gaps(&external, u64::MAX - external_base)
                    .into_iter()
                    .map(|(off, len)| (off + external_base, len))
                    .collect::<Vec<_>>();
                let addr = efree
                    .iter()
                    .find(|&&(_, len)| len >= item.bytes)
                    .map(|&(a, _)| a)
                    .unwrap_or(external_end);
                external.push(Resident {
                    id: item.id.clone(),
                    offset: addr - external_base,
                    bytes: item.bytes,
                    last_read: item.last_read,
                });
                external_end = external_end.max(addr + item.bytes);
                Location::External { address: addr }
            }
        };
        peak = peak.max(stream.iter().map(|r| r.bytes).sum());
        placements.insert(
            item.id.clone(),
            Placement {
                location,
                size_bytes: item.bytes,
                lifetime: (item.first_write, item.last_read),
            },
        );
    }
    AllocationPlan { placements, peak_stream_bytes: peak, spillpoint_count: spillpoints, external_end }
}

/// Derive items from a scheduled plan and place them.
pub fn allocate(
    plan: &ExecPlan,
    schedule: &Schedule,
    graph_outputs: &[String],
    capacity: u64,
    external_base: u64,
) -> AllocationPlan {
    allocate_items(&collect_items(plan, schedule, graph_outputs), capacity, external_base)
}

/// Entity lifetimes under the schedule's global step order.
pub fn collect_items(
    plan: &ExecPlan,
    schedule: &Schedule,
    graph_outputs: &[String],
) -> Vec<AllocItem> {
    let mut first_write: IndexMap<&str, usize> = IndexMap::new();
    let mut last_read: IndexMap<&str, usize> = IndexMap::new();
    let mut producer_reads: IndexMap<&str, Vec<String>> = IndexMap::new();
    let mut step_readers: IndexMap<&str, usize> = IndexMap::new();
    let mut unit_readers: IndexMap<&str, Vec<usize>> = IndexMap::new();
    let mut t = 0usize;
    let mut total = 0usize;
    for &u in &schedule.order {
        total += plan.units[u].steps.len();
    }
    for &u in &schedule.order {
        for step in &plan.units[u].steps {
            for r in &step.reads {
                let e = r.entity.as_str();
                last_read.insert(e, t);
                *step_readers.entry(e).or_insert(0) += 1;
                let units = unit_readers.entry(e).or_default();
                if !units.contains(&u) {
                    units.push(u);
                }
            }
            let e = step.write.entity.as_str();
            if !first_write.contains_key(e) {
                first_write.insert(e, t);
                producer_reads
                    .insert(e, step.reads.iter().map(|r| r.entity.clone()).collect());
            }
            t += 1;
        }
    }
    let mut items = Vec::new();
    for (id, info) in &plan.entities {
        let class = if id == INPUT_ID {
            ItemClass::GraphInput
        } else if graph_outputs.contains(id) {
            ItemClass::GraphOutput
        } else {
            ItemClass::Intermediate
        };
        let fw = match class {
            ItemClass::GraphInput => 0,
            _ => match first_write.get(id.as_str()) {
                Some(&s) => s,
                None => continue, // dead entity: nothing ever writes it
            },
        };
        // Results must survive until the host reads them after the run.
        let lr = match class {
            ItemClass::GraphOutput => total,
            _ => *last_read.get(id.as_str()).unwrap_or(&fw),
        };
        let consumers = if info.slice_of.is_some() {
            *step_readers.get(id.as_str()).unwrap_or(&0)
        } else {
            unit_readers.get(id.as_str()).map_or(0, |v| v.len())
        };
        items.push(AllocItem {
            id: id.clone(),
            bytes: info.bytes,
            first_write: fw,
            last_read: lr,
            class,
            consumers,
            producer_reads: producer_reads.get(id.as_str()).cloned().unwrap_or_default(),
        });
    }
    items
}

/// Exhaustive pairwise safety check: placements in the same space with
/// intersecting lifetimes must occupy disjoint byte ranges, and stream
/// placements must lie inside the buffer.
pub fn verify(plan: &AllocationPlan, capacity: u64) -> Result<()> {
    let entries: Vec<(&String, &Placement)> = plan.placements.iter().collect();
    for (id, p) in &entries {
        if let Location::StreamBuffer { offset } = p.location {
            if offset + p.size_bytes > capacity {
                return Err(Error::AddressFault(format!(
                    "`{id}` at {offset}+{} exceeds the {capacity}-byte stream buffer",
                    p.size_bytes
                )));
            }
        }
    }
    for i in 0..entries.len() {
        for j in i + 1..entries.len() {
            let (ia, a) = entries[i];
            let (ib, b) = entries[j];
            let (sa, sb) = (a.lifetime, b.lifetime);
            if sa.0 > sb.1 || sb.0 > sa.1 {
                continue;
            }
            let overlap = match (a.location, b.location) {
                (Location::StreamBuffer { offset: oa }, Location::StreamBuffer { offset: ob })
                | (Location::External { address: oa }, Location::External { address: ob }) => {
                    oa < ob + b.size_bytes && ob < oa + a.size_bytes
                }
                _ => false,
            };
            if overlap {
                return Err(Error::AddressFault(format!(
                    "`{ia}` and `{ib}` overlap while both live"
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn item(id: &str, bytes: u64, fw: usize, lr: usize, class: ItemClass) -> AllocItem {
        AllocItem {
            id: id.into(),
            bytes,
            first_write: fw,
            last_read: lr,
            class,
            consumers: 1,
            producer_reads: Vec::new(),
        }
    }

    #[test]
    fn double_ended_single_conv() {
        let items = vec![
            item("input", 256, 0, 0, ItemClass::GraphInput),
            AllocItem { producer_reads: vec!["input".into()], ..item("out", 128, 0, 1, ItemClass::GraphOutput) },
        ];
        let plan = allocate_items(&items, 1024, 0);
        assert_eq!(plan.placements["input"].location, Location::StreamBuffer { offset: 0 });
        assert_eq!(plan.placements["out"].location, Location::StreamBuffer { offset: 1024 - 128 });
        assert_eq!(plan.peak_stream_bytes, 384);
        assert_eq!(plan.spillpoint_count, 0);
        verify(&plan, 1024).unwrap();
    }

    #[test]
    fn chain_ping_pongs_between_ends() {
        // input -> t1 -> t2 -> t3; each step frees its source.
        let items = vec![
            item("input", 100, 0, 0, ItemClass::GraphInput),
            AllocItem { producer_reads: vec!["input".into()], ..item("t1", 100, 0, 1, ItemClass::Intermediate) },
            AllocItem { producer_reads: vec!["t1".into()], ..item("t2", 100, 1, 2, ItemClass::Intermediate) },
            AllocItem { producer_reads: vec!["t2".into()], ..item("t3", 100, 2, 3, ItemClass::GraphOutput) },
        ];
        let plan = allocate_items(&items, 256, 0);
        assert_eq!(plan.placements["input"].location, Location::StreamBuffer { offset: 0 });
        // t1 anchors high; t2 sees its source at the top and flips low
        // (input has expired); t3 flips back up.
        assert_eq!(plan.placements["t1"].location, Location::StreamBuffer { offset: 156 });
        assert_eq!(plan.placements["t2"].location, Location::StreamBuffer { offset: 0 });
        assert_eq!(plan.placements["t3"].location, Location::StreamBuffer { offset: 156 });
        assert_eq!(plan.spillpoint_count, 0);
        verify(&plan, 256).unwrap();
    }

    #[test]
    fn branch_residuals_stack_in_the_gap() {
        // Four branch outputs off one input, all live until the join.
        let mut items = vec![item("input", 64, 0, 3, ItemClass::GraphInput)];
        for (i, b) in ["b0", "b1", "b2", "b3"].iter().enumerate() {
            items.push(AllocItem {
                producer_reads: vec!["input".into()],
                ..item(b, 32, i, 4, ItemClass::Intermediate)
            });
        }
        items.push(AllocItem {
            producer_reads: vec!["b0".into(), "b1".into(), "b2".into(), "b3".into()],
            ..item("join", 64, 4, 5, ItemClass::GraphOutput)
        });
        let plan = allocate_items(&items, 256, 0);
        verify(&plan, 256).unwrap();
        assert_eq!(plan.spillpoint_count, 0);
        // b0 anchors at the very top; the rest stack downward.
        assert_eq!(plan.placements["b0"].location, Location::StreamBuffer { offset: 224 });
        assert_eq!(plan.placements["b1"].location, Location::StreamBuffer { offset: 192 });
        assert_eq!(plan.placements["b2"].location, Location::StreamBuffer { offset: 160 });
        assert_eq!(plan.placements["b3"].location, Location::StreamBuffer { offset: 128 });
        // Peak: the four residuals plus whichever of input/join is live.
        assert_eq!(plan.peak_stream_bytes, 4 * 32 + 64);
    }

    #[test]
    fn oversized_intermediate_spills_with_write_plus_reads() {
        let items = vec![
            item("input", 64, 0, 0, ItemClass::GraphInput),
            AllocItem {
                consumers: 3,
                producer_reads: vec!["input".into()],
                ..item("huge", 1 << 20, 0, 3, ItemClass::Intermediate)
            },
        ];
        let plan = allocate_items(&items, 256, 4096);
        assert_eq!(plan.placements["huge"].location, Location::External { address: 4096 });
        assert_eq!(plan.spillpoint_count, 1 + 3);
        assert_eq!(plan.external_end, 4096 + (1 << 20));
        verify(&plan, 256).unwrap();
    }

    #[test]
    fn verify_rejects_live_overlap() {
        let mut placements = IndexMap::new();
        placements.insert(
            "a".to_string(),
            Placement {
                location: Location::StreamBuffer { offset: 0 },
                size_bytes: 64,
                lifetime: (0, 5),
            },
        );
        placements.insert(
            "b".to_string(),
            Placement {
                location: Location::StreamBuffer { offset: 32 },
                size_bytes: 64,
                lifetime: (3, 8),
            },
        );
        let plan = AllocationPlan {
            placements,
            peak_stream_bytes: 0,
            spillpoint_count: 0,
            external_end: 0,
        };
        assert!(matches!(verify(&plan, 1024), Err(Error::AddressFault(_))));
    }

    #[test]
    fn random_item_sets_never_collide() {
        let mut rng = ChaCha8Rng::seed_from_u64(0xa110c);
        for _ in 0..200 {
            let n = rng.gen_range(1..20);
            let capacity = rng.gen_range(64..2048);
            let items: Vec<AllocItem> = (0..n)
                .map(|i| {
                    let fw = rng.gen_range(0..30);
                    AllocItem {
                        id: format!("e{i}"),
                        bytes: rng.gen_range(1..512),
                        first_write: fw,
                        last_read: fw + rng.gen_range(0..10),
                        class: match rng.gen_range(0..3) {
                            0 => ItemClass::GraphInput,
                            1 => ItemClass::GraphOutput,
                            _ => ItemClass::Intermediate,
                        },
                        consumers: rng.gen_range(0..4),
                        producer_reads: Vec::new(),
                    }
                })
                .collect();
            let plan = allocate_items(&items, capacity, 1 << 20);
            verify(&plan, capacity).unwrap();
        }
    }
}
