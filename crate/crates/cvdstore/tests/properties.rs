//! Randomized property tests pitting the optimized graph plumbing against
//! naive set-based oracles.

use std::collections::BTreeSet;

use proptest::prelude::*;

use cvdstore::graph::{RecordId, VersionGraph, VersionId};
use cvdstore::partition::{estimate_costs, lyresplit, CutStrategy};

/// A random version tree encoded as (parent index, edit ops) per non-root
/// node; ops are (roll, slot) pairs driving delete/update/insert choices.
fn tree_strategy() -> impl Strategy<Value = Vec<(usize, Vec<(u8, u16)>)>> {
    prop::collection::vec(
        (0usize..64, prop::collection::vec((0u8..=255, 0u16..=999), 1..6)),
        1..60,
    )
}

fn build_parts(
    spec: &[(usize, Vec<(u8, u16)>)],
) -> Vec<(VersionId, Vec<VersionId>, Vec<RecordId>)> {
    let mut next_rid = 1u64;
    let mut parts: Vec<(VersionId, Vec<VersionId>, Vec<RecordId>)> = Vec::new();
    let root: Vec<RecordId> = (0..12)
        .map(|_| {
            let r = RecordId(next_rid);
            next_rid += 1;
            r
        })
        .collect();
    parts.push((VersionId(1), vec![], root));
    for (i, (p, ops)) in spec.iter().enumerate() {
        let p = p % parts.len();
        let mut rlist = parts[p].2.clone();
        for (roll, slot) in ops {
            if *roll < 40 && rlist.len() > 1 {
                let k = *slot as usize % rlist.len();
                rlist.swap_remove(k);
            } else {
                let r = RecordId(next_rid);
                next_rid += 1;
                if *roll < 180 && !rlist.is_empty() {
                    let k = *slot as usize % rlist.len();
                    rlist[k] = r;
                } else {
                    rlist.push(r);
                }
            }
        }
        let parent_vid = parts[p].0;
        parts.push((VersionId(i as u32 + 2), vec![parent_vid], rlist));
    }
    parts
}

proptest! {
    /// Edge weights computed by the graph builder equal the naive
    /// rlist-intersection size for every derivation edge.
    #[test]
    fn edge_weights_match_intersection_oracle(spec in tree_strategy()) {
        let parts = build_parts(&spec);
        let graph = VersionGraph::from_parts(parts.clone()).unwrap();
        for (vid, parents, rlist) in &parts {
            let child: BTreeSet<RecordId> = rlist.iter().copied().collect();
            let i = graph.index_of(*vid).unwrap();
            for p_vid in parents {
                let p = graph.index_of(*p_vid).unwrap();
                let p_set: BTreeSet<RecordId> =
                    graph.rlist(p).iter().copied().collect();
                let want = p_set.intersection(&child).count() as u64;
                prop_assert_eq!(graph.edge_weight(p, i), Some(want));
            }
        }
    }

    /// Per-partition record counts (telescoping sums + bitset unions inside
    /// the splitter) equal a naive BTreeSet union for every partition, and
    /// the reported storage is their sum.
    #[test]
    fn partition_counts_match_union_oracle(
        spec in tree_strategy(),
        delta in prop::sample::select(vec![0.1f64, 0.25, 0.5, 0.75, 0.9]),
    ) {
        let graph = VersionGraph::from_parts(build_parts(&spec)).unwrap();
        let scheme = lyresplit(&graph, delta, CutStrategy::Balanced).unwrap();
        let mut total = 0u64;
        for (vids, count) in scheme.partitions.iter().zip(&scheme.record_counts) {
            let mut union: BTreeSet<RecordId> = BTreeSet::new();
            for v in vids {
                let i = graph.index_of(*v).unwrap();
                union.extend(graph.rlist(i).iter().copied());
            }
            prop_assert_eq!(union.len() as u64, *count);
            total += *count;
        }
        let report = estimate_costs(&graph, &scheme).unwrap();
        prop_assert_eq!(report.storage, total);
    }
}
