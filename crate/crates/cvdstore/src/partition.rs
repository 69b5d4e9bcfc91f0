//! Latency-bounded partitioning of a version tree.
//!
//! A partitioning scheme assigns every version to exactly one storage
//! partition; a partition physically stores the union of its versions'
//! records. Storage cost is the sum of per-partition record counts, checkout
//! cost of a version is the record count of its partition.
//!
//! The main algorithm recursively splits the version tree until each
//! partition's version/record bipartite graph is dense enough, controlled by
//! a single parameter `delta` in (0, 1]: a partition with `v` versions, `r`
//! records and `e` bipartite edges is kept whole once `r * v * delta <= e`.
//! On a tree of depth-`l` recursion this guarantees storage at most
//! `(1 + delta)^l` times the minimum and average checkout cost below
//! `(1/delta) * (e/v)` of the unpartitioned graph.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{RecordId, VersionGraph, VersionId};

/// How to choose the cut edge among the eligible light edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CutStrategy {
    /// Minimize the version-count imbalance of the two halves, then the
    /// record-count imbalance, then prefer the smaller child vid.
    #[default]
    Balanced,
    /// Cut the lightest eligible edge (smaller child vid on ties). With this
    /// strategy the set of cut edges grows monotonically as `delta` grows,
    /// at the price of less balanced partitions.
    SmallestWeight,
}

/// Assignment of every version to a storage partition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitioningScheme {
    /// Sorted vids of each partition; every version of the scope appears in
    /// exactly one entry.
    pub partitions: Vec<Vec<VersionId>>,
    /// Distinct-record count of each partition.
    pub record_counts: Vec<u64>,
    /// The `delta` the scheme was produced with (0 for schemes not produced
    /// by the splitter, e.g. exhaustive search results).
    pub delta: f64,
    /// Maximum recursion depth that produced the scheme.
    pub depth: u32,
}

impl PartitioningScheme {
    /// Everything in one partition.
    pub fn single(graph: &VersionGraph) -> Result<PartitioningScheme> {
        let s = graph.bipartite_stats()?;
        Ok(PartitioningScheme {
            partitions: vec![graph.vids().to_vec()],
            record_counts: vec![s.n_records],
            delta: 0.0,
            depth: 0,
        })
    }

    pub fn storage(&self) -> u64 {
        self.record_counts.iter().sum()
    }

    pub fn partition_of(&self, vid: VersionId) -> Option<usize> {
        self.partitions
            .iter()
            .position(|p| p.binary_search(&vid).is_ok())
    }

    /// Checks the scheme covers exactly the graph's version set, with no
    /// version in two partitions and no empty partition.
    pub fn validate(&self, graph: &VersionGraph) -> Result<()> {
        if self.partitions.len() != self.record_counts.len() {
            return Err(Error::InvariantViolation(
                "partition and record-count lists differ in length".into(),
            ));
        }
        let mut seen: Vec<VersionId> = Vec::new();
        for p in &self.partitions {
            if p.is_empty() {
                return Err(Error::InvariantViolation("empty partition".into()));
            }
            seen.extend(p.iter().copied());
        }
        seen.sort_unstable();
        if seen.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvariantViolation(
                "a version appears in two partitions".into(),
            ));
        }
        if seen != graph.vids() {
            return Err(Error::InvariantViolation(
                "scheme version set differs from the graph's".into(),
            ));
        }
        Ok(())
    }

    /// Rebuilds exact record counts against a graph (used after remapping a
    /// scheme onto a different graph).
    pub fn recount(&mut self, graph: &VersionGraph) -> Result<()> {
        let mut counts = Vec::with_capacity(self.partitions.len());
        for p in &self.partitions {
            let nodes: Vec<usize> = p
                .iter()
                .map(|v| {
                    graph
                        .index_of(*v)
                        .ok_or(Error::MissingVersion(v.0))
                })
                .collect::<Result<_>>()?;
            counts.push(graph.union_count(&nodes));
        }
        self.record_counts = counts;
        Ok(())
    }
}

/// Per-partition share of a cost report.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PartitionCost {
    pub versions: u64,
    pub records: u64,
}

/// Exact storage and checkout costs of a scheme.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    /// Total records stored across partitions.
    pub storage: u64,
    /// Mean checkout cost over versions, each weighted equally.
    pub avg_checkout: f64,
    /// Mean checkout cost weighted by per-version checkout frequency.
    pub weighted_checkout: f64,
    pub partitions: Vec<PartitionCost>,
}

/// Computes exact costs of `scheme` against `graph`. Record counts are
/// recomputed from the rlists, not taken from the scheme.
pub fn estimate_costs(graph: &VersionGraph, scheme: &PartitioningScheme) -> Result<CostReport> {
    scheme.validate(graph)?;
    let mut parts = Vec::with_capacity(scheme.partitions.len());
    let mut storage = 0u64;
    let mut cost_sum = 0u128;
    let mut wsum = 0u128;
    let mut fsum = 0u128;
    for p in &scheme.partitions {
        let nodes: Vec<usize> = p.iter().map(|v| graph.index_of(*v).unwrap()).collect();
        let records = graph.union_count(&nodes);
        storage += records;
        cost_sum += records as u128 * nodes.len() as u128;
        for &i in &nodes {
            wsum += graph.frequency(i) as u128 * records as u128;
            fsum += graph.frequency(i) as u128;
        }
        parts.push(PartitionCost {
            versions: nodes.len() as u64,
            records,
        });
    }
    let n = graph.len() as f64;
    Ok(CostReport {
        storage,
        avg_checkout: cost_sum as f64 / n,
        weighted_checkout: wsum as f64 / fsum as f64,
        partitions: parts,
    })
}

struct WorkItem {
    nodes: Vec<usize>,
    /// Sum of |R(v)| over nodes; equals the bipartite edge count.
    sum_r: u64,
    /// Sum of parent-edge weights internal to the item.
    sum_w: u64,
    depth: u32,
}

/// Recursive light-edge splitter over a version tree.
///
/// Record counts inside the recursion use the telescoping identity
/// `|R| = sum |R(v)| - sum of internal edge weights`, which is exact whenever
/// every record's version set is connected in the tree — true for trees
/// built from commit histories and for the output of `dag_to_tree`. Final
/// per-partition counts are recomputed exactly from the rlists.
pub fn lyresplit(
    graph: &VersionGraph,
    delta: f64,
    strategy: CutStrategy,
) -> Result<PartitioningScheme> {
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::Parameter(format!(
            "delta must be in (0, 1], got {delta}"
        )));
    }
    if graph.is_empty() {
        return Err(Error::EmptyScope);
    }
    if !graph.is_tree() {
        return Err(Error::Parameter(
            "partitioning operates on a version tree; transform the graph first".into(),
        ));
    }
    let n = graph.len();

    // initial work items: one per root component
    let mut stack: Vec<WorkItem> = Vec::new();
    {
        let mut comp = vec![usize::MAX; n];
        let mut roots: Vec<usize> = (0..n).filter(|&i| graph.parents(i).is_empty()).collect();
        roots.sort_unstable();
        for (ci, &root) in roots.iter().enumerate() {
            let mut nodes = vec![root];
            comp[root] = ci;
            let mut head = 0;
            while head < nodes.len() {
                let u = nodes[head];
                head += 1;
                for &c in graph.children(u) {
                    if comp[c] == usize::MAX {
                        comp[c] = ci;
                        nodes.push(c);
                    }
                }
            }
            let sum_r: u64 = nodes.iter().map(|&i| graph.record_count(i)).sum();
            let sum_w: u64 = nodes
                .iter()
                .flat_map(|&i| graph.parents(i).iter().map(|(_, w)| *w))
                .sum();
            stack.push(WorkItem {
                nodes,
                sum_r,
                sum_w,
                depth: 0,
            });
        }
    }

    // stamp[i] == token marks membership in the work item being processed
    let mut stamp = vec![0u64; n];
    let mut token = 0u64;
    let mut out: Vec<WorkItem> = Vec::new();

    while let Some(item) = stack.pop() {
        let v = item.nodes.len() as u64;
        let r = item.sum_r - item.sum_w;
        let e = item.sum_r;
        if v <= 1 || (r as f64) * (v as f64) * delta <= e as f64 {
            out.push(item);
            continue;
        }
        token += 1;
        for &i in &item.nodes {
            stamp[i] = token;
        }
        // subtree aggregates within the item, children processed before parents
        let root = *item
            .nodes
            .iter()
            .find(|&&i| {
                graph
                    .parents(i)
                    .first()
                    .map_or(true, |(p, _)| stamp[*p] != token)
            })
            .expect("connected work item has a root");
        let mut order = Vec::with_capacity(item.nodes.len());
        order.push(root);
        let mut head = 0;
        while head < order.len() {
            let u = order[head];
            head += 1;
            for &c in graph.children(u) {
                if stamp[c] == token {
                    order.push(c);
                }
            }
        }
        let mut cnt: HashMap<usize, u64> = HashMap::with_capacity(order.len());
        let mut sub_r: HashMap<usize, u64> = HashMap::with_capacity(order.len());
        let mut sub_w: HashMap<usize, u64> = HashMap::with_capacity(order.len());
        for &u in order.iter().rev() {
            let mut c_cnt = 1u64;
            let mut c_r = graph.record_count(u);
            let mut c_w = 0u64;
            for &c in graph.children(u) {
                if stamp[c] == token {
                    c_cnt += cnt[&c];
                    c_r += sub_r[&c];
                    c_w += sub_w[&c] + graph.edge_weight(u, c).unwrap();
                }
            }
            cnt.insert(u, c_cnt);
            sub_r.insert(u, c_r);
            sub_w.insert(u, c_w);
        }

        // eligible cut edges: internal edges with weight <= delta * r
        let threshold = delta * r as f64;
        let mut best: Option<(u64, u64, VersionId, usize, u64)> = None; // key..., child, weight
        for &c in &order {
            if c == root {
                continue;
            }
            let (_, w) = graph.parents(c)[0];
            if w as f64 > threshold {
                continue;
            }
            let v_a = cnt[&c];
            let r_a = sub_r[&c] - sub_w[&c];
            let v_b = v - v_a;
            let r_b = (item.sum_r - sub_r[&c]) - (item.sum_w - sub_w[&c] - w);
            let key = match strategy {
                CutStrategy::Balanced => (v_a.abs_diff(v_b), r_a.abs_diff(r_b), graph.vid(c)),
                CutStrategy::SmallestWeight => (w, 0, graph.vid(c)),
            };
            if best.map_or(true, |(k0, k1, k2, _, _)| key < (k0, k1, k2)) {
                best = Some((key.0, key.1, key.2, c, w));
            }
        }
        let Some((_, _, _, cut_child, cut_w)) = best else {
            // no light edge: partition is kept whole
            out.push(item);
            continue;
        };

        // split off the subtree rooted at cut_child
        let mut sub_nodes = vec![cut_child];
        let mut head = 0;
        while head < sub_nodes.len() {
            let u = sub_nodes[head];
            head += 1;
            for &c in graph.children(u) {
                if stamp[c] == token {
                    sub_nodes.push(c);
                }
            }
        }
        let in_sub: std::collections::HashSet<usize> = sub_nodes.iter().copied().collect();
        let rest: Vec<usize> = item
            .nodes
            .iter()
            .copied()
            .filter(|i| !in_sub.contains(i))
            .collect();
        let a = WorkItem {
            sum_r: sub_r[&cut_child],
            sum_w: sub_w[&cut_child],
            nodes: sub_nodes,
            depth: item.depth + 1,
        };
        let b = WorkItem {
            sum_r: item.sum_r - a.sum_r,
            sum_w: item.sum_w - a.sum_w - cut_w,
            nodes: rest,
            depth: item.depth + 1,
        };
        stack.push(a);
        stack.push(b);
    }

    let depth = out.iter().map(|i| i.depth).max().unwrap_or(0);
    let mut partitions = Vec::with_capacity(out.len());
    let mut record_counts = Vec::with_capacity(out.len());
    for item in &out {
        let mut vids: Vec<VersionId> = item.nodes.iter().map(|&i| graph.vid(i)).collect();
        vids.sort_unstable();
        partitions.push(vids);
        record_counts.push(graph.union_count(&item.nodes));
    }
    // deterministic output order: by smallest vid
    let mut idx: Vec<usize> = (0..partitions.len()).collect();
    idx.sort_unstable_by_key(|&i| partitions[i][0]);
    let partitions: Vec<_> = idx.iter().map(|&i| partitions[i].clone()).collect();
    let record_counts: Vec<_> = idx.iter().map(|&i| record_counts[i]).collect();

    Ok(PartitioningScheme {
        partitions,
        record_counts,
        delta,
        depth,
    })
}

/// Smallest delta at which the whole tree is a single partition.
pub fn min_delta(graph: &VersionGraph) -> Result<f64> {
    let s = graph.bipartite_stats()?;
    Ok(s.n_edges as f64 / (s.n_records as f64 * s.n_versions as f64))
}

/// Finds a delta whose scheme stores between `0.99 * gamma` and `gamma`
/// records, by bisection over `[min_delta, 1]`. Storage grows with delta, so
/// when no delta lands in the band the largest storage not exceeding `gamma`
/// seen during the search is returned.
pub fn binary_search_delta(
    graph: &VersionGraph,
    gamma: u64,
    strategy: CutStrategy,
) -> Result<(f64, PartitioningScheme)> {
    let s = graph.bipartite_stats()?;
    if gamma < s.n_records {
        return Err(Error::InfeasibleBudget {
            gamma,
            min: s.n_records,
        });
    }
    let mut lo = (s.n_edges as f64 / (s.n_records as f64 * s.n_versions as f64)).min(1.0);
    let mut hi = 1.0f64;
    let lo_band = (0.99 * gamma as f64).ceil() as u64;

    let mut best: Option<(u64, f64, PartitioningScheme)> = None;
    let consider = |delta: f64, scheme: PartitioningScheme, best: &mut Option<_>| {
        let st = scheme.storage();
        if st <= gamma && best.as_ref().map_or(true, |(b, _, _)| st > *b) {
            *best = Some((st, delta, scheme));
        }
    };

    // the single-partition scheme is always feasible (gamma >= |R|), even if
    // rounding in `lo` keeps the splitter from terminating at the top level
    consider(lo, PartitioningScheme::single(graph)?, &mut best);
    let scheme_lo = lyresplit(graph, lo, strategy)?;
    let st_lo = scheme_lo.storage();
    if st_lo >= lo_band && st_lo <= gamma {
        return Ok((lo, scheme_lo));
    }
    consider(lo, scheme_lo, &mut best);

    while hi - lo > 1e-9 {
        let mid = 0.5 * (lo + hi);
        let scheme = lyresplit(graph, mid, strategy)?;
        let st = scheme.storage();
        if st > gamma {
            hi = mid;
        } else if st < lo_band {
            consider(mid, scheme, &mut best);
            lo = mid;
        } else {
            return Ok((mid, scheme));
        }
    }
    let (_, delta, scheme) = best.ok_or_else(|| {
        Error::Internal("bisection found no scheme within the storage budget".into())
    })?;
    Ok((delta, scheme))
}

const MAX_EXPANDED_VERSIONS: u64 = 1_000_000;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Frequency-weighted partitioning: every version is expanded into a chain of
/// `f_i` identical copies (frequencies rescaled by their gcd, capped at 10^6
/// total), the expanded tree is partitioned under the storage budget, and
/// each original version takes the smallest partition its copies landed in.
pub fn weighted_partition(
    graph: &VersionGraph,
    gamma: u64,
    strategy: CutStrategy,
) -> Result<(f64, PartitioningScheme)> {
    if graph.is_empty() {
        return Err(Error::EmptyScope);
    }
    if !graph.is_tree() {
        return Err(Error::Parameter(
            "weighted partitioning operates on a version tree".into(),
        ));
    }
    let n = graph.len();
    let mut g = 0u64;
    for i in 0..n {
        g = gcd(g, graph.frequency(i));
    }
    let g = g.max(1);
    let scaled: Vec<u64> = (0..n).map(|i| graph.frequency(i) / g).collect();
    let total: u64 = scaled.iter().sum();
    if total > MAX_EXPANDED_VERSIONS {
        return Err(Error::Parameter(format!(
            "rescaled checkout frequencies sum to {total}, above the {MAX_EXPANDED_VERSIONS} cap"
        )));
    }

    // expand in topological (index) order, chaining copies of each version
    let mut parts: Vec<(VersionId, Vec<VersionId>, Vec<RecordId>)> = Vec::with_capacity(total as usize);
    let mut first_copy = vec![VersionId(0); n];
    let mut last_copy = vec![VersionId(0); n];
    let mut copy_owner: HashMap<VersionId, usize> = HashMap::new();
    let mut next = 1u32;
    let mut topo: Vec<usize> = (0..n).collect();
    topo.sort_unstable_by_key(|&i| (graph.level(i), graph.vid(i)));
    for &i in &topo {
        for j in 0..scaled[i] {
            let vid = VersionId(next);
            next += 1;
            let parent = if j == 0 {
                graph.parents(i).first().map(|(p, _)| last_copy[*p])
            } else {
                Some(last_copy[i])
            };
            parts.push((
                vid,
                parent.into_iter().collect(),
                graph.rlist(i).to_vec(),
            ));
            if j == 0 {
                first_copy[i] = vid;
            }
            last_copy[i] = vid;
            copy_owner.insert(vid, i);
        }
    }
    let expanded = VersionGraph::from_parts(parts)?;
    let (delta, exp_scheme) = binary_search_delta(&expanded, gamma, strategy)?;

    // each original version goes to the smallest partition among its copies
    let mut assign: HashMap<usize, usize> = HashMap::new();
    for (k, p) in exp_scheme.partitions.iter().enumerate() {
        for vid in p {
            let owner = copy_owner[vid];
            let cur = assign.entry(owner).or_insert(k);
            if exp_scheme.record_counts[k] < exp_scheme.record_counts[*cur] {
                *cur = k;
            }
        }
    }
    let mut groups: HashMap<usize, Vec<VersionId>> = HashMap::new();
    for (owner, k) in assign {
        groups.entry(k).or_default().push(graph.vid(owner));
    }
    let mut partitions: Vec<Vec<VersionId>> = groups
        .into_values()
        .map(|mut v| {
            v.sort_unstable();
            v
        })
        .collect();
    partitions.sort_unstable_by_key(|p| p[0]);
    let mut scheme = PartitioningScheme {
        partitions,
        record_counts: Vec::new(),
        delta,
        depth: exp_scheme.depth,
    };
    scheme.recount(graph)?;
    scheme.validate(graph)?;
    Ok((delta, scheme))
}

/// Schema-aware eligibility of cut edges: an edge may be cut when the product
/// of shared attributes and shared records is small relative to the scope,
/// i.e. `a(vi,vj) * w(vi,vj) <= delta * |A| * |R|`. Returns `(parent, child)`
/// node-index pairs. `attrs[i]` lists the attr_ids of version `i`.
pub fn schema_aware_candidates(
    graph: &VersionGraph,
    attrs: &[Vec<u32>],
    delta: f64,
) -> Result<Vec<(usize, usize)>> {
    if attrs.len() != graph.len() {
        return Err(Error::Parameter(
            "one attribute list per version is required".into(),
        ));
    }
    let stats = graph.bipartite_stats()?;
    let mut all: Vec<u32> = attrs.iter().flatten().copied().collect();
    all.sort_unstable();
    all.dedup();
    let bound = delta * all.len() as f64 * stats.n_records as f64;

    let mut sorted: Vec<Vec<u32>> = attrs.to_vec();
    for a in &mut sorted {
        a.sort_unstable();
        a.dedup();
    }
    let mut out = Vec::new();
    for c in 0..graph.len() {
        for &(p, w) in graph.parents(c) {
            let mut shared = 0u64;
            let (mut i, mut j) = (0, 0);
            while i < sorted[p].len() && j < sorted[c].len() {
                match sorted[p][i].cmp(&sorted[c][j]) {
                    std::cmp::Ordering::Less => i += 1,
                    std::cmp::Ordering::Greater => j += 1,
                    std::cmp::Ordering::Equal => {
                        shared += 1;
                        i += 1;
                        j += 1;
                    }
                }
            }
            if (shared * w) as f64 <= bound {
                out.push((p, c));
            }
        }
    }
    out.sort_unstable();
    Ok(out)
}

const MAX_EXHAUSTIVE_VERSIONS: usize = 10;

/// Exhaustive search over all set partitions of the version set: minimum
/// average checkout cost subject to `storage <= gamma` (smaller storage on
/// ties). Only feasible for tiny instances.
pub fn brute_force_optimal(
    graph: &VersionGraph,
    gamma: u64,
) -> Result<(PartitioningScheme, CostReport)> {
    let n = graph.len();
    if n == 0 {
        return Err(Error::EmptyScope);
    }
    if n > MAX_EXHAUSTIVE_VERSIONS {
        return Err(Error::Scale(n));
    }
    let single = graph.bipartite_stats()?;
    if gamma < single.n_records {
        return Err(Error::InfeasibleBudget {
            gamma,
            min: single.n_records,
        });
    }

    let mut best: Option<(f64, u64, Vec<Vec<usize>>)> = None;
    // enumerate set partitions via restricted growth strings
    let mut assign = vec![0usize; n];
    loop {
        let groups_n = assign.iter().copied().max().unwrap() + 1;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); groups_n];
        for (i, &g) in assign.iter().enumerate() {
            groups[g].push(i);
        }
        let mut storage = 0u64;
        let mut cost = 0u128;
        for g in &groups {
            let r = graph.union_count(g);
            storage += r;
            cost += r as u128 * g.len() as u128;
        }
        if storage <= gamma {
            let avg = cost as f64 / n as f64;
            let better = match &best {
                None => true,
                Some((bavg, bst, _)) => {
                    avg < *bavg - 1e-12 || ((avg - bavg).abs() <= 1e-12 && storage < *bst)
                }
            };
            if better {
                best = Some((avg, storage, groups));
            }
        }
        // next restricted growth string
        let mut i = n;
        loop {
            if i == 1 {
                i = 0;
                break;
            }
            i -= 1;
            let max_prefix = assign[..i].iter().copied().max().unwrap();
            if assign[i] <= max_prefix {
                assign[i] += 1;
                for a in assign.iter_mut().skip(i + 1) {
                    *a = 0;
                }
                break;
            }
        }
        if i == 0 {
            break;
        }
    }

    let (_, _, groups) = best.ok_or_else(|| {
        Error::Internal("exhaustive search found no feasible scheme".into())
    })?;
    let mut partitions: Vec<Vec<VersionId>> = groups
        .iter()
        .map(|g| {
            let mut v: Vec<VersionId> = g.iter().map(|&i| graph.vid(i)).collect();
            v.sort_unstable();
            v
        })
        .collect();
    partitions.sort_unstable_by_key(|p| p[0]);
    let mut scheme = PartitioningScheme {
        partitions,
        record_counts: Vec::new(),
        delta: 0.0,
        depth: 0,
    };
    scheme.recount(graph)?;
    let report = estimate_costs(graph, &scheme)?;
    Ok((scheme, report))
}
