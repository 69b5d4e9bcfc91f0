//! Version graph construction, the DAG-to-tree transform, and bipartite
//! statistics over the version/record membership structure.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of an immutable record within one CVD. Assigned monotonically
/// at commit time, never reused, never shown to end users.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct RecordId(pub u64);

/// Identifier of a committed version, assigned in commit order starting at 1.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct VersionId(pub u32);

impl fmt::Display for VersionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

impl VersionId {
    /// Accepts `v7` or a bare `7`.
    pub fn parse(s: &str) -> Result<VersionId> {
        let t = s.trim();
        let digits = t.strip_prefix('v').unwrap_or(t);
        digits
            .parse::<u32>()
            .ok()
            .filter(|n| *n > 0)
            .map(VersionId)
            .ok_or_else(|| Error::Parameter(format!("'{s}' is not a version id")))
    }
}

/// Per-version provenance row of the metadata table.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VersionMeta {
    pub vid: VersionId,
    pub parents: BTreeSet<VersionId>,
    pub children: BTreeSet<VersionId>,
    pub create_time: u64,
    pub commit_time: u64,
    pub message: String,
    /// Ordered attr_ids present in this version's schema.
    pub attributes: Vec<u32>,
    /// Checkout frequency f_i, bumped on every checkout. Defaults to 1 so the
    /// unweighted partitioning problem is the default.
    pub checkout_frequency: u64,
    /// Shared-record count with each parent, cached at commit time.
    pub parent_weights: BTreeMap<VersionId, u64>,
}

impl VersionMeta {
    pub fn new(vid: VersionId) -> Self {
        VersionMeta {
            vid,
            parents: BTreeSet::new(),
            children: BTreeSet::new(),
            create_time: 0,
            commit_time: 0,
            message: String::new(),
            attributes: Vec::new(),
            checkout_frequency: 1,
            parent_weights: BTreeMap::new(),
        }
    }
}

/// Exact counts over the version-record bipartite graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BipartiteStats {
    pub n_versions: u64,
    pub n_records: u64,
    pub n_edges: u64,
    /// Conceptual duplicated records introduced by the DAG-to-tree transform.
    /// Zero iff the version graph is a tree.
    pub n_duplicated: u64,
}

/// The version derivation graph: one node per committed version, one weighted
/// edge per parent-child derivation, plus each version's record-id list.
///
/// Nodes are indexed densely; `vids` maps the index back to the public id.
#[derive(Debug, Clone)]
pub struct VersionGraph {
    vids: Vec<VersionId>,
    index: HashMap<VersionId, usize>,
    /// `(parent index, shared-record count)` per node, possibly empty.
    parents: Vec<Vec<(usize, u64)>>,
    children: Vec<Vec<usize>>,
    /// Sorted record ids of each version.
    rlists: Vec<Vec<RecordId>>,
    levels: Vec<u32>,
    freqs: Vec<u64>,
    n_duplicated: u64,
    /// Largest rid in any rlist; bounds the scratch bitset for union counts.
    max_rid: u64,
}

fn max_rid_of(rlists: &[Vec<RecordId>]) -> u64 {
    rlists
        .iter()
        .flat_map(|r| r.iter())
        .map(|r| r.0)
        .max()
        .unwrap_or(0)
}

fn intersection_size(a: &[RecordId], b: &[RecordId]) -> u64 {
    let (mut i, mut j, mut n) = (0usize, 0usize, 0u64);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}

impl VersionGraph {
    /// Builds the graph from metadata rows and the per-version rlists. Edge
    /// weights are the exact record-set intersection sizes between each
    /// parent's and child's rlists.
    pub fn build(
        metadata: &[VersionMeta],
        rlists: &BTreeMap<VersionId, Vec<RecordId>>,
    ) -> Result<VersionGraph> {
        let mut vids: Vec<VersionId> = metadata.iter().map(|m| m.vid).collect();
        vids.sort_unstable();
        vids.dedup();
        if vids.len() != metadata.len() {
            return Err(Error::Corruption("duplicate vid in metadata".into()));
        }
        let index: HashMap<VersionId, usize> =
            vids.iter().enumerate().map(|(i, v)| (*v, i)).collect();
        let n = vids.len();

        let mut lists: Vec<Vec<RecordId>> = Vec::with_capacity(n);
        for vid in &vids {
            let mut rl = rlists
                .get(vid)
                .ok_or(Error::MissingVersion(vid.0))?
                .clone();
            rl.sort_unstable();
            rl.dedup();
            lists.push(rl);
        }

        let mut parents: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n];
        let mut children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for meta in metadata {
            let c = index[&meta.vid];
            for p in &meta.parents {
                let pi = *index.get(p).ok_or(Error::MissingVersion(p.0))?;
                let w = intersection_size(&lists[pi], &lists[c]);
                parents[c].push((pi, w));
                children[pi].push(c);
            }
            parents[c].sort_unstable_by_key(|(pi, _)| vids[*pi]);
        }
        for ch in &mut children {
            ch.sort_unstable();
        }

        let levels = compute_levels(&vids, &parents, &children)?;
        let freqs = {
            let by_vid: HashMap<VersionId, u64> = metadata
                .iter()
                .map(|m| (m.vid, m.checkout_frequency.max(1)))
                .collect();
            vids.iter().map(|v| by_vid[v]).collect()
        };
        let max_rid = max_rid_of(&lists);
        Ok(VersionGraph {
            vids,
            index,
            parents,
            children,
            rlists: lists,
            levels,
            freqs,
            n_duplicated: 0,
            max_rid,
        })
    }

    /// Builds a graph directly from `(vid, parents, rlist)` triples. Used by
    /// the workload generator and tests.
    pub fn from_parts(parts: Vec<(VersionId, Vec<VersionId>, Vec<RecordId>)>) -> Result<VersionGraph> {
        let mut metadata = Vec::with_capacity(parts.len());
        let mut rlists = BTreeMap::new();
        for (vid, parents, rlist) in parts {
            let mut m = VersionMeta::new(vid);
            m.parents = parents.into_iter().collect();
            metadata.push(m);
            rlists.insert(vid, rlist);
        }
        VersionGraph::build(&metadata, &rlists)
    }

    pub fn len(&self) -> usize {
        self.vids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vids.is_empty()
    }

    pub fn vids(&self) -> &[VersionId] {
        &self.vids
    }

    pub fn vid(&self, idx: usize) -> VersionId {
        self.vids[idx]
    }

    pub fn index_of(&self, vid: VersionId) -> Option<usize> {
        self.index.get(&vid).copied()
    }

    pub fn parents(&self, idx: usize) -> &[(usize, u64)] {
        &self.parents[idx]
    }

    pub fn children(&self, idx: usize) -> &[usize] {
        &self.children[idx]
    }

    pub fn rlist(&self, idx: usize) -> &[RecordId] {
        &self.rlists[idx]
    }

    pub fn record_count(&self, idx: usize) -> u64 {
        self.rlists[idx].len() as u64
    }

    /// Topological depth; roots are at level 1.
    pub fn level(&self, idx: usize) -> u32 {
        self.levels[idx]
    }

    /// Checkout frequency f_i, at least 1.
    pub fn frequency(&self, idx: usize) -> u64 {
        self.freqs[idx]
    }

    pub fn set_frequency(&mut self, idx: usize, f: u64) {
        self.freqs[idx] = f.max(1);
    }

    pub fn edge_weight(&self, parent: usize, child: usize) -> Option<u64> {
        self.parents[child]
            .iter()
            .find(|(p, _)| *p == parent)
            .map(|(_, w)| *w)
    }

    pub fn is_tree(&self) -> bool {
        self.parents.iter().all(|p| p.len() <= 1)
    }

    /// Duplicated-record count carried over from `dag_to_tree`; zero on
    /// graphs built directly from a CVD.
    pub fn n_duplicated(&self) -> u64 {
        self.n_duplicated
    }

    fn union_bitset(&self, nodes: &[usize]) -> Vec<u64> {
        let mut bits = vec![0u64; (self.max_rid as usize / 64) + 1];
        for &i in nodes {
            for r in &self.rlists[i] {
                bits[(r.0 / 64) as usize] |= 1 << (r.0 % 64);
            }
        }
        bits
    }

    /// Exact distinct-record count of a set of node indices, via a scratch
    /// bitset over the (dense) rid space.
    pub fn union_count(&self, nodes: &[usize]) -> u64 {
        self.union_bitset(nodes)
            .iter()
            .map(|w| w.count_ones() as u64)
            .sum()
    }

    /// Sorted union of the rlists of a set of node indices.
    pub fn union_rlist(&self, nodes: &[usize]) -> Vec<RecordId> {
        let bits = self.union_bitset(nodes);
        let mut out = Vec::new();
        for (w, word) in bits.iter().enumerate() {
            let mut word = *word;
            while word != 0 {
                let b = word.trailing_zeros() as u64;
                out.push(RecordId(w as u64 * 64 + b));
                word &= word - 1;
            }
        }
        out
    }

    /// Bipartite statistics over the whole graph.
    pub fn bipartite_stats(&self) -> Result<BipartiteStats> {
        self.bipartite_stats_of(&(0..self.len()).collect::<Vec<_>>())
    }

    /// Bipartite statistics over a partition given as node indices.
    pub fn bipartite_stats_of(&self, nodes: &[usize]) -> Result<BipartiteStats> {
        if nodes.is_empty() {
            return Err(Error::EmptyScope);
        }
        let n_edges: u64 = nodes.iter().map(|&i| self.record_count(i)).sum();
        Ok(BipartiteStats {
            n_versions: nodes.len() as u64,
            n_records: self.union_count(nodes),
            n_edges,
            n_duplicated: self.n_duplicated,
        })
    }

    /// Transforms a version DAG into a version tree by keeping, for every
    /// merge node, only the incoming edge with the highest weight (ties break
    /// toward the lower-vid parent). Records a merge node shared with a
    /// dropped parent are conceptually re-created under fresh ids, so the
    /// bipartite edge count is preserved while the record count grows by the
    /// returned duplicate count.
    pub fn dag_to_tree(&self) -> (VersionGraph, u64) {
        if self.is_tree() {
            return (self.clone(), 0);
        }
        let n = self.len();
        let order = topo_order(&self.parents, &self.children).expect("graph is acyclic");

        let mut next_fresh = self
            .rlists
            .iter()
            .flat_map(|r| r.iter())
            .map(|r| r.0)
            .max()
            .unwrap_or(0)
            + 1;
        let mut dup = 0u64;

        // orig rid -> tree rid, per node
        let mut maps: Vec<HashMap<RecordId, RecordId>> = vec![HashMap::new(); n];
        let mut tree_parents: Vec<Vec<(usize, u64)>> = vec![Vec::new(); n];
        let mut tree_rlists: Vec<Vec<RecordId>> = vec![Vec::new(); n];

        for &v in &order {
            if self.parents[v].is_empty() {
                maps[v] = self.rlists[v].iter().map(|r| (*r, *r)).collect();
                tree_rlists[v] = self.rlists[v].clone();
                continue;
            }
            // retained parent: max weight, tie -> lower vid
            let &(keep, w) = self.parents[v]
                .iter()
                .max_by(|(pa, wa), (pb, wb)| wa.cmp(wb).then(self.vids[*pb].cmp(&self.vids[*pa])))
                .unwrap();
            tree_parents[v].push((keep, w));
            let others: Vec<usize> = self.parents[v]
                .iter()
                .map(|(p, _)| *p)
                .filter(|p| *p != keep)
                .collect();
            let mut map = HashMap::with_capacity(self.rlists[v].len());
            let mut rl = Vec::with_capacity(self.rlists[v].len());
            for &r in &self.rlists[v] {
                let tree_rid = if let Some(t) = maps[keep].get(&r) {
                    *t
                } else if others
                    .iter()
                    .any(|&o| self.rlists[o].binary_search(&r).is_ok())
                {
                    // shared with a dropped parent: conceptually a new record
                    dup += 1;
                    let fresh = RecordId(next_fresh);
                    next_fresh += 1;
                    fresh
                } else {
                    r
                };
                map.insert(r, tree_rid);
                rl.push(tree_rid);
            }
            rl.sort_unstable();
            maps[v] = map;
            tree_rlists[v] = rl;
        }

        let mut tree_children: Vec<Vec<usize>> = vec![Vec::new(); n];
        for v in 0..n {
            for &(p, _) in &tree_parents[v] {
                tree_children[p].push(v);
            }
        }
        for ch in &mut tree_children {
            ch.sort_unstable();
        }
        let levels = compute_levels(&self.vids, &tree_parents, &tree_children)
            .expect("tree derived from acyclic graph");
        let max_rid = max_rid_of(&tree_rlists);
        (
            VersionGraph {
                vids: self.vids.clone(),
                index: self.index.clone(),
                parents: tree_parents,
                children: tree_children,
                rlists: tree_rlists,
                levels,
                freqs: self.freqs.clone(),
                n_duplicated: dup,
                max_rid,
            },
            dup,
        )
    }
}

fn topo_order(
    parents: &[Vec<(usize, u64)>],
    children: &[Vec<usize>],
) -> Result<Vec<usize>> {
    let n = parents.len();
    let mut indeg: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    let mut queue: std::collections::VecDeque<usize> =
        (0..n).filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &c in &children[v] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                queue.push_back(c);
            }
        }
    }
    if order.len() != n {
        return Err(Error::Corruption("cycle detected in version graph".into()));
    }
    Ok(order)
}

fn compute_levels(
    _vids: &[VersionId],
    parents: &[Vec<(usize, u64)>],
    children: &[Vec<usize>],
) -> Result<Vec<u32>> {
    let order = topo_order(parents, children)?;
    let mut levels = vec![1u32; parents.len()];
    for &v in &order {
        for &(p, _) in &parents[v] {
            levels[v] = levels[v].max(levels[p] + 1);
        }
    }
    Ok(levels)
}

/// The worked four-version merge example: v1..v4 with rlists chosen so that
/// w(v1,v2)=2, w(v1,v3)=1, w(v2,v4)=3, w(v3,v4)=4, |R(v3)|=4, |R(v4)|=6.
/// Used by tests and the acceptance suite.
pub fn merge_example_graph() -> VersionGraph {
    let r = |ids: &[u64]| ids.iter().map(|&i| RecordId(i)).collect::<Vec<_>>();
    VersionGraph::from_parts(vec![
        (VersionId(1), vec![], r(&[1, 2, 3])),
        (VersionId(2), vec![VersionId(1)], r(&[2, 3, 4])),
        (VersionId(3), vec![VersionId(1)], r(&[3, 5, 6, 7])),
        (
            VersionId(4),
            vec![VersionId(2), VersionId(3)],
            r(&[2, 3, 4, 5, 6, 7]),
        ),
    ])
    .expect("static example")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rids(ids: &[u64]) -> Vec<RecordId> {
        ids.iter().map(|&i| RecordId(i)).collect()
    }

    #[test]
    fn build_weights_and_levels() {
        let g = merge_example_graph();
        let v1 = g.index_of(VersionId(1)).unwrap();
        let v2 = g.index_of(VersionId(2)).unwrap();
        let v3 = g.index_of(VersionId(3)).unwrap();
        let v4 = g.index_of(VersionId(4)).unwrap();
        assert_eq!(g.edge_weight(v1, v2), Some(2));
        assert_eq!(g.edge_weight(v1, v3), Some(1));
        assert_eq!(g.edge_weight(v2, v4), Some(3));
        assert_eq!(g.edge_weight(v3, v4), Some(4));
        assert_eq!(g.record_count(v2), 3);
        assert_eq!(g.level(v1), 1);
        assert_eq!(g.level(v2), 2);
        assert_eq!(g.level(v4), 3);
    }

    #[test]
    fn single_version_graph() {
        let g = VersionGraph::from_parts(vec![(VersionId(1), vec![], rids(&[1, 2, 3]))]).unwrap();
        assert_eq!(g.len(), 1);
        assert!(g.parents(0).is_empty());
        assert_eq!(g.level(0), 1);
        let s = g.bipartite_stats().unwrap();
        assert_eq!((s.n_versions, s.n_records, s.n_edges), (1, 3, 3));
    }

    #[test]
    fn chain_of_identical_rlists() {
        let k = 5u64;
        let rl = rids(&(1..=k).collect::<Vec<_>>());
        let g = VersionGraph::from_parts(vec![
            (VersionId(1), vec![], rl.clone()),
            (VersionId(2), vec![VersionId(1)], rl.clone()),
            (VersionId(3), vec![VersionId(2)], rl.clone()),
        ])
        .unwrap();
        let v2 = g.index_of(VersionId(2)).unwrap();
        let v3 = g.index_of(VersionId(3)).unwrap();
        assert_eq!(g.parents(v2)[0].1, k);
        assert_eq!(g.parents(v3)[0].1, k);
    }

    #[test]
    fn cycle_is_rejected() {
        let mut m1 = VersionMeta::new(VersionId(1));
        m1.parents.insert(VersionId(2));
        let mut m2 = VersionMeta::new(VersionId(2));
        m2.parents.insert(VersionId(1));
        let mut rl = BTreeMap::new();
        rl.insert(VersionId(1), rids(&[1]));
        rl.insert(VersionId(2), rids(&[1]));
        assert!(matches!(
            VersionGraph::build(&[m1, m2], &rl),
            Err(Error::Corruption(_))
        ));
    }

    #[test]
    fn dangling_parent_is_rejected() {
        let mut m = VersionMeta::new(VersionId(2));
        m.parents.insert(VersionId(9));
        let mut rl = BTreeMap::new();
        rl.insert(VersionId(2), rids(&[1]));
        assert!(matches!(
            VersionGraph::build(&[m], &rl),
            Err(Error::MissingVersion(9))
        ));
    }

    #[test]
    fn dag_to_tree_merge_example() {
        let g = merge_example_graph();
        let (tree, dup) = g.dag_to_tree();
        assert_eq!(dup, 2);
        let v2 = tree.index_of(VersionId(2)).unwrap();
        let v3 = tree.index_of(VersionId(3)).unwrap();
        let v4 = tree.index_of(VersionId(4)).unwrap();
        // edge (v2,v4) removed, (v3,v4) retained with its original weight
        assert_eq!(tree.parents(v4), &[(v3, 4)]);
        assert_eq!(tree.parents(v2).len(), 1);
        let s = tree.bipartite_stats().unwrap();
        assert_eq!((s.n_versions, s.n_records, s.n_edges), (4, 9, 16));
        assert_eq!(s.n_duplicated, 2);
    }

    #[test]
    fn dag_to_tree_is_identity_on_trees() {
        let g = VersionGraph::from_parts(vec![
            (VersionId(1), vec![], rids(&[1, 2])),
            (VersionId(2), vec![VersionId(1)], rids(&[1, 2, 3])),
        ])
        .unwrap();
        let (t, dup) = g.dag_to_tree();
        assert_eq!(dup, 0);
        assert_eq!(t.len(), g.len());
        assert_eq!(t.rlist(0), g.rlist(0));
    }

    #[test]
    fn tree_telescoping_identity() {
        // On a tree, |R| = sum |R(v)| - sum of parent-edge weights.
        let g = VersionGraph::from_parts(vec![
            (VersionId(1), vec![], rids(&[1, 2, 3])),
            (VersionId(2), vec![VersionId(1)], rids(&[2, 3, 4, 5])),
            (VersionId(3), vec![VersionId(1)], rids(&[1, 6])),
            (VersionId(4), vec![VersionId(2)], rids(&[4, 5, 7])),
        ])
        .unwrap();
        let s = g.bipartite_stats().unwrap();
        let sum_records: u64 = (0..g.len()).map(|i| g.record_count(i)).sum();
        let sum_weights: u64 = (0..g.len())
            .flat_map(|i| g.parents(i).iter().map(|(_, w)| *w))
            .sum();
        assert_eq!(s.n_records, sum_records - sum_weights);
        assert_eq!(s.n_edges, sum_records);
    }
}
