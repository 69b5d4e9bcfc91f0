//! Online partition upkeep: assignment of fresh commits, divergence checks
//! against the best achievable checkout cost, and incremental migration that
//! reuses existing segments instead of rebuilding from scratch.

use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{RecordId, VersionGraph, VersionId};
use crate::partition::{binary_search_delta, estimate_costs, CutStrategy, PartitioningScheme};
use crate::store::{Cvd, SegmentRewrite};

/// Storage budget, either fixed or tracking the current record count.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub enum StorageBudget {
    Absolute(u64),
    /// `gamma = factor * |R|`, re-evaluated as records accumulate.
    MultipleOfRecords(f64),
}

impl StorageBudget {
    pub fn gamma(&self, total_records: u64) -> u64 {
        match self {
            StorageBudget::Absolute(g) => *g,
            StorageBudget::MultipleOfRecords(f) => (f * total_records as f64).floor() as u64,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaintenancePolicy {
    pub budget: StorageBudget,
    /// Tolerance factor: migrate when the current average checkout cost
    /// exceeds `mu` times the best achievable one. Must be > 1.
    pub mu: f64,
    /// Splitting parameter from the last partitioner invocation; 0 until the
    /// first `optimize`, which makes every commit join its parent partition.
    pub delta_star: f64,
    /// Run the divergence check only every N commits.
    pub check_every: u64,
}

impl Default for MaintenancePolicy {
    fn default() -> Self {
        MaintenancePolicy {
            budget: StorageBudget::MultipleOfRecords(2.0),
            mu: 1.5,
            delta_star: 0.0,
            check_every: 1,
        }
    }
}

impl MaintenancePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.mu <= 1.0 {
            return Err(Error::Parameter(format!(
                "tolerance factor must exceed 1, got {}",
                self.mu
            )));
        }
        if self.check_every == 0 {
            return Err(Error::Parameter("check interval must be positive".into()));
        }
        Ok(())
    }
}

/// Where a freshly committed version should live.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Join(u64),
    NewPartition,
}

/// Commit-time assignment rule: start a new partition iff the overlap with
/// the max-weight parent is light (`w <= delta* * |R|`) and storage has
/// headroom (`S < gamma`); otherwise join that parent's partition.
pub fn assign_on_commit(
    parent_partition: u64,
    weight_to_parent: u64,
    total_records: u64,
    current_storage: u64,
    policy: &MaintenancePolicy,
) -> Assignment {
    let gamma = policy.budget.gamma(total_records);
    if weight_to_parent as f64 <= policy.delta_star * total_records as f64
        && current_storage < gamma
    {
        Assignment::NewPartition
    } else {
        Assignment::Join(parent_partition)
    }
}

#[derive(Debug, Clone)]
pub enum CheckOutcome {
    Ok { current_avg: f64, best_avg: f64 },
    Migrate {
        scheme: PartitioningScheme,
        current_avg: f64,
        best_avg: f64,
    },
}

/// Compares the live scheme's average checkout cost against the best the
/// partitioner can do under the budget; recommends migration when the ratio
/// exceeds the tolerance factor.
pub fn maintenance_check(
    current: &PartitioningScheme,
    graph: &VersionGraph,
    policy: &MaintenancePolicy,
) -> Result<CheckOutcome> {
    policy.validate()?;
    let stats = graph.bipartite_stats()?;
    let gamma = policy.budget.gamma(stats.n_records);
    let current_avg = estimate_costs(graph, current)?.avg_checkout;
    let (tree, _) = graph.dag_to_tree();
    // smallest-weight cuts nest as delta moves, so each recommended layout
    // refines the previous one and incremental migration stays cheap
    let (_, best_scheme) = binary_search_delta(&tree, gamma, CutStrategy::SmallestWeight)?;
    let best_avg = estimate_costs(&tree, &best_scheme)?.avg_checkout;
    if current_avg > policy.mu * best_avg {
        let mut scheme = best_scheme;
        // counts against the real (possibly merged) graph
        scheme.recount(graph)?;
        Ok(CheckOutcome::Migrate {
            scheme,
            current_avg,
            best_avg,
        })
    } else {
        Ok(CheckOutcome::Ok {
            current_avg,
            best_avg,
        })
    }
}

/// One target partition of a migration plan.
#[derive(Debug, Clone)]
pub struct MigrationPair {
    pub versions: Vec<VersionId>,
    /// Old partition to modify in place, or `None` to build from scratch.
    pub source: Option<u64>,
    pub inserts: BTreeSet<RecordId>,
    pub deletes: BTreeSet<RecordId>,
}

#[derive(Debug, Clone)]
pub struct MigrationPlan {
    pub pairs: Vec<MigrationPair>,
    /// Records the plan will write: inserts + deletes for sourced targets,
    /// full record count for from-scratch targets.
    pub estimated_write_cost: u64,
    /// Cost of rebuilding every target partition from scratch instead.
    pub naive_write_cost: u64,
}

/// Greedy pairing of new partitions with old ones. Candidate pairs are
/// ranked by an approximate common-record count taken from the version graph
/// (the union of rlists of versions present in both partitions) without
/// probing segments; exact insert/delete sets are then computed from rlists,
/// and any target whose exact modification cost exceeds its own size falls
/// back to a from-scratch build.
pub fn plan_migration(
    old_members: &BTreeMap<u64, Vec<VersionId>>,
    new_scheme: &PartitioningScheme,
    graph: &VersionGraph,
) -> Result<MigrationPlan> {
    let mut covered: Vec<VersionId> = new_scheme.partitions.iter().flatten().copied().collect();
    covered.sort_unstable();
    if covered != graph.vids() {
        return Err(Error::Consistency(
            "new scheme does not cover exactly the committed versions".into(),
        ));
    }
    for vs in old_members.values() {
        for v in vs {
            if graph.index_of(*v).is_none() {
                return Err(Error::Consistency(format!(
                    "old scheme contains unknown version {v}"
                )));
            }
        }
    }

    let target_rids: Vec<BTreeSet<RecordId>> = new_scheme
        .partitions
        .iter()
        .map(|p| {
            let nodes: Vec<usize> = p.iter().map(|v| graph.index_of(*v).unwrap()).collect();
            graph.union_rlist(&nodes).into_iter().collect()
        })
        .collect();
    let old_rids: BTreeMap<u64, BTreeSet<RecordId>> = old_members
        .iter()
        .map(|(k, vs)| {
            let nodes: Vec<usize> = vs.iter().map(|v| graph.index_of(*v).unwrap()).collect();
            (*k, graph.union_rlist(&nodes).into_iter().collect())
        })
        .collect();

    // max-heap over approximate common-record counts
    let mut heap: BinaryHeap<(u64, std::cmp::Reverse<(usize, u64)>)> = BinaryHeap::new();
    for (i, p_new) in new_scheme.partitions.iter().enumerate() {
        let new_set: BTreeSet<VersionId> = p_new.iter().copied().collect();
        for (k, p_old) in old_members {
            let shared: Vec<usize> = p_old
                .iter()
                .filter(|v| new_set.contains(v))
                .map(|v| graph.index_of(*v).unwrap())
                .collect();
            if shared.is_empty() {
                continue;
            }
            let approx = graph.union_count(&shared);
            heap.push((approx, std::cmp::Reverse((i, *k))));
        }
    }

    let mut source_of: Vec<Option<u64>> = vec![None; new_scheme.partitions.len()];
    let mut taken_new = vec![false; new_scheme.partitions.len()];
    let mut taken_old: BTreeSet<u64> = BTreeSet::new();
    while let Some((_, std::cmp::Reverse((i, k)))) = heap.pop() {
        if taken_new[i] || taken_old.contains(&k) {
            continue;
        }
        taken_new[i] = true;
        taken_old.insert(k);
        source_of[i] = Some(k);
    }

    let mut pairs = Vec::with_capacity(new_scheme.partitions.len());
    let mut estimated = 0u64;
    let mut naive = 0u64;
    for (i, p_new) in new_scheme.partitions.iter().enumerate() {
        let want = &target_rids[i];
        naive += want.len() as u64;
        let pair = match source_of[i] {
            Some(k) => {
                let have = &old_rids[&k];
                let inserts: BTreeSet<RecordId> = want.difference(have).copied().collect();
                let deletes: BTreeSet<RecordId> = have.difference(want).copied().collect();
                let exact = (inserts.len() + deletes.len()) as u64;
                if exact > want.len() as u64 {
                    MigrationPair {
                        versions: p_new.clone(),
                        source: None,
                        inserts: want.clone(),
                        deletes: BTreeSet::new(),
                    }
                } else {
                    MigrationPair {
                        versions: p_new.clone(),
                        source: Some(k),
                        inserts,
                        deletes,
                    }
                }
            }
            None => MigrationPair {
                versions: p_new.clone(),
                source: None,
                inserts: want.clone(),
                deletes: BTreeSet::new(),
            },
        };
        estimated += match pair.source {
            Some(_) => (pair.inserts.len() + pair.deletes.len()) as u64,
            None => want.len() as u64,
        };
        pairs.push(pair);
    }
    Ok(MigrationPlan {
        pairs,
        estimated_write_cost: estimated,
        naive_write_cost: naive,
    })
}

/// Applies a plan to the store. Returns the records actually written, which
/// must equal the plan's estimate.
pub fn execute_migration(cvd: &mut Cvd, plan: &MigrationPlan) -> Result<u64> {
    let rewrites: Vec<SegmentRewrite> = plan
        .pairs
        .iter()
        .map(|p| SegmentRewrite {
            source: p.source,
            deletes: p.deletes.clone(),
            insert_rids: p.inserts.clone(),
            versions: p.versions.clone(),
        })
        .collect();
    let written = cvd.rewrite_partitions(&rewrites)?;
    if written != plan.estimated_write_cost {
        return Err(Error::Internal(format!(
            "migration wrote {written} records, plan estimated {}",
            plan.estimated_write_cost
        )));
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::merge_example_graph;

    #[test]
    fn assignment_rule() {
        let policy = MaintenancePolicy {
            budget: StorageBudget::Absolute(200),
            mu: 1.5,
            delta_star: 0.5,
            check_every: 1,
        };
        // heavy overlap: join
        assert_eq!(
            assign_on_commit(3, 80, 100, 120, &policy),
            Assignment::Join(3)
        );
        // light overlap with headroom: split
        assert_eq!(
            assign_on_commit(3, 10, 100, 120, &policy),
            Assignment::NewPartition
        );
        // light overlap but budget exhausted: join anyway
        assert_eq!(
            assign_on_commit(3, 10, 100, 200, &policy),
            Assignment::Join(3)
        );
    }

    #[test]
    fn check_is_ok_for_fresh_scheme() {
        let (tree, _) = merge_example_graph().dag_to_tree();
        let policy = MaintenancePolicy {
            budget: StorageBudget::Absolute(10),
            ..Default::default()
        };
        let (_, scheme) =
            binary_search_delta(&tree, 10, CutStrategy::Balanced).unwrap();
        match maintenance_check(&scheme, &tree, &policy).unwrap() {
            CheckOutcome::Ok { current_avg, best_avg } => {
                assert!((current_avg - best_avg).abs() < 1e-12);
            }
            CheckOutcome::Migrate { .. } => panic!("fresh scheme should not migrate"),
        }
    }

    #[test]
    fn check_triggers_on_bad_scheme() {
        let (tree, _) = merge_example_graph().dag_to_tree();
        let policy = MaintenancePolicy {
            budget: StorageBudget::Absolute(10),
            mu: 1.05,
            ..Default::default()
        };
        let single = PartitioningScheme::single(&tree).unwrap();
        // single partition: C_avg = 9; best under gamma=10 is 5
        match maintenance_check(&single, &tree, &policy).unwrap() {
            CheckOutcome::Migrate { current_avg, best_avg, scheme } => {
                assert!(current_avg > best_avg);
                scheme.validate(&tree).unwrap();
            }
            CheckOutcome::Ok { .. } => panic!("divergent scheme should migrate"),
        }
    }

    #[test]
    fn plan_modification_cost() {
        // old partition {v1,v2} holds {1,2,3,4}; target {v1,v2,v3,v4} wants 9
        let (tree, _) = merge_example_graph().dag_to_tree();
        let old = BTreeMap::from([
            (1u64, vec![VersionId(1), VersionId(2)]),
            (2u64, vec![VersionId(3), VersionId(4)]),
        ]);
        let single = PartitioningScheme::single(&tree).unwrap();
        let plan = plan_migration(&old, &single, &tree).unwrap();
        assert_eq!(plan.pairs.len(), 1);
        // best source shares more records; inserts = the other side's records
        assert!(plan.estimated_write_cost < plan.naive_write_cost);
    }

    #[test]
    fn identity_plan_is_free() {
        let (tree, _) = merge_example_graph().dag_to_tree();
        let scheme = crate::partition::lyresplit(&tree, 0.75, CutStrategy::Balanced).unwrap();
        let old = BTreeMap::from([
            (1u64, scheme.partitions[0].clone()),
            (2u64, scheme.partitions[1].clone()),
        ]);
        let plan = plan_migration(&old, &scheme, &tree).unwrap();
        assert_eq!(plan.estimated_write_cost, 0);
        assert!(plan.pairs.iter().all(|p| p.source.is_some()));
    }

    #[test]
    fn fresh_when_modification_exceeds_rebuild() {
        use crate::graph::VersionGraph;
        let rids = |ids: &[u64]| ids.iter().map(|&i| RecordId(i)).collect::<Vec<_>>();
        // target {v2} wants {10}; only old partition holds {1,2,3} via v1
        let g = VersionGraph::from_parts(vec![
            (VersionId(1), vec![], rids(&[1, 2, 3])),
            (VersionId(2), vec![VersionId(1)], rids(&[10])),
        ])
        .unwrap();
        let old = BTreeMap::from([(1u64, vec![VersionId(1), VersionId(2)])]);
        let scheme = PartitioningScheme {
            partitions: vec![vec![VersionId(1)], vec![VersionId(2)]],
            record_counts: vec![3, 1],
            delta: 0.0,
            depth: 0,
        };
        let plan = plan_migration(&old, &scheme, &g).unwrap();
        let p2 = plan
            .pairs
            .iter()
            .find(|p| p.versions == vec![VersionId(2)])
            .unwrap();
        // modifying {1,2,3,10} down to {10} costs 3 > |target| = 1: go fresh
        assert!(p2.source.is_none());
        assert_eq!(p2.inserts.len(), 1);
    }

    #[test]
    fn policy_validation() {
        let mut p = MaintenancePolicy::default();
        p.mu = 1.0;
        assert!(p.validate().is_err());
        p.mu = 1.5;
        p.check_every = 0;
        assert!(p.validate().is_err());
    }
}
