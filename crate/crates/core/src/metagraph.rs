//! Meta-graphs: one node per group, edges aggregated from the phase graph.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_io::{GraphSequence, MetadataTable, NodeId, PhaseGraph};
use crate::grouping::Partition;

/// Label used for groups without any labeled member.
pub const NO_LABEL: &str = "∅";

/// A group of one phase. Ordered by phase, then local id.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct GroupId {
    pub phase: usize,
    pub local_id: usize,
}

impl GroupId {
    pub fn new(phase: usize, local_id: usize) -> Self {
        GroupId { phase, local_id }
    }
}

impl fmt::Display for GroupId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.phase, self.local_id)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGraph {
    phase_index: usize,
    /// Member sets indexed by local group id.
    members: Vec<BTreeSet<NodeId>>,
    /// Keyed by `(a, b)` with `a <= b`; the diagonal holds within-group weight.
    edges: BTreeMap<(usize, usize), f64>,
}

impl MetaGraph {
    pub fn phase_index(&self) -> usize {
        self.phase_index
    }

    pub fn n_groups(&self) -> usize {
        self.members.len()
    }

    pub fn group_ids(&self) -> impl Iterator<Item = GroupId> + '_ {
        (0..self.members.len()).map(move |l| GroupId::new(self.phase_index, l))
    }

    pub fn members(&self, local_id: usize) -> &BTreeSet<NodeId> {
        &self.members[local_id]
    }

    pub fn all_members(&self) -> &[BTreeSet<NodeId>] {
        &self.members
    }

    pub fn edges(&self) -> &BTreeMap<(usize, usize), f64> {
        &self.edges
    }

    /// Aggregated weight between two local groups, in either order.
    pub fn edge_weight(&self, a: usize, b: usize) -> f64 {
        self.edges.get(&(a.min(b), a.max(b))).copied().unwrap_or(0.0)
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.values().sum()
    }
}

/// Aggregates `phase` over the groups of `part`.
pub fn build_metagraph(phase: &PhaseGraph, part: &Partition) -> Result<MetaGraph> {
    if part.phase_index() != phase.index() {
        return Err(Error::PartitionMismatch {
            phase: phase.index(),
            reason: format!("partition is for phase {}", part.phase_index()),
        });
    }
    let labels = part.labels_for(phase)?;
    let mut members = vec![BTreeSet::new(); part.n_groups()];
    for (node, &g) in phase.nodes().iter().zip(&labels) {
        members[g].insert(node.clone());
    }
    if let Some(empty) = members.iter().position(|m| m.is_empty()) {
        return Err(Error::PartitionMismatch {
            phase: phase.index(),
            reason: format!("group {empty} has no members"),
        });
    }
    let mut edges = BTreeMap::new();
    for e in phase.edges() {
        let (ga, gb) = (labels[e.a], labels[e.b]);
        *edges.entry((ga.min(gb), ga.max(gb))).or_insert(0.0) += e.weight;
    }
    Ok(MetaGraph {
        phase_index: phase.index(),
        members,
        edges,
    })
}

/// Label held by the most members of each group; ties go to the
/// lexicographically smallest label and unlabeled groups get [`NO_LABEL`].
pub fn dominant_label(meta: &MetaGraph, table: &MetadataTable) -> BTreeMap<GroupId, String> {
    meta.group_ids()
        .map(|gid| {
            let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
            for node in meta.members(gid.local_id) {
                for label in table.labels(meta.phase_index, node).into_iter().flatten() {
                    *counts.entry(label.as_str()).or_insert(0) += 1;
                }
            }
            // BTreeMap iterates labels in ascending order, so the first
            // maximum is the lexicographically smallest.
            let mut best: Option<(&str, usize)> = None;
            for (label, count) in counts {
                if best.is_none_or(|(_, c)| count > c) {
                    best = Some((label, count));
                }
            }
            let label = best.map_or(NO_LABEL, |(l, _)| l).to_string();
            (gid, label)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetaGraphSequence {
    metas: Vec<MetaGraph>,
    layer_summary: Option<BTreeMap<GroupId, String>>,
}

impl MetaGraphSequence {
    /// Builds one meta-graph per phase, in parallel.
    pub fn build(seq: &GraphSequence, partitions: &[Partition]) -> Result<Self> {
        if partitions.len() != seq.len() {
            return Err(Error::InvalidSequence(format!(
                "{} partitions for {} phases",
                partitions.len(),
                seq.len()
            )));
        }
        let metas = seq
            .phases()
            .par_iter()
            .zip(partitions.par_iter())
            .map(|(phase, part)| build_metagraph(phase, part))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetaGraphSequence {
            metas,
            layer_summary: None,
        })
    }

    /// Sequence from explicit member sets, one list of groups per phase.
    /// Groups may overlap; no edges are attached.
    pub fn from_groups(groups: Vec<Vec<BTreeSet<NodeId>>>) -> Self {
        let metas = groups
            .into_iter()
            .enumerate()
            .map(|(phase_index, members)| MetaGraph {
                phase_index,
                members,
                edges: BTreeMap::new(),
            })
            .collect();
        MetaGraphSequence {
            metas,
            layer_summary: None,
        }
    }

    pub fn with_layers(mut self, table: &MetadataTable) -> Self {
        let summary = self
            .metas
            .iter()
            .flat_map(|m| dominant_label(m, table))
            .collect();
        self.layer_summary = Some(summary);
        self
    }

    pub fn metas(&self) -> &[MetaGraph] {
        &self.metas
    }

    pub fn len(&self) -> usize {
        self.metas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.metas.is_empty()
    }

    pub fn layer_summary(&self) -> Option<&BTreeMap<GroupId, String>> {
        self.layer_summary.as_ref()
    }

    pub fn layer_of(&self, gid: GroupId) -> &str {
        self.layer_summary
            .as_ref()
            .and_then(|s| s.get(&gid))
            .map_or(NO_LABEL, String::as_str)
    }

    /// All group ids in `(phase, local_id)` order.
    pub fn group_ids(&self) -> Vec<GroupId> {
        self.metas.iter().flat_map(|m| m.group_ids()).collect()
    }

    pub fn members(&self, gid: GroupId) -> Option<&BTreeSet<NodeId>> {
        self.metas.get(gid.phase)?.members.get(gid.local_id)
    }

    pub fn group_size(&self, gid: GroupId) -> usize {
        self.members(gid).map_or(0, BTreeSet::len)
    }

    pub fn n_groups(&self) -> usize {
        self.metas.iter().map(MetaGraph::n_groups).sum()
    }
}
