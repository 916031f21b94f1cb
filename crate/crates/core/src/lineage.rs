//! Inter-temporal links between consecutive phases, the symmetric
//! Herfindahl–Hirschman filter, and lineages as connected components.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metagraph::{GroupId, MetaGraphSequence};
use crate::similarity::SimilarityMatrix;

/// Relative slack on the `share >= HHI` test, so exact ties survive rounding.
const SHARE_TOLERANCE: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterTemporalLink {
    pub parent: GroupId,
    pub child: GroupId,
    pub weight: f64,
}

/// All positive-similarity pairs between consecutive phases, sorted by
/// `(parent, child)`.
pub fn adjacent_links(m: &SimilarityMatrix, seq: &MetaGraphSequence) -> Vec<InterTemporalLink> {
    let known: std::collections::HashSet<GroupId> = seq.group_ids().into_iter().collect();
    let mut links: Vec<InterTemporalLink> = m
        .entries()
        .filter_map(|(a, b, w)| {
            let (parent, child) = if a.phase <= b.phase { (a, b) } else { (b, a) };
            (child.phase == parent.phase + 1
                && w > 0.0
                && known.contains(&parent)
                && known.contains(&child))
            .then_some(InterTemporalLink {
                parent,
                child,
                weight: w,
            })
        })
        .collect();
    links.sort_by_key(|l| (l.parent, l.child));
    links
}

/// Per-link keep flags of the symmetric HHI rule.
///
/// For every group, shares are computed over its outgoing links (as parent)
/// and separately over its incoming links (as child); the group's HHI is the
/// sum of squared shares on that side. A link is kept iff its share reaches
/// the HHI on both the parent's outgoing side and the child's incoming side.
pub fn hhi_flags(links: &[InterTemporalLink]) -> Vec<bool> {
    #[derive(Default)]
    struct Side {
        total: f64,
        sum_sq: f64,
    }
    let mut out_side: HashMap<GroupId, Side> = HashMap::new();
    let mut in_side: HashMap<GroupId, Side> = HashMap::new();
    for l in links {
        out_side.entry(l.parent).or_default().total += l.weight;
        in_side.entry(l.child).or_default().total += l.weight;
    }
    for l in links {
        let p = out_side.get_mut(&l.parent).unwrap();
        p.sum_sq += (l.weight / p.total).powi(2);
        let c = in_side.get_mut(&l.child).unwrap();
        c.sum_sq += (l.weight / c.total).powi(2);
    }
    let passes = |side: &Side, w: f64| {
        let share = w / side.total;
        share >= side.sum_sq * (1.0 - SHARE_TOLERANCE)
    };
    links
        .iter()
        .map(|l| passes(&out_side[&l.parent], l.weight) && passes(&in_side[&l.child], l.weight))
        .collect()
}

/// Links surviving the symmetric HHI rule, in input order.
pub fn hhi_filter(links: &[InterTemporalLink]) -> Vec<InterTemporalLink> {
    links
        .iter()
        .zip(hhi_flags(links))
        .filter_map(|(l, keep)| keep.then_some(*l))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineageGraph {
    pub links: Vec<InterTemporalLink>,
    /// Dense lineage ids, numbered by each component's smallest group.
    pub lineage_of: BTreeMap<GroupId, usize>,
}

impl LineageGraph {
    pub fn n_lineages(&self) -> usize {
        self.lineage_of.values().max().map_or(0, |m| m + 1)
    }

    pub fn members(&self, lineage: usize) -> Vec<GroupId> {
        self.lineage_of
            .iter()
            .filter(|(_, &l)| l == lineage)
            .map(|(g, _)| *g)
            .collect()
    }
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    /// Keeps the smaller index as root.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// Connected components of the filtered links; every group of `all_groups`
/// gets a lineage, isolated groups their own.
pub fn lineages(filtered: &[InterTemporalLink], all_groups: &[GroupId]) -> LineageGraph {
    let mut groups = all_groups.to_vec();
    for l in filtered {
        groups.push(l.parent);
        groups.push(l.child);
    }
    groups.sort();
    groups.dedup();
    let index = |g: &GroupId| groups.binary_search(g).expect("group collected above");

    let mut sets = DisjointSet::new(groups.len());
    for l in filtered {
        sets.union(index(&l.parent), index(&l.child));
    }
    // Roots are the smallest member, and groups are sorted, so numbering
    // roots in order of first appearance orders lineages by smallest member.
    let mut dense: HashMap<usize, usize> = HashMap::new();
    let lineage_of = groups
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let root = sets.find(i);
            let next = dense.len();
            (*g, *dense.entry(root).or_insert(next))
        })
        .collect();
    LineageGraph {
        links: filtered.to_vec(),
        lineage_of,
    }
}

/// Dump as `parent_phase,parent_group,child_phase,child_group,weight,kept`.
pub fn write_links_csv<W: Write>(links: &[InterTemporalLink], kept: &[bool], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["parent_phase", "parent_group", "child_phase", "child_group", "weight", "kept"])?;
    for (l, k) in links.iter().zip(kept) {
        w.write_record([
            l.parent.phase.to_string(),
            l.parent.local_id.to_string(),
            l.child.phase.to_string(),
            l.child.local_id.to_string(),
            l.weight.to_string(),
            k.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
