//! Sparse Jaccard similarity between every pair of groups of the sequence.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use crate::error::{Error, Result};
use crate::metagraph::{GroupId, MetaGraphSequence};

/// `|a ∩ b| / |a ∪ b|`; undefined when both sets are empty.
pub fn jaccard<T: Ord>(a: &BTreeSet<T>, b: &BTreeSet<T>) -> Result<f64> {
    if a.is_empty() && b.is_empty() {
        return Err(Error::EmptySets);
    }
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|x| large.contains(x)).count();
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

/// Symmetric sparse similarity matrix over a global group order.
///
/// Only strictly positive off-diagonal entries are stored.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    order: Vec<GroupId>,
    index: HashMap<GroupId, usize>,
    /// Keyed by global indices `(i, j)` with `i < j`.
    entries: BTreeMap<(usize, usize), f64>,
    /// Per-index neighbor lists sorted by index.
    neighbors: Vec<Vec<(usize, f64)>>,
}

impl SimilarityMatrix {
    /// Builds a matrix from explicit entries; zero entries are dropped.
    pub fn from_entries(
        order: Vec<GroupId>,
        entries: impl IntoIterator<Item = (GroupId, GroupId, f64)>,
    ) -> Result<Self> {
        let index: HashMap<GroupId, usize> =
            order.iter().enumerate().map(|(i, g)| (*g, i)).collect();
        if index.len() != order.len() {
            return Err(Error::InvalidSequence("duplicate group in order".into()));
        }
        let mut map = BTreeMap::new();
        for (a, b, w) in entries {
            let (Some(&i), Some(&j)) = (index.get(&a), index.get(&b)) else {
                return Err(Error::InvalidSequence(format!("entry ({a}, {b}) outside order")));
            };
            if i == j {
                return Err(Error::InvalidSequence(format!("self entry for {a}")));
            }
            if !(0.0..=1.0).contains(&w) {
                return Err(Error::InvalidSequence(format!("similarity {w} outside [0, 1]")));
            }
            if w > 0.0 {
                map.insert((i.min(j), i.max(j)), w);
            }
        }
        Ok(Self::assemble(order, map))
    }

    fn assemble(order: Vec<GroupId>, entries: BTreeMap<(usize, usize), f64>) -> Self {
        let mut neighbors = vec![Vec::new(); order.len()];
        for (&(i, j), &w) in &entries {
            neighbors[i].push((j, w));
            neighbors[j].push((i, w));
        }
        for list in &mut neighbors {
            list.sort_by_key(|&(j, _)| j);
        }
        let index = order.iter().enumerate().map(|(i, g)| (*g, i)).collect();
        SimilarityMatrix {
            order,
            index,
            entries,
            neighbors,
        }
    }

    pub fn order(&self) -> &[GroupId] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn index_of(&self, gid: GroupId) -> Option<usize> {
        self.index.get(&gid).copied()
    }

    pub fn get(&self, a: GroupId, b: GroupId) -> f64 {
        match (self.index_of(a), self.index_of(b)) {
            (Some(i), Some(j)) if i != j => {
                self.entries.get(&(i.min(j), i.max(j))).copied().unwrap_or(0.0)
            }
            _ => 0.0,
        }
    }

    pub fn neighbors(&self, index: usize) -> &[(usize, f64)] {
        &self.neighbors[index]
    }

    /// Stored entries as `(a, b, similarity)` with `a < b` in global order.
    pub fn entries(&self) -> impl Iterator<Item = (GroupId, GroupId, f64)> + '_ {
        self.entries
            .iter()
            .map(|(&(i, j), &w)| (self.order[i], self.order[j], w))
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    /// Debug dump as `phase_a,group_a,phase_b,group_b,jaccard`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase_a", "group_a", "phase_b", "group_b", "jaccard"])?;
        for (a, b, s) in self.entries() {
            w.write_record([
                a.phase.to_string(),
                a.local_id.to_string(),
                b.phase.to_string(),
                b.local_id.to_string(),
                s.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Jaccard similarity between all groups of all phases.
///
/// Uses an inverted index from node to the groups containing it, so only
/// overlapping pairs are ever visited.
pub fn build_similarity(seq: &MetaGraphSequence) -> SimilarityMatrix {
    let order = seq.group_ids();
    let sizes: Vec<usize> = order.iter().map(|&g| seq.group_size(g)).collect();

    let mut postings: HashMap<&crate::graph_io::NodeId, Vec<usize>> = HashMap::new();
    for (gi, &gid) in order.iter().enumerate() {
        for node in seq.members(gid).into_iter().flatten() {
            postings.entry(node).or_default().push(gi);
        }
    }
    let mut overlap: HashMap<(usize, usize), usize> = HashMap::new();
    for groups in postings.values() {
        for (x, &i) in groups.iter().enumerate() {
            for &j in &groups[x + 1..] {
                *overlap.entry((i.min(j), i.max(j))).or_insert(0) += 1;
            }
        }
    }
    let entries = overlap
        .into_iter()
        .map(|((i, j), inter)| ((i, j), inter as f64 / (sizes[i] + sizes[j] - inter) as f64))
        .collect();
    SimilarityMatrix::assemble(order, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_io::NodeId;
    use proptest::prelude::*;

    fn set(items: &[u32]) -> BTreeSet<u32> {
        items.iter().copied().collect()
    }

    fn nodes(items: &[u32]) -> BTreeSet<NodeId> {
        items.iter().map(|i| NodeId::new(format!("n{i}")).unwrap()).collect()
    }

    #[test]
    fn jaccard_examples() {
        assert_eq!(jaccard(&set(&[1, 2, 3]), &set(&[2, 3, 4])).unwrap(), 0.5);
        assert_eq!(jaccard(&set(&[1, 2]), &set(&[1, 2])).unwrap(), 1.0);
        assert_eq!(jaccard(&set(&[1, 2]), &set(&[3])).unwrap(), 0.0);
        assert_eq!(jaccard(&set(&[]), &set(&[3])).unwrap(), 0.0);
        assert!(matches!(jaccard(&set(&[]), &set(&[])), Err(Error::EmptySets)));
    }

    #[test]
    fn identical_single_group_phases() {
        let seq = MetaGraphSequence::from_groups(vec![vec![nodes(&[1, 2, 3])], vec![nodes(&[1, 2, 3])]]);
        let m = build_similarity(&seq);
        assert_eq!(m.nnz(), 1);
        assert_eq!(m.get(GroupId::new(0, 0), GroupId::new(1, 0)), 1.0);
    }

    #[test]
    fn same_phase_partition_pairs_never_stored() {
        let seq = MetaGraphSequence::from_groups(vec![
            vec![nodes(&[1, 2]), nodes(&[3, 4])],
            vec![nodes(&[1, 3]), nodes(&[2, 4])],
        ]);
        let m = build_similarity(&seq);
        assert!(m.entries().all(|(a, b, _)| a.phase != b.phase));
        assert_eq!(m.nnz(), 4);
    }

    #[test]
    fn from_entries_validates() {
        let order = vec![GroupId::new(0, 0), GroupId::new(1, 0)];
        assert!(SimilarityMatrix::from_entries(order.clone(), [(order[0], order[0], 0.5)]).is_err());
        assert!(SimilarityMatrix::from_entries(order.clone(), [(order[0], order[1], 1.5)]).is_err());
        let m = SimilarityMatrix::from_entries(order.clone(), [(order[1], order[0], 0.0)]).unwrap();
        assert_eq!(m.nnz(), 0);
    }

    #[test]
    fn csv_dump() {
        let seq = MetaGraphSequence::from_groups(vec![vec![nodes(&[1, 2])], vec![nodes(&[2, 3])]]);
        let mut buf = Vec::new();
        build_similarity(&seq).write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "phase_a,group_a,phase_b,group_b,jaccard\n0,0,1,0,0.3333333333333333\n");
    }

    fn arb_groups() -> impl Strategy<Value = Vec<Vec<BTreeSet<NodeId>>>> {
        let group = prop::collection::btree_set(0u32..30, 1..10);
        let phase = prop::collection::vec(group, 1..5);
        prop::collection::vec(phase, 1..6).prop_map(|phases| {
            phases
                .into_iter()
                .map(|p| {
                    p.into_iter()
                        .map(|g| g.into_iter().map(|i| NodeId::new(format!("n{i}")).unwrap()).collect())
                        .collect()
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn sparse_build_matches_quadratic_scan(groups in arb_groups()) {
            let seq = MetaGraphSequence::from_groups(groups);
            let m = build_similarity(&seq);
            let ids = seq.group_ids();
            let mut expected = 0;
            for (x, &a) in ids.iter().enumerate() {
                for &b in &ids[x + 1..] {
                    let j = jaccard(seq.members(a).unwrap(), seq.members(b).unwrap()).unwrap();
                    if j > 0.0 {
                        expected += 1;
                    }
                    prop_assert_eq!(m.get(a, b), j);
                    prop_assert_eq!(m.get(b, a), j);
                }
            }
            prop_assert_eq!(m.nnz(), expected);
            prop_assert!(m.entries().all(|(_, _, w)| w > 0.0 && w <= 1.0));
        }
    }
}
