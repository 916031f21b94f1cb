//! Per-phase node grouping: built-in Louvain or an imported partition file.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph_io::{GraphSequence, NodeId, PhaseGraph};

/// Minimum modularity improvement for a node move to count.
const MIN_GAIN: f64 = 1e-9;
const MAX_PASSES: usize = 1_000;

/// Assignment of every node of one phase to a dense group id `0..k`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    phase_index: usize,
    assignment: BTreeMap<NodeId, usize>,
    n_groups: usize,
}

impl Partition {
    /// Builds a partition, densifying group ids in order of first appearance.
    pub fn from_pairs<G: Eq + std::hash::Hash>(
        phase_index: usize,
        pairs: impl IntoIterator<Item = (NodeId, G)>,
    ) -> Result<Self> {
        let mut dense: HashMap<G, usize> = HashMap::new();
        let mut assignment = BTreeMap::new();
        for (node, group) in pairs {
            let next = dense.len();
            let id = *dense.entry(group).or_insert(next);
            if assignment.insert(node.clone(), id).is_some() {
                return Err(Error::DuplicateAssignment {
                    phase: phase_index.to_string(),
                    node: node.to_string(),
                });
            }
        }
        Ok(Partition {
            phase_index,
            n_groups: dense.len(),
            assignment,
        })
    }

    pub fn phase_index(&self) -> usize {
        self.phase_index
    }

    pub fn n_groups(&self) -> usize {
        self.n_groups
    }

    pub fn group_of(&self, node: &NodeId) -> Option<usize> {
        self.assignment.get(node).copied()
    }

    pub fn assignment(&self) -> &BTreeMap<NodeId, usize> {
        &self.assignment
    }

    /// Group of each node of `phase`, in node order.
    pub fn labels_for(&self, phase: &PhaseGraph) -> Result<Vec<usize>> {
        if self.assignment.len() != phase.node_count() {
            return Err(Error::PartitionMismatch {
                phase: phase.index(),
                reason: format!(
                    "{} assignments for {} nodes",
                    self.assignment.len(),
                    phase.node_count()
                ),
            });
        }
        phase
            .nodes()
            .iter()
            .map(|n| {
                self.group_of(n).ok_or_else(|| Error::PartitionMismatch {
                    phase: phase.index(),
                    reason: format!("node {n} is unassigned"),
                })
            })
            .collect()
    }
}

/// Index-based weighted graph used by the optimizer.
#[derive(Clone, Debug)]
struct WeightedGraph {
    adj: Vec<Vec<(usize, f64)>>,
    self_loops: Vec<f64>,
    /// Weighted degree; self-loops count twice.
    degree: Vec<f64>,
    total: f64,
}

impl WeightedGraph {
    fn from_phase(phase: &PhaseGraph) -> Self {
        let n = phase.node_count();
        let mut graph = WeightedGraph {
            adj: vec![Vec::new(); n],
            self_loops: vec![0.0; n],
            degree: vec![0.0; n],
            total: 0.0,
        };
        for e in phase.edges() {
            graph.total += e.weight;
            graph.degree[e.a] += e.weight;
            graph.degree[e.b] += e.weight;
            if e.a == e.b {
                graph.self_loops[e.a] += e.weight;
            } else {
                graph.adj[e.a].push((e.b, e.weight));
                graph.adj[e.b].push((e.a, e.weight));
            }
        }
        graph
    }

    fn len(&self) -> usize {
        self.adj.len()
    }

    fn modularity(&self, community: &[usize], resolution: f64) -> f64 {
        if self.total <= 0.0 {
            return 0.0;
        }
        let k = community.iter().max().map_or(0, |&c| c + 1);
        let mut internal = vec![0.0; k];
        let mut degree = vec![0.0; k];
        for i in 0..self.len() {
            let c = community[i];
            degree[c] += self.degree[i];
            internal[c] += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                if i < j && community[j] == c {
                    internal[c] += w;
                }
            }
        }
        let m = self.total;
        internal
            .iter()
            .zip(&degree)
            .map(|(l, d)| l / m - resolution * (d / (2.0 * m)).powi(2))
            .sum()
    }

    /// Moves single nodes to the neighboring community of largest gain until
    /// no move improves modularity by more than `MIN_GAIN`.
    fn local_moves(&self, community: &mut [usize], rng: &mut ChaCha8Rng) -> bool {
        let n = self.len();
        let m = self.total;
        let mut tot = vec![0.0; n];
        for i in 0..n {
            tot[community[i]] += self.degree[i];
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(rng);

        let mut link = vec![0.0; n];
        let mut seen = vec![false; n];
        let mut touched: Vec<usize> = Vec::new();
        let mut improved = false;
        for _ in 0..MAX_PASSES {
            let mut moved = false;
            for &i in &order {
                let own = community[i];
                let k = self.degree[i];
                for &(j, w) in &self.adj[i] {
                    let c = community[j];
                    if !seen[c] {
                        seen[c] = true;
                        touched.push(c);
                    }
                    link[c] += w;
                }
                tot[own] -= k;
                let gain = |c: usize, link_c: f64| link_c - k * tot[c] / (2.0 * m);
                let own_gain = gain(own, link[own]);
                touched.sort_unstable();
                // Largest gain wins; near-equal gains go to the smallest id.
                let tie = 1e-12 * m;
                let mut best = own;
                let mut best_gain = own_gain;
                for &c in &touched {
                    let g = gain(c, link[c]);
                    if g > best_gain + tie || (c < best && (g - best_gain).abs() <= tie) {
                        best = c;
                        best_gain = g;
                    }
                }
                let target = if best != own && (best_gain - own_gain) / m > MIN_GAIN {
                    best
                } else {
                    own
                };
                tot[target] += k;
                if target != own {
                    community[i] = target;
                    moved = true;
                    improved = true;
                }
                for &c in &touched {
                    link[c] = 0.0;
                    seen[c] = false;
                }
                touched.clear();
            }
            if !moved {
                break;
            }
        }
        improved
    }

    /// Collapses each community into one node.
    fn aggregate(&self, community: &[usize], k: usize) -> WeightedGraph {
        let mut self_loops = vec![0.0; k];
        let mut degree = vec![0.0; k];
        let mut between: Vec<BTreeMap<usize, f64>> = vec![BTreeMap::new(); k];
        for i in 0..self.len() {
            let ci = community[i];
            degree[ci] += self.degree[i];
            self_loops[ci] += self.self_loops[i];
            for &(j, w) in &self.adj[i] {
                if i >= j {
                    continue;
                }
                let cj = community[j];
                if ci == cj {
                    self_loops[ci] += w;
                } else {
                    *between[ci].entry(cj).or_insert(0.0) += w;
                    *between[cj].entry(ci).or_insert(0.0) += w;
                }
            }
        }
        WeightedGraph {
            adj: between.into_iter().map(|m| m.into_iter().collect()).collect(),
            self_loops,
            degree,
            total: self.total,
        }
    }
}

/// Renumbers community ids to `0..k` in order of first appearance.
fn densify(community: &mut [usize]) -> usize {
    let mut map: HashMap<usize, usize> = HashMap::new();
    for c in community.iter_mut() {
        let next = map.len();
        *c = *map.entry(*c).or_insert(next);
    }
    map.len()
}

/// Newman–Girvan modularity (resolution 1) of `partition` on `phase`.
/// Defined as 0 for a phase without edges.
pub fn modularity(phase: &PhaseGraph, partition: &Partition) -> Result<f64> {
    let labels = partition.labels_for(phase)?;
    Ok(WeightedGraph::from_phase(phase).modularity(&labels, 1.0))
}

/// Modularity of a labelling given in node order.
pub fn modularity_of_labels(phase: &PhaseGraph, labels: &[usize]) -> f64 {
    WeightedGraph::from_phase(phase).modularity(labels, 1.0)
}

/// Multi-level Louvain modularity optimization.
///
/// The seed drives the node visiting order. After the level passes the
/// partition is refined by single-node moves on the original graph, so the
/// result is locally maximal under single-node moves.
pub fn louvain(phase: &PhaseGraph, seed: u64) -> Partition {
    let labels = louvain_labels(phase, seed);
    Partition::from_pairs(
        phase.index(),
        phase.nodes().iter().cloned().zip(labels),
    )
    .expect("node ids are unique")
}

fn louvain_labels(phase: &PhaseGraph, seed: u64) -> Vec<usize> {
    let base = WeightedGraph::from_phase(phase);
    let n = base.len();
    let mut membership: Vec<usize> = (0..n).collect();
    if base.total <= 0.0 {
        return membership;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut graph = base.clone();
    loop {
        let mut community: Vec<usize> = (0..graph.len()).collect();
        if !graph.local_moves(&mut community, &mut rng) {
            break;
        }
        let k = densify(&mut community);
        for c in membership.iter_mut() {
            *c = community[*c];
        }
        if k == graph.len() {
            break;
        }
        graph = graph.aggregate(&community, k);
    }
    base.local_moves(&mut membership, &mut rng);
    densify(&mut membership);
    membership
}

/// Runs [`louvain`] on every phase in parallel; phase `t` uses seed `seed + t`.
pub fn louvain_sequence(seq: &GraphSequence, seed: u64) -> Vec<Partition> {
    seq.phases()
        .par_iter()
        .map(|phase| louvain(phase, seed.wrapping_add(phase.index() as u64)))
        .collect()
}

/// Reads a `phase,node,group` CSV. Every node of every phase must be assigned
/// exactly once; group tokens are densified per phase in order of first
/// appearance.
pub fn import_partition<R: Read>(input: R, seq: &GraphSequence) -> Result<Vec<Partition>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::MalformedRow {
                row: 1,
                reason: format!("missing `{name}` column in header"),
            })
    };
    let (pc, nc, gc) = (col("phase")?, col("node")?, col("group")?);

    let mut per_phase: Vec<Vec<(NodeId, String)>> = vec![Vec::new(); seq.len()];
    for (i, record) in reader.records().enumerate() {
        let line = i + 2;
        let record = record.map_err(|e| Error::MalformedRow {
            row: line,
            reason: e.to_string(),
        })?;
        let get = |c: usize, name: &str| match record.get(c) {
            Some(v) if !v.is_empty() => Ok(v.to_string()),
            _ => Err(Error::MalformedRow {
                row: line,
                reason: format!("missing {name}"),
            }),
        };
        let phase_label = get(pc, "phase")?;
        let node = NodeId::new(get(nc, "node")?)?;
        let group = get(gc, "group")?;
        let p = seq
            .phase_by_label(&phase_label)
            .ok_or_else(|| Error::UnknownPhase(phase_label.clone()))?;
        if !seq.phases()[p].contains(&node) {
            return Err(Error::UnknownNode {
                phase: phase_label,
                node: node.to_string(),
            });
        }
        per_phase[p].push((node, group));
    }

    per_phase
        .into_iter()
        .zip(seq.phases())
        .map(|(rows, phase)| {
            let part = Partition::from_pairs(phase.index(), rows).map_err(|e| match e {
                Error::DuplicateAssignment { node, .. } => Error::DuplicateAssignment {
                    phase: phase.label().to_string(),
                    node,
                },
                other => other,
            })?;
            if let Some(missing) = phase.nodes().iter().find(|n| part.group_of(n).is_none()) {
                return Err(Error::MissingAssignment {
                    phase: phase.label().to_string(),
                    node: missing.to_string(),
                });
            }
            Ok(part)
        })
        .collect()
}

/// Writes partitions as `phase,node,group`, optionally naming groups.
/// Rows are grouped by group id so that reimporting preserves the ids.
pub fn write_partitions<W: Write>(
    seq: &GraphSequence,
    partitions: &[Partition],
    group_names: Option<&[Vec<String>]>,
    out: W,
) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["phase", "node", "group"])?;
    for part in partitions {
        let label = seq
            .phase(part.phase_index())
            .ok_or_else(|| Error::UnknownPhase(part.phase_index().to_string()))?
            .label();
        let mut rows: Vec<(usize, &NodeId)> =
            part.assignment().iter().map(|(n, &g)| (g, n)).collect();
        rows.sort();
        for (g, node) in rows {
            let name = match group_names {
                Some(names) => names[part.phase_index()][g].clone(),
                None => g.to_string(),
            };
            writer.write_record([label, node.as_str(), &name])?;
        }
    }
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_io::{parse_sequence, EdgeFormat};

    fn ids(n: usize) -> Vec<NodeId> {
        (0..n).map(|i| NodeId::new(format!("n{i}")).unwrap()).collect()
    }

    fn phase(n: usize, edges: &[(usize, usize)]) -> PhaseGraph {
        let nodes = ids(n);
        let triples = edges
            .iter()
            .map(|&(a, b)| (nodes[a].clone(), nodes[b].clone(), 1.0))
            .collect::<Vec<_>>();
        PhaseGraph::new(0, "0", nodes.clone(), triples).unwrap()
    }

    /// All set partitions of `0..n` as restricted growth strings.
    fn set_partitions(n: usize) -> Vec<Vec<usize>> {
        fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
            if i == n {
                out.push(cur.clone());
                return;
            }
            for c in 0..=max + 1 {
                cur.push(c);
                rec(i + 1, n, cur, max.max(c), out);
                cur.pop();
            }
        }
        let mut out = Vec::new();
        if n > 0 {
            let mut cur = vec![0];
            rec(1, n, &mut cur, 0, &mut out);
        }
        out
    }

    /// Brute-force modularity straight from the definition
    /// `1/2m * sum_ij [A_ij - k_i k_j / 2m] delta(c_i, c_j)`.
    fn modularity_oracle(n: usize, edges: &[(usize, usize)], labels: &[usize]) -> f64 {
        let mut a = vec![vec![0.0; n]; n];
        for &(i, j) in edges {
            a[i][j] += 1.0;
            a[j][i] += 1.0;
        }
        let k: Vec<f64> = a.iter().map(|r| r.iter().sum()).collect();
        let two_m: f64 = k.iter().sum();
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                if labels[i] == labels[j] {
                    q += a[i][j] - k[i] * k[j] / two_m;
                }
            }
        }
        q / two_m
    }

    fn exhaustive_best(n: usize, edges: &[(usize, usize)]) -> (f64, Vec<usize>) {
        set_partitions(n)
            .into_iter()
            .map(|p| (modularity_oracle(n, edges, &p), p))
            .max_by(|a, b| a.0.total_cmp(&b.0))
            .unwrap()
    }

    #[test]
    fn set_partition_counts_are_bell_numbers() {
        let bell = [1, 2, 5, 15, 52, 203, 877, 4140];
        for (n, b) in (1..=8).zip(bell) {
            assert_eq!(set_partitions(n).len(), b);
        }
    }

    #[test]
    fn two_triangles_with_bridge() {
        let edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)];
        let (best, labels) = exhaustive_best(6, &edges);
        assert_eq!(labels, vec![0, 0, 0, 1, 1, 1]);
        let g = phase(6, &edges);
        for seed in 0..10 {
            let part = louvain(&g, seed);
            let got = part.labels_for(&g).unwrap();
            assert_eq!(got, vec![0, 0, 0, 1, 1, 1], "seed {seed}");
            assert!((modularity(&g, &part).unwrap() - best).abs() < 1e-12);
        }
    }

    #[test]
    fn edgeless_phase_gives_singletons() {
        let nodes = ids(4);
        let g = PhaseGraph::new(0, "0", nodes, Vec::new()).unwrap();
        let part = louvain(&g, 3);
        assert_eq!(part.n_groups(), 4);
    }

    #[test]
    fn five_clique_is_one_group() {
        let mut edges = Vec::new();
        for i in 0..5 {
            for j in i + 1..5 {
                edges.push((i, j));
            }
        }
        let (_, labels) = exhaustive_best(5, &edges);
        assert!(labels.iter().all(|&c| c == 0));
        let g = phase(5, &edges);
        assert_eq!(louvain(&g, 11).n_groups(), 1);
    }

    #[test]
    fn modularity_matches_oracle() {
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2), (4, 5)];
        let g = phase(6, &edges);
        for labels in set_partitions(6).into_iter().step_by(17) {
            let q = modularity_of_labels(&g, &labels);
            assert!((q - modularity_oracle(6, &edges, &labels)).abs() < 1e-12);
        }
    }

    #[test]
    fn self_loops_follow_adjacency_convention() {
        // A self-loop contributes 2w to A_ii and to the degree.
        let nodes = ids(3);
        let g = PhaseGraph::new(
            0,
            "0",
            nodes.clone(),
            vec![
                (nodes[0].clone(), nodes[0].clone(), 1.0),
                (nodes[0].clone(), nodes[1].clone(), 1.0),
                (nodes[1].clone(), nodes[2].clone(), 1.0),
            ],
        )
        .unwrap();
        let labels = [0, 0, 1];
        // A = [[2,1,0],[1,0,1],[0,1,0]], k = [3,2,1], 2m = 6
        let mut q = 0.0;
        let a = [[2.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let k = [3.0, 2.0, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                if labels[i] == labels[j] {
                    q += a[i][j] - k[i] * k[j] / 6.0;
                }
            }
        }
        assert!((modularity_of_labels(&g, &labels) - q / 6.0).abs() < 1e-12);
    }

    #[test]
    fn louvain_is_seed_deterministic() {
        let edges: Vec<(usize, usize)> = (0..30).map(|i| (i, (i * 7 + 3) % 30)).collect();
        let g = phase(30, &edges);
        assert_eq!(louvain(&g, 5), louvain(&g, 5));
    }

    #[test]
    fn louvain_is_locally_maximal() {
        let edges: Vec<(usize, usize)> = (0..40)
            .flat_map(|i| [(i, (i + 1) % 40), (i, (i * 13 + 5) % 40)])
            .filter(|(a, b)| a != b)
            .collect();
        let g = phase(40, &edges);
        let labels = louvain(&g, 1).labels_for(&g).unwrap();
        let q = modularity_of_labels(&g, &labels);
        let k = labels.iter().max().unwrap() + 2;
        for i in 0..40 {
            for c in 0..k {
                let mut moved = labels.clone();
                moved[i] = c;
                assert!(modularity_of_labels(&g, &moved) <= q + 1e-9);
            }
        }
    }

    fn two_phase_seq() -> GraphSequence {
        parse_sequence(
            "phase,src,dst\n0,a,b\n0,c,d\n1,a,b\n".as_bytes(),
            EdgeFormat::Csv,
        )
        .unwrap()
    }

    #[test]
    fn import_complete_file() {
        let seq = two_phase_seq();
        let parts = import_partition(
            "phase,node,group\n0,a,17\n0,b,3\n0,c,17\n0,d,3\n1,a,x\n1,b,x\n".as_bytes(),
            &seq,
        )
        .unwrap();
        assert_eq!(parts.len(), 2);
        let a = NodeId::new("a").unwrap();
        let b = NodeId::new("b").unwrap();
        assert_eq!(parts[0].group_of(&a), Some(0));
        assert_eq!(parts[0].group_of(&b), Some(1));
        assert_eq!(parts[1].n_groups(), 1);
    }

    #[test]
    fn import_errors() {
        let seq = two_phase_seq();
        let err = import_partition(
            "phase,node,group\n0,b,1\n0,c,1\n0,d,1\n1,a,1\n1,b,1\n".as_bytes(),
            &seq,
        )
        .unwrap_err();
        match err {
            Error::MissingAssignment { phase, node } => assert_eq!((phase.as_str(), node.as_str()), ("0", "a")),
            other => panic!("unexpected {other}"),
        }
        let err = import_partition("phase,node,group\n1,zz,1\n".as_bytes(), &seq).unwrap_err();
        assert!(matches!(err, Error::UnknownNode { .. }));
        let err = import_partition(
            "phase,node,group\n0,a,1\n0,a,2\n".as_bytes(),
            &seq,
        )
        .unwrap_err();
        assert!(matches!(err, Error::DuplicateAssignment { .. }), "{err}");
    }

    #[test]
    fn export_then_import_is_identity() {
        let seq = two_phase_seq();
        let parts = louvain_sequence(&seq, 9);
        let mut buf = Vec::new();
        write_partitions(&seq, &parts, None, &mut buf).unwrap();
        assert_eq!(import_partition(buf.as_slice(), &seq).unwrap(), parts);
    }
}
