//! Input graph sequences, per-node metadata, and their file formats.
//!
//! Edge files carry one `(phase, src, dst[, weight])` row per edge, either as
//! CSV with a `phase,src,dst,weight` header or as JSON lines. Graphs are
//! undirected: endpoints are canonicalized and duplicate rows sum their
//! weights. A zero-weight row only registers its endpoints as nodes, which is
//! how isolated nodes are written back out (`phase,v,v,0`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Opaque node identifier, stable across phases.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeId(String);

impl NodeId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::InvalidSequence("empty node id".into()));
        }
        Ok(NodeId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// An undirected edge between two node positions of a [`PhaseGraph`], `a <= b`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Edge {
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

/// One phase of the sequence: a weighted undirected graph.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseGraph {
    index: usize,
    label: String,
    /// Sorted, unique.
    nodes: Vec<NodeId>,
    /// Sorted by `(a, b)`, unique, strictly positive weights.
    edges: Vec<Edge>,
}

impl PhaseGraph {
    /// Builds a phase from node ids and `(src, dst, weight)` triples.
    ///
    /// Every edge endpoint must be listed in `nodes`. Parallel edges are merged
    /// by summing weights and edges whose merged weight is zero are dropped.
    pub fn new(
        index: usize,
        label: impl Into<String>,
        nodes: impl IntoIterator<Item = NodeId>,
        edges: impl IntoIterator<Item = (NodeId, NodeId, f64)>,
    ) -> Result<Self> {
        let nodes: Vec<NodeId> = nodes
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let position = |id: &NodeId| {
            nodes.binary_search(id).map_err(|_| {
                Error::InvalidSequence(format!("edge endpoint {id} is not a node of phase {index}"))
            })
        };
        let mut indexed = Vec::new();
        for (src, dst, weight) in edges {
            indexed.push((position(&src)?, position(&dst)?, weight));
        }
        Self::from_indexed(index, label.into(), nodes, indexed)
    }

    /// `nodes` must already be sorted and unique.
    pub(crate) fn from_indexed(
        index: usize,
        label: String,
        nodes: Vec<NodeId>,
        edges: Vec<(usize, usize, f64)>,
    ) -> Result<Self> {
        debug_assert!(nodes.windows(2).all(|w| w[0] < w[1]));
        let mut merged: BTreeMap<(usize, usize), f64> = BTreeMap::new();
        for (a, b, weight) in edges {
            if !(weight >= 0.0) || !weight.is_finite() {
                return Err(Error::InvalidSequence(format!(
                    "phase {index}: invalid edge weight {weight}"
                )));
            }
            if a >= nodes.len() || b >= nodes.len() {
                return Err(Error::InvalidSequence(format!(
                    "phase {index}: edge endpoint out of range"
                )));
            }
            *merged.entry((a.min(b), a.max(b))).or_insert(0.0) += weight;
        }
        let edges = merged
            .into_iter()
            .filter(|&(_, w)| w > 0.0)
            .map(|((a, b), weight)| Edge { a, b, weight })
            .collect();
        Ok(PhaseGraph {
            index,
            label,
            nodes,
            edges,
        })
    }

    pub fn index(&self) -> usize {
        self.index
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn nodes(&self) -> &[NodeId] {
        &self.nodes
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn position(&self, id: &NodeId) -> Option<usize> {
        self.nodes.binary_search(id).ok()
    }

    pub fn contains(&self, id: &NodeId) -> bool {
        self.position(id).is_some()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges.iter().map(|e| e.weight).sum()
    }

    /// Edges as node-id triples.
    pub fn edge_triples(&self) -> impl Iterator<Item = (&NodeId, &NodeId, f64)> + '_ {
        self.edges
            .iter()
            .map(|e| (&self.nodes[e.a], &self.nodes[e.b], e.weight))
    }

    fn reindexed(mut self, index: usize) -> Self {
        self.index = index;
        self
    }
}

/// Ordered phases over a shared node-identifier universe.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphSequence {
    phases: Vec<PhaseGraph>,
}

impl GraphSequence {
    pub fn new(phases: Vec<PhaseGraph>) -> Result<Self> {
        if phases.len() < 2 {
            return Err(Error::TooFewPhases(phases.len()));
        }
        for (i, phase) in phases.iter().enumerate() {
            if phase.index != i {
                return Err(Error::InvalidSequence(format!(
                    "phase at position {i} has index {}",
                    phase.index
                )));
            }
        }
        Ok(GraphSequence { phases })
    }

    pub fn phases(&self) -> &[PhaseGraph] {
        &self.phases
    }

    pub fn len(&self) -> usize {
        self.phases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phases.is_empty()
    }

    pub fn phase(&self, index: usize) -> Option<&PhaseGraph> {
        self.phases.get(index)
    }

    pub fn labels(&self) -> Vec<String> {
        self.phases.iter().map(|p| p.label.clone()).collect()
    }

    pub fn phase_by_label(&self, label: &str) -> Option<usize> {
        self.phases.iter().position(|p| p.label == label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeFormat {
    Csv,
    Jsonl,
}

impl EdgeFormat {
    /// Guesses the format from a file extension, defaulting to CSV.
    pub fn from_path(path: &std::path::Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("ndjson") => EdgeFormat::Jsonl,
            _ => EdgeFormat::Csv,
        }
    }
}

struct EdgeRow {
    line: usize,
    phase: String,
    src: String,
    dst: String,
    weight: f64,
}

/// Parses an edge stream into a validated sequence.
///
/// Phases are sorted numerically when every label parses as a number and
/// lexicographically otherwise, then reindexed from 0.
pub fn parse_sequence<R: Read>(input: R, format: EdgeFormat) -> Result<GraphSequence> {
    let rows = match format {
        EdgeFormat::Csv => read_csv_rows(input)?,
        EdgeFormat::Jsonl => read_jsonl_rows(input)?,
    };

    let mut by_phase: HashMap<String, (BTreeSet<NodeId>, Vec<(NodeId, NodeId, f64)>)> =
        HashMap::new();
    for row in rows {
        if row.weight < 0.0 {
            return Err(Error::NegativeWeight {
                row: row.line,
                weight: row.weight,
            });
        }
        let src = NodeId::new(row.src).map_err(|_| malformed(row.line, "empty src"))?;
        let dst = NodeId::new(row.dst).map_err(|_| malformed(row.line, "empty dst"))?;
        let (nodes, edges) = by_phase.entry(row.phase).or_default();
        nodes.insert(src.clone());
        nodes.insert(dst.clone());
        edges.push((src, dst, row.weight));
    }
    if by_phase.len() < 2 {
        return Err(Error::TooFewPhases(by_phase.len()));
    }

    let mut labels: Vec<String> = by_phase.keys().cloned().collect();
    sort_phase_labels(&mut labels);
    let phases = labels
        .into_iter()
        .enumerate()
        .map(|(index, label)| {
            let (nodes, edges) = by_phase.remove(&label).expect("label collected from map");
            PhaseGraph::new(index, label, nodes, edges)
        })
        .collect::<Result<Vec<_>>>()?;
    GraphSequence::new(phases)
}

fn sort_phase_labels(labels: &mut [String]) {
    let numeric: Option<Vec<f64>> = labels.iter().map(|l| l.parse::<f64>().ok()).collect();
    if numeric.is_some_and(|v| v.iter().all(|x| x.is_finite())) {
        labels.sort_by(|a, b| {
            let (x, y) = (a.parse::<f64>().unwrap(), b.parse::<f64>().unwrap());
            x.total_cmp(&y).then_with(|| a.cmp(b))
        });
    } else {
        labels.sort();
    }
}

fn malformed(row: usize, reason: impl Into<String>) -> Error {
    Error::MalformedRow {
        row,
        reason: reason.into(),
    }
}

fn csv_reader<R: Read>(input: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input)
}

/// Locates the named columns in a CSV header; `optional` columns may be absent.
fn header_columns(
    headers: &csv::StringRecord,
    required: &[&str],
    optional: &[&str],
) -> Result<Vec<Option<usize>>> {
    let find = |name: &str| headers.iter().position(|h| h.eq_ignore_ascii_case(name));
    let mut cols = Vec::new();
    for name in required {
        match find(name) {
            Some(i) => cols.push(Some(i)),
            None => return Err(malformed(1, format!("missing `{name}` column in header"))),
        }
    }
    cols.extend(optional.iter().map(|name| find(name)));
    Ok(cols)
}

fn record_line(record: &csv::StringRecord, fallback: usize) -> usize {
    record
        .position()
        .map(|p| p.line() as usize)
        .unwrap_or(fallback)
}

fn field<'r>(record: &'r csv::StringRecord, col: usize, line: usize, name: &str) -> Result<&'r str> {
    match record.get(col) {
        Some(v) if !v.is_empty() => Ok(v),
        _ => Err(malformed(line, format!("missing {name}"))),
    }
}

fn parse_weight(raw: Option<&str>, line: usize) -> Result<f64> {
    match raw {
        None | Some("") => Ok(1.0),
        Some(text) => match text.parse::<f64>() {
            Ok(w) if w.is_finite() => Ok(w),
            _ => Err(malformed(line, format!("invalid weight `{text}`"))),
        },
    }
}

fn read_csv_rows<R: Read>(input: R) -> Result<Vec<EdgeRow>> {
    let mut reader = csv_reader(input);
    let cols = header_columns(reader.headers()?, &["phase", "src", "dst"], &["weight"])?;
    let (pc, sc, dc) = (cols[0].unwrap(), cols[1].unwrap(), cols[2].unwrap());
    let wc = cols[3];
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(i + 2, e.to_string()))?;
        let line = record_line(&record, i + 2);
        rows.push(EdgeRow {
            line,
            phase: field(&record, pc, line, "phase")?.to_string(),
            src: field(&record, sc, line, "src")?.to_string(),
            dst: field(&record, dc, line, "dst")?.to_string(),
            weight: parse_weight(wc.and_then(|c| record.get(c)), line)?,
        });
    }
    Ok(rows)
}

fn json_token(value: Option<&serde_json::Value>) -> Option<String> {
    match value? {
        serde_json::Value::String(s) if !s.is_empty() => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn read_jsonl_rows<R: Read>(input: R) -> Result<Vec<EdgeRow>> {
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(input).lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value =
            serde_json::from_str(&line).map_err(|e| malformed(line_no, e.to_string()))?;
        let obj = value
            .as_object()
            .ok_or_else(|| malformed(line_no, "expected a JSON object"))?;
        let get = |key: &str| {
            json_token(obj.get(key)).ok_or_else(|| malformed(line_no, format!("missing {key}")))
        };
        let weight = match obj.get("weight") {
            None | Some(serde_json::Value::Null) => 1.0,
            Some(v) => v
                .as_f64()
                .filter(|w| w.is_finite())
                .ok_or_else(|| malformed(line_no, format!("invalid weight `{v}`")))?,
        };
        rows.push(EdgeRow {
            line: line_no,
            phase: get("phase")?,
            src: get("src")?,
            dst: get("dst")?,
            weight,
        });
    }
    Ok(rows)
}

/// Writes the sequence in the edge CSV format; isolated nodes become
/// zero-weight self-loops so that parsing the output restores the sequence.
pub fn write_sequence_csv<W: Write>(seq: &GraphSequence, out: W) -> Result<()> {
    let mut writer = csv::Writer::from_writer(out);
    writer.write_record(["phase", "src", "dst", "weight"])?;
    for phase in seq.phases() {
        let mut touched = vec![false; phase.node_count()];
        for e in phase.edges() {
            touched[e.a] = true;
            touched[e.b] = true;
            writer.write_record([
                phase.label(),
                phase.nodes[e.a].as_str(),
                phase.nodes[e.b].as_str(),
                &e.weight.to_string(),
            ])?;
        }
        for (node, _) in phase.nodes.iter().zip(&touched).filter(|(_, t)| !**t) {
            writer.write_record([phase.label(), node.as_str(), node.as_str(), "0"])?;
        }
    }
    writer.flush()?;
    Ok(())
}

/// Per-(phase, node) label sets.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetadataTable {
    entries: BTreeMap<(usize, NodeId), BTreeSet<String>>,
}

impl MetadataTable {
    pub fn labels(&self, phase: usize, node: &NodeId) -> Option<&BTreeSet<String>> {
        self.entries.get(&(phase, node.clone()))
    }

    pub fn insert(&mut self, phase: usize, node: NodeId, label: impl Into<String>) {
        self.entries
            .entry((phase, node))
            .or_default()
            .insert(label.into());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&(usize, NodeId), &BTreeSet<String>)> {
        self.entries.iter()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetadataLoad {
    pub table: MetadataTable,
    /// Rows referring to a phase or node absent from the sequence.
    pub skipped: usize,
}

/// Parses a `phase,node,label` CSV against `seq`. Rows naming an unknown
/// phase or node are skipped and counted, not rejected.
pub fn parse_metadata<R: Read>(input: R, seq: &GraphSequence) -> Result<MetadataLoad> {
    let mut reader = csv_reader(input);
    let cols = header_columns(reader.headers()?, &["phase", "node", "label"], &[])?;
    let (pc, nc, lc) = (cols[0].unwrap(), cols[1].unwrap(), cols[2].unwrap());
    let mut load = MetadataLoad::default();
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| malformed(i + 2, e.to_string()))?;
        let line = record_line(&record, i + 2);
        let phase = field(&record, pc, line, "phase")?;
        let node = NodeId::new(field(&record, nc, line, "node")?)?;
        let label = field(&record, lc, line, "label")?;
        match seq.phase_by_label(phase) {
            Some(p) if seq.phases[p].contains(&node) => load.table.insert(p, node, label),
            _ => {
                log::warn!("metadata line {line}: unknown (phase {phase}, node {node}), skipped");
                load.skipped += 1;
            }
        }
    }
    Ok(load)
}

impl GraphSequence {
    /// Rebuilds a sequence keeping only the given phases, reindexed in order.
    pub fn select(&self, phases: &[usize]) -> Result<GraphSequence> {
        let picked = phases
            .iter()
            .enumerate()
            .map(|(i, &p)| {
                self.phases
                    .get(p)
                    .cloned()
                    .map(|g| g.reindexed(i))
                    .ok_or_else(|| Error::UnknownPhase(p.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        GraphSequence::new(picked)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn parse_csv(text: &str) -> Result<GraphSequence> {
        parse_sequence(text.as_bytes(), EdgeFormat::Csv)
    }

    #[test]
    fn three_rows_two_phases() {
        let seq = parse_csv("phase,src,dst\n0,a,b\n0,b,c\n1,a,b\n").unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.phases()[0].node_count(), 3);
        assert_eq!(seq.phases()[0].edges().len(), 2);
        assert_eq!(seq.phases()[1].node_count(), 2);
    }

    #[test]
    fn duplicate_rows_sum_weights() {
        let seq = parse_csv("phase,src,dst,weight\n0,a,b,\n0,b,a,1\n1,x,y,1\n").unwrap();
        let edges = seq.phases()[0].edges();
        assert_eq!(edges.len(), 1);
        assert_eq!(edges[0].weight, 2.0);
    }

    #[test]
    fn single_phase_is_rejected() {
        let err = parse_csv("phase,src,dst\n0,a,b\n").unwrap_err();
        assert!(matches!(err, Error::TooFewPhases(1)));
        assert!(err.to_string().contains("fewer than 2 phases"));
    }

    #[test]
    fn negative_weight_reports_row() {
        let err = parse_csv("phase,src,dst,weight\n0,a,b,1\n1,a,b,-2\n").unwrap_err();
        assert!(matches!(err, Error::NegativeWeight { row: 3, .. }), "{err}");
    }

    #[test]
    fn malformed_row_reports_row_number() {
        let err = parse_csv("phase,src,dst,weight\n0,a,b,1\n1,a\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 3, .. }), "{err}");
        let err = parse_csv("phase,src,dst,weight\n0,a,b,x\n1,a,b\n").unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 2, .. }), "{err}");
    }

    #[test]
    fn phases_sorted_numerically_and_reindexed() {
        let seq = parse_csv("phase,src,dst\n2010,a,b\n9,a,b\n100,a,c\n").unwrap();
        assert_eq!(seq.labels(), vec!["9", "100", "2010"]);
        assert!(seq.phases().iter().enumerate().all(|(i, p)| p.index() == i));
        let seq = parse_csv("phase,src,dst\nb,a,b\na,a,b\n").unwrap();
        assert_eq!(seq.labels(), vec!["a", "b"]);
    }

    #[test]
    fn jsonl_input() {
        let text = r#"{"phase": 0, "src": "a", "dst": "b", "weight": 2.5}
{"phase": 0, "src": "b", "dst": "c"}

{"phase": 1, "src": "a", "dst": "b", "weight": null}
"#;
        let seq = parse_sequence(text.as_bytes(), EdgeFormat::Jsonl).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.phases()[0].total_weight(), 3.5);
        let err = parse_sequence(
            "{\"phase\":0,\"src\":\"a\"}\n".as_bytes(),
            EdgeFormat::Jsonl,
        )
        .unwrap_err();
        assert!(matches!(err, Error::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn zero_weight_row_registers_isolated_node() {
        let seq = parse_csv("phase,src,dst,weight\n0,a,b,1\n0,z,z,0\n1,a,b,1\n").unwrap();
        assert_eq!(seq.phases()[0].node_count(), 3);
        assert_eq!(seq.phases()[0].edges().len(), 1);
    }

    #[test]
    fn metadata_union_and_skip() {
        let seq = parse_csv("phase,src,dst\n0,a,b\n1,a,c\n").unwrap();
        let meta = "phase,node,label\n0,a,UK\n0,a,US\n1,c,UK\n1,b,UK\n7,a,UK\n";
        let load = parse_metadata(meta.as_bytes(), &seq).unwrap();
        let a = NodeId::new("a").unwrap();
        let labels: Vec<_> = load.table.labels(0, &a).unwrap().iter().cloned().collect();
        assert_eq!(labels, vec!["UK", "US"]);
        assert_eq!(load.table.len(), 2);
        assert_eq!(load.skipped, 2);
    }

    #[test]
    fn metadata_single_entry() {
        let seq = parse_csv("phase,src,dst\n0,a,b\n1,a,c\n").unwrap();
        let load = parse_metadata("phase,node,label\n0,a,UK\n".as_bytes(), &seq).unwrap();
        assert_eq!(load.table.len(), 1);
        assert_eq!(load.skipped, 0);
    }

    fn arb_sequence() -> impl Strategy<Value = GraphSequence> {
        let phase = (
            1usize..8,
            prop::collection::vec((0usize..8, 0usize..8, 0u32..5), 0..20),
        );
        prop::collection::vec(phase, 2..5).prop_map(|phases| {
            let built = phases
                .into_iter()
                .enumerate()
                .map(|(i, (n, edges))| {
                    let nodes: Vec<NodeId> =
                        (0..n).map(|k| NodeId::new(format!("v{k}")).unwrap()).collect();
                    let edges = edges
                        .into_iter()
                        .map(|(a, b, w)| (nodes[a % n].clone(), nodes[b % n].clone(), w as f64 * 0.5))
                        .collect::<Vec<_>>();
                    PhaseGraph::new(i, i.to_string(), nodes.clone(), edges).unwrap()
                })
                .collect();
            GraphSequence::new(built).unwrap()
        })
    }

    proptest! {
        #[test]
        fn csv_round_trip(seq in arb_sequence()) {
            let mut buf = Vec::new();
            write_sequence_csv(&seq, &mut buf).unwrap();
            let back = parse_sequence(buf.as_slice(), EdgeFormat::Csv).unwrap();
            prop_assert_eq!(back, seq);
        }

        #[test]
        fn phase_weight_equals_row_sum(
            rows in prop::collection::vec((0usize..3, 0usize..5, 0usize..5, 0u32..10), 1..40)
        ) {
            let mut text = String::from("phase,src,dst,weight\n0,x,y,0\n1,x,y,0\n");
            let mut expected = [0.0f64; 3];
            for (p, a, b, w) in &rows {
                text.push_str(&format!("{p},n{a},n{b},{w}\n"));
                expected[*p] += *w as f64;
            }
            let seq = parse_csv(&text).unwrap();
            for phase in seq.phases() {
                let p: usize = phase.label().parse().unwrap();
                prop_assert!((phase.total_weight() - expected[p]).abs() < 1e-9);
            }
        }
    }
}
