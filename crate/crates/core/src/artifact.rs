//! End-to-end pipeline and the JSON artifact read by the viewer.
//!
//! The artifact is a single self-contained document:
//!
//! ```json
//! {
//!   "schema_version": 1,
//!   "meta": { "n_phases": 11, "phase_labels": ["0", ...], "seed": 7, "config": { ... } },
//!   "groups": [{ "phase": 0, "local_id": 0, "x": 0.1, "y": -2.3, "alluvial": 1.7,
//!                "size": 900, "dominant_label": "∅", "lineage_id": 0 }],
//!   "intra_edges": [{ "phase": 0, "a": 0, "b": 1, "weight": 40012.0 }],
//!   "inter_links": [{ "parent": { "phase": 0, "local_id": 0 },
//!                     "child": { "phase": 1, "local_id": 0 }, "weight": 0.81, "kept": true }]
//! }
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::embedding::{
    random_walks, skipgram_train_with_report, GroupEmbedding, SkipGramConfig, TrainingReport, WalkConfig,
    WalkCorpus,
};
use crate::error::{Error, Result};
use crate::graph_io::{GraphSequence, MetadataTable};
use crate::grouping::{louvain_sequence, Partition};
use crate::lineage::{adjacent_links, hhi_flags, lineages, InterTemporalLink, LineageGraph};
use crate::metagraph::{GroupId, MetaGraphSequence};
use crate::projection::{pacmap_project, GroupLayout, PacmapConfig, Projection};
use crate::similarity::{build_similarity, SimilarityMatrix};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupingMode {
    #[default]
    Louvain,
    Import,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub grouping: GroupingMode,
    pub seed: u64,
    /// Forces single-threaded embedding training even when
    /// `skipgram.parallel` is set, so output bytes depend only on inputs,
    /// seed and config.
    pub deterministic: bool,
    pub walks: WalkConfig,
    pub skipgram: SkipGramConfig,
    pub pacmap: PacmapConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            grouping: GroupingMode::Louvain,
            seed: 0,
            deterministic: false,
            walks: WalkConfig::default(),
            skipgram: SkipGramConfig::default(),
            pacmap: PacmapConfig::default(),
        }
    }
}

// Distinct sub-seeds keep the stages' random streams independent.
const WALK_STREAM: u64 = 0x5741_4c4b;
const TRAIN_STREAM: u64 = 0x5347_4e53;
const PROJECT_STREAM: u64 = 0x5041_434d;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub n_phases: usize,
    pub phase_labels: Vec<String>,
    pub seed: u64,
    pub config: PipelineConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactGroup {
    pub phase: usize,
    pub local_id: usize,
    pub x: f64,
    pub y: f64,
    pub alluvial: f64,
    pub size: usize,
    pub dominant_label: String,
    pub lineage_id: usize,
}

impl ArtifactGroup {
    pub fn id(&self) -> GroupId {
        GroupId::new(self.phase, self.local_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IntraEdge {
    pub phase: usize,
    pub a: usize,
    pub b: usize,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArtifactLink {
    pub parent: GroupId,
    pub child: GroupId,
    pub weight: f64,
    pub kept: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub schema_version: u32,
    pub meta: ArtifactMeta,
    pub groups: Vec<ArtifactGroup>,
    pub intra_edges: Vec<IntraEdge>,
    pub inter_links: Vec<ArtifactLink>,
}

impl Artifact {
    pub fn to_json_bytes(&self) -> Result<Vec<u8>> {
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        Ok(bytes)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let bytes = self.to_json_bytes()?;
        write_atomic(path, |w| Ok(w.write_all(&bytes)?))
    }

    pub fn group(&self, gid: GroupId) -> Option<&ArtifactGroup> {
        self.groups
            .binary_search_by_key(&gid, ArtifactGroup::id)
            .ok()
            .map(|i| &self.groups[i])
    }
}

/// Writes through a temporary file in the destination directory and renames
/// it into place, so a failed write never leaves a partial file at `path`.
pub fn write_atomic(path: &Path, fill: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let file_err = |source| Error::File {
        path: path.to_path_buf(),
        source,
    };
    let mut builder = tempfile::Builder::new();
    #[cfg(unix)]
    builder.permissions(std::os::unix::fs::PermissionsExt::from_mode(0o644));
    let mut tmp = builder.tempfile_in(dir).map_err(file_err)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf)?;
        buf.flush().map_err(file_err)?;
    }
    tmp.persist(path).map_err(|e| file_err(e.error))?;
    Ok(())
}

/// Every intermediate product of a pipeline run.
#[derive(Clone, Debug)]
pub struct PipelineOutput {
    pub partitions: Vec<Partition>,
    pub metas: MetaGraphSequence,
    pub similarity: SimilarityMatrix,
    pub corpus: WalkCorpus,
    pub embedding: GroupEmbedding,
    pub training: TrainingReport,
    pub projection: Projection,
    pub layout: GroupLayout,
    pub links: Vec<InterTemporalLink>,
    pub kept: Vec<bool>,
    pub lineage: LineageGraph,
    pub artifact: Artifact,
}

/// Runs grouping, meta-graphs, similarity, embedding, projection and lineage
/// extraction on an in-memory sequence.
///
/// `partitions` is required in [`GroupingMode::Import`] and ignored otherwise.
/// Errors are wrapped in [`Error::Stage`] naming the failing stage.
pub fn run_pipeline(
    seq: &GraphSequence,
    partitions: Option<&[Partition]>,
    metadata: Option<&MetadataTable>,
    cfg: &PipelineConfig,
) -> Result<PipelineOutput> {
    let partitions = match (cfg.grouping, partitions) {
        (GroupingMode::Import, Some(p)) => p.to_vec(),
        (GroupingMode::Import, None) => {
            return Err(Error::Config("import grouping needs a partition file".into()).in_stage("group"))
        }
        (GroupingMode::Louvain, _) => louvain_sequence(seq, cfg.seed),
    };
    log::info!(
        "grouped {} phases into {} groups",
        seq.len(),
        partitions.iter().map(Partition::n_groups).sum::<usize>()
    );

    let mut metas = MetaGraphSequence::build(seq, &partitions).map_err(|e| e.in_stage("metagraph"))?;
    if let Some(table) = metadata {
        metas = metas.with_layers(table);
    }

    let similarity = build_similarity(&metas);
    log::info!("similarity: {} groups, {} non-zero pairs", similarity.len(), similarity.nnz());

    let corpus = random_walks(&similarity, &cfg.walks, cfg.seed ^ WALK_STREAM).map_err(|e| e.in_stage("embed"))?;
    let mut sg = cfg.skipgram.clone();
    if cfg.deterministic {
        sg.parallel = false;
    }
    let (embedding, training) =
        skipgram_train_with_report(&corpus, &sg, cfg.seed ^ TRAIN_STREAM).map_err(|e| e.in_stage("embed"))?;

    let projection =
        pacmap_project(&embedding, cfg.seed ^ PROJECT_STREAM, &cfg.pacmap).map_err(|e| e.in_stage("project"))?;
    let layout = GroupLayout::from_projection(&projection).map_err(|e| e.in_stage("project"))?;

    let links = adjacent_links(&similarity, &metas);
    let kept = hhi_flags(&links);
    let filtered: Vec<InterTemporalLink> =
        links.iter().zip(&kept).filter(|(_, &k)| k).map(|(l, _)| *l).collect();
    let lineage = lineages(&filtered, &metas.group_ids());
    log::info!(
        "{} inter-temporal links, {} kept, {} lineages",
        links.len(),
        filtered.len(),
        lineage.n_lineages()
    );

    let artifact = assemble(seq, &metas, &layout, &links, &kept, &lineage, cfg).map_err(|e| e.in_stage("export"))?;
    Ok(PipelineOutput {
        partitions,
        metas,
        similarity,
        corpus,
        embedding,
        training,
        projection,
        layout,
        links,
        kept,
        lineage,
        artifact,
    })
}

fn assemble(
    seq: &GraphSequence,
    metas: &MetaGraphSequence,
    layout: &GroupLayout,
    links: &[InterTemporalLink],
    kept: &[bool],
    lineage: &LineageGraph,
    cfg: &PipelineConfig,
) -> Result<Artifact> {
    let groups = metas
        .group_ids()
        .into_iter()
        .map(|gid| {
            let missing = || Error::Config(format!("no layout for group {gid}"));
            let [x, y] = *layout.coords2d.get(&gid).ok_or_else(missing)?;
            let alluvial = *layout.alluvial1d.get(&gid).ok_or_else(missing)?;
            Ok(ArtifactGroup {
                phase: gid.phase,
                local_id: gid.local_id,
                x,
                y,
                alluvial,
                size: metas.group_size(gid),
                dominant_label: metas.layer_of(gid).to_string(),
                lineage_id: lineage.lineage_of[&gid],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let intra_edges = metas
        .metas()
        .iter()
        .flat_map(|m| {
            m.edges().iter().map(|(&(a, b), &weight)| IntraEdge {
                phase: m.phase_index(),
                a,
                b,
                weight,
            })
        })
        .collect();
    let inter_links = links
        .iter()
        .zip(kept)
        .map(|(l, &kept)| ArtifactLink {
            parent: l.parent,
            child: l.child,
            weight: l.weight,
            kept,
        })
        .collect();
    Ok(Artifact {
        schema_version: SCHEMA_VERSION,
        meta: ArtifactMeta {
            n_phases: seq.len(),
            phase_labels: seq.labels(),
            seed: cfg.seed,
            config: cfg.clone(),
        },
        groups,
        intra_edges,
        inter_links,
    })
}

/// Invariant violations found in an artifact file; empty when valid.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub findings: Vec<String>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.findings.is_empty()
    }
}

/// Checks a written artifact. Fails only if the file cannot be read or is
/// not JSON; every invariant violation becomes one finding.
pub fn validate_artifact(path: &Path) -> Result<ValidationReport> {
    let text = std::fs::read_to_string(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })?;
    let value: Value = serde_json::from_str(&text)?;
    Ok(validate_value(&value))
}

/// Reads a number, treating `null` and the strings `"NaN"`, `"inf"` and
/// friends as non-finite, which is how other writers encode them.
fn number(v: Option<&Value>) -> Option<f64> {
    match v? {
        Value::Number(n) => n.as_f64(),
        Value::Null => Some(f64::NAN),
        Value::String(s) => s.parse::<f64>().ok().filter(|x| !x.is_finite()),
        _ => None,
    }
}

fn index(v: Option<&Value>) -> Option<usize> {
    v?.as_u64().map(|x| x as usize)
}

fn group_ref(v: Option<&Value>) -> Option<GroupId> {
    let v = v?;
    Some(GroupId::new(index(v.get("phase"))?, index(v.get("local_id"))?))
}

/// [`validate_artifact`] on an already parsed document.
pub fn validate_value(doc: &Value) -> ValidationReport {
    let mut findings = Vec::new();
    let mut note = |s: String| findings.push(s);

    match doc.get("schema_version").and_then(Value::as_u64) {
        Some(v) if v == u64::from(SCHEMA_VERSION) => {}
        other => note(format!("unsupported schema_version {other:?}")),
    }
    let n_phases = index(doc.pointer("/meta/n_phases"));
    let n_labels = doc.pointer("/meta/phase_labels").and_then(Value::as_array).map(Vec::len);
    match (n_phases, n_labels) {
        (Some(n), Some(l)) if n == l => {}
        _ => note("meta.n_phases does not match meta.phase_labels".into()),
    }
    let n_phases = n_phases.unwrap_or(usize::MAX);

    let empty = Vec::new();
    let array = |key: &str| doc.get(key).and_then(Value::as_array).unwrap_or(&empty);
    for key in ["groups", "intra_edges", "inter_links"] {
        if !doc.get(key).is_some_and(Value::is_array) {
            note(format!("missing array `{key}`"));
        }
    }

    let mut lineage_of: BTreeMap<GroupId, usize> = BTreeMap::new();
    for (i, g) in array("groups").iter().enumerate() {
        let Some(gid) = group_ref(Some(g)) else {
            note(format!("group #{i}: missing phase or local_id"));
            continue;
        };
        if gid.phase >= n_phases {
            note(format!("group {gid}: phase outside meta.n_phases"));
        }
        for field in ["x", "y", "alluvial"] {
            match number(g.get(field)) {
                Some(x) if x.is_finite() => {}
                Some(_) => note(format!("non-finite coordinate: group {gid} field `{field}`")),
                None => note(format!("group {gid}: missing numeric `{field}`")),
            }
        }
        if !index(g.get("size")).is_some_and(|s| s >= 1) {
            note(format!("group {gid}: size must be a positive integer"));
        }
        if !g.get("dominant_label").is_some_and(Value::is_string) {
            note(format!("group {gid}: missing dominant_label"));
        }
        match index(g.get("lineage_id")) {
            Some(l) => {
                if lineage_of.insert(gid, l).is_some() {
                    note(format!("group {gid} listed twice"));
                }
            }
            None => note(format!("group {gid}: missing lineage_id")),
        }
    }

    for (i, e) in array("intra_edges").iter().enumerate() {
        let phase = index(e.get("phase"));
        let (a, b) = (index(e.get("a")), index(e.get("b")));
        let (Some(phase), Some(a), Some(b)) = (phase, a, b) else {
            note(format!("intra edge #{i}: missing phase, a or b"));
            continue;
        };
        let dangling: Vec<String> = [a, b]
            .into_iter()
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|l| GroupId::new(phase, l))
            .filter(|g| !lineage_of.contains_key(g))
            .map(|g| g.to_string())
            .collect();
        if !dangling.is_empty() {
            note(format!("dangling edge endpoint {} in intra edge #{i}", dangling.join(", ")));
        }
        if !number(e.get("weight")).is_some_and(|w| w.is_finite() && w >= 0.0) {
            note(format!("intra edge #{i}: weight must be finite and non-negative"));
        }
    }

    let mut links = Vec::new();
    let mut flags = Vec::new();
    let mut links_ok = true;
    for (i, l) in array("inter_links").iter().enumerate() {
        let (parent, child) = (group_ref(l.get("parent")), group_ref(l.get("child")));
        let weight = number(l.get("weight"));
        let kept = l.get("kept").and_then(Value::as_bool);
        let (Some(parent), Some(child), Some(weight), Some(kept)) = (parent, child, weight, kept) else {
            note(format!("inter link #{i}: missing parent, child, weight or kept"));
            links_ok = false;
            continue;
        };
        for g in [parent, child] {
            if !lineage_of.contains_key(&g) {
                note(format!("dangling link endpoint {g} in inter link #{i}"));
                links_ok = false;
            }
        }
        if child.phase != parent.phase + 1 {
            note(format!("inter link #{i}: {parent} -> {child} does not join consecutive phases"));
        }
        if !(weight > 0.0 && weight <= 1.0) {
            note(format!("inter link #{i}: weight {weight} outside (0, 1]"));
            links_ok = false;
        }
        links.push(InterTemporalLink { parent, child, weight });
        flags.push(kept);
    }

    if links_ok {
        let expected = hhi_flags(&links);
        for (i, (got, want)) in flags.iter().zip(&expected).enumerate() {
            if got != want {
                note(format!(
                    "inter link #{i} ({} -> {}): kept = {got}, HHI rule gives {want}",
                    links[i].parent, links[i].child
                ));
            }
        }
        let kept: Vec<InterTemporalLink> =
            links.iter().zip(&flags).filter(|(_, &k)| k).map(|(l, _)| *l).collect();
        let groups: Vec<GroupId> = lineage_of.keys().copied().collect();
        let recomputed = lineages(&kept, &groups);
        for (gid, l) in &lineage_of {
            if recomputed.lineage_of.get(gid) != Some(l) {
                note(format!(
                    "group {gid}: lineage_id {l} does not match the components of kept links"
                ));
            }
        }
    }

    ValidationReport { findings }
}
