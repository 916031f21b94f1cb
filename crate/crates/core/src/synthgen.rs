//! Synthetic graph sequences from stochastic block models with scripted
//! population turnover.
//!
//! Each step lists its named groups with target sizes and a symmetric block
//! matrix of edge probabilities. Between steps a fraction of every group's
//! members is replaced by labels drawn from a fixed pool, some members may be
//! reassigned to another group, and groups can appear or disappear.
//! Replacements come from labels never used before; once those run out, the
//! labels that departed longest ago are recycled.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph_io::{GraphSequence, NodeId, PhaseGraph};
use crate::grouping::Partition;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StructuralEvent {
    #[default]
    None,
    AddGroup,
    Morph,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub name: String,
    pub size: usize,
}

/// Reassigns `fraction` of the previous step's `from` members to `to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Move {
    pub from: String,
    pub to: String,
    pub fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioStep {
    pub groups: Vec<GroupSpec>,
    /// Edge probability per group pair, indexed like `groups`.
    pub block_matrix: Vec<Vec<f64>>,
    /// Fraction of each group's previous members replaced by fresh labels.
    #[serde(default)]
    pub turnover: BTreeMap<String, f64>,
    #[serde(default)]
    pub moves: Vec<Move>,
    #[serde(default)]
    pub structural_event: StructuralEvent,
}

impl ScenarioStep {
    pub fn total_size(&self) -> usize {
        self.groups.iter().map(|g| g.size).sum()
    }

    pub fn probability(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.groups.iter().position(|g| g.name == a)?;
        let j = self.groups.iter().position(|g| g.name == b)?;
        Some(self.block_matrix[i][j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub steps: Vec<ScenarioStep>,
    pub label_pool_size: usize,
    pub seed: u64,
}

/// Turnover of slow-change steps.
pub const SLIGHT_TURNOVER: f64 = 0.07;
/// Turnover of the periphery during its higher-churn steps.
pub const HIGHER_TURNOVER: f64 = 0.30;
/// Renewal fraction of the two major turnover events.
pub const RENEWAL_TURNOVER: f64 = 0.75;
/// Share of the periphery moving to the core per early step.
pub const PERIPHERY_TO_CORE: f64 = 0.02;

const CORE: &str = "core";
const PERIPHERY: &str = "periphery";
const PERIPHERY2: &str = "periphery2";
const CLUSTER: &str = "cluster";

fn block(names: &[&str]) -> Vec<Vec<f64>> {
    let p = |a: &str, b: &str| -> f64 {
        let pair = |x: &str, y: &str| (a == x && b == y) || (a == y && b == x);
        if a == CLUSTER || b == CLUSTER {
            if a == b {
                0.05
            } else {
                0.002
            }
        } else if pair(CORE, CORE) {
            0.05
        } else if pair(CORE, PERIPHERY) {
            0.02
        } else if pair(CORE, PERIPHERY2) {
            0.015
        } else if pair(PERIPHERY2, PERIPHERY2) {
            0.004
        } else if pair(PERIPHERY, PERIPHERY2) {
            0.001
        } else {
            0.002
        }
    };
    names
        .iter()
        .map(|a| names.iter().map(|b| p(a, b)).collect())
        .collect()
}

fn step(
    sizes: &[(&str, usize)],
    turnover: &[(&str, f64)],
    moves: &[(&str, &str, f64)],
    event: StructuralEvent,
) -> ScenarioStep {
    let names: Vec<&str> = sizes.iter().map(|(n, _)| *n).collect();
    ScenarioStep {
        groups: sizes
            .iter()
            .map(|(name, size)| GroupSpec {
                name: name.to_string(),
                size: *size,
            })
            .collect(),
        block_matrix: block(&names),
        turnover: turnover.iter().map(|(n, f)| (n.to_string(), *f)).collect(),
        moves: moves
            .iter()
            .map(|(from, to, fraction)| Move {
                from: from.to_string(),
                to: to.to_string(),
                fraction: *fraction,
            })
            .collect(),
        structural_event: event,
    }
}

/// The eleven-step core/periphery scenario: slow drift with periphery moving
/// into the core, higher periphery churn, a second periphery, a 75% renewal,
/// an emerging cluster, a second 75% renewal, and a final slow step.
pub fn default_scenario() -> Scenario {
    use StructuralEvent::*;
    let slight = SLIGHT_TURNOVER;
    let to_core = [(PERIPHERY, CORE, PERIPHERY_TO_CORE)];
    let steps = vec![
        step(&[(CORE, 900), (PERIPHERY, 2300)], &[], &[], None),
        step(&[(CORE, 930), (PERIPHERY, 2280)], &[(CORE, slight), (PERIPHERY, slight)], &to_core, None),
        step(&[(CORE, 960), (PERIPHERY, 2260)], &[(CORE, slight), (PERIPHERY, slight)], &to_core, None),
        step(&[(CORE, 990), (PERIPHERY, 2240)], &[(CORE, slight), (PERIPHERY, slight)], &to_core, None),
        step(&[(CORE, 1000), (PERIPHERY, 2200)], &[(CORE, slight), (PERIPHERY, HIGHER_TURNOVER)], &[], None),
        step(&[(CORE, 1000), (PERIPHERY, 2150)], &[(CORE, slight), (PERIPHERY, HIGHER_TURNOVER)], &[], None),
        step(
            &[(CORE, 1000), (PERIPHERY, 2000), (PERIPHERY2, 800)],
            &[(CORE, slight), (PERIPHERY, slight)],
            &[],
            AddGroup,
        ),
        step(
            &[(CORE, 1000), (PERIPHERY, 2000), (PERIPHERY2, 800)],
            &[(CORE, RENEWAL_TURNOVER), (PERIPHERY, RENEWAL_TURNOVER), (PERIPHERY2, RENEWAL_TURNOVER)],
            &[],
            None,
        ),
        step(
            &[(CORE, 950), (PERIPHERY, 1800), (PERIPHERY2, 750), (CLUSTER, 450)],
            &[(CORE, slight), (PERIPHERY, slight), (PERIPHERY2, slight)],
            &[],
            AddGroup,
        ),
        step(
            &[(CORE, 950), (PERIPHERY, 1800), (PERIPHERY2, 750), (CLUSTER, 450)],
            &[
                (CORE, RENEWAL_TURNOVER),
                (PERIPHERY, RENEWAL_TURNOVER),
                (PERIPHERY2, RENEWAL_TURNOVER),
                (CLUSTER, RENEWAL_TURNOVER),
            ],
            &[],
            None,
        ),
        step(
            &[(CORE, 950), (PERIPHERY, 1800), (PERIPHERY2, 750), (CLUSTER, 450)],
            &[(CORE, slight), (PERIPHERY, slight), (PERIPHERY2, slight), (CLUSTER, slight)],
            &[],
            None,
        ),
    ];
    Scenario {
        steps,
        label_pool_size: 11_000,
        seed: 0,
    }
}

impl Scenario {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Scales every group size and the label pool by `factor`, keeping
    /// turnover fractions and block probabilities.
    pub fn scaled(mut self, factor: f64) -> Self {
        let scale = |x: usize| ((x as f64 * factor).round() as usize).max(1);
        for s in &mut self.steps {
            for g in &mut s.groups {
                g.size = scale(g.size);
            }
        }
        self.label_pool_size = scale(self.label_pool_size);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Scenario(msg));
        if self.steps.is_empty() {
            return bad("no steps".into());
        }
        for (t, s) in self.steps.iter().enumerate() {
            let k = s.groups.len();
            if k == 0 {
                return bad(format!("step {t} has no groups"));
            }
            let names: BTreeSet<&str> = s.groups.iter().map(|g| g.name.as_str()).collect();
            if names.len() != k {
                return bad(format!("step {t} repeats a group name"));
            }
            if s.groups.iter().any(|g| g.size == 0) {
                return bad(format!("step {t} has an empty group"));
            }
            if s.total_size() > self.label_pool_size {
                return bad(format!("step {t} needs more nodes than the label pool holds"));
            }
            if s.block_matrix.len() != k || s.block_matrix.iter().any(|r| r.len() != k) {
                return bad(format!("step {t}: block matrix must be {k}x{k}"));
            }
            for i in 0..k {
                for j in 0..k {
                    let p = s.block_matrix[i][j];
                    if !(0.0..=1.0).contains(&p) || p != s.block_matrix[j][i] {
                        return bad(format!("step {t}: block matrix must be symmetric in [0, 1]"));
                    }
                }
            }
            for (name, f) in &s.turnover {
                if !names.contains(name.as_str()) || !(0.0..=1.0).contains(f) {
                    return bad(format!("step {t}: invalid turnover for `{name}`"));
                }
            }
            let prev: BTreeSet<&str> = match t {
                0 => BTreeSet::new(),
                _ => self.steps[t - 1].groups.iter().map(|g| g.name.as_str()).collect(),
            };
            for m in &s.moves {
                if !prev.contains(m.from.as_str())
                    || !names.contains(m.to.as_str())
                    || !(0.0..=1.0).contains(&m.fraction)
                {
                    return bad(format!("step {t}: invalid move {} -> {}", m.from, m.to));
                }
            }
        }
        Ok(())
    }
}

/// Generated graphs with their ground-truth partitions.
#[derive(Clone, Debug)]
pub struct GeneratedSequence {
    pub sequence: GraphSequence,
    pub partitions: Vec<Partition>,
    /// Group names per phase, indexed by local group id.
    pub group_names: Vec<Vec<String>>,
}

impl GeneratedSequence {
    /// Local id of the named group in `phase`.
    pub fn group_index(&self, phase: usize, name: &str) -> Option<usize> {
        self.group_names.get(phase)?.iter().position(|n| n == name)
    }
}

fn take_random(rng: &mut ChaCha8Rng, items: &mut Vec<usize>, count: usize) -> Vec<usize> {
    let count = count.min(items.len());
    let mut picked = sample(rng, items.len(), count).into_vec();
    picked.sort_unstable();
    let taken: Vec<usize> = picked.iter().map(|&i| items[i]).collect();
    for &i in picked.iter().rev() {
        items.swap_remove(i);
    }
    items.sort_unstable();
    taken
}

/// Linear indices of successes among `total` Bernoulli(p) trials, found by
/// geometric skipping.
fn bernoulli_hits(rng: &mut ChaCha8Rng, total: u64, p: f64, mut emit: impl FnMut(u64)) {
    if p <= 0.0 || total == 0 {
        return;
    }
    if p >= 1.0 {
        (0..total).for_each(emit);
        return;
    }
    let log_q = (1.0 - p).ln();
    let mut k: i64 = -1;
    loop {
        let u: f64 = 1.0 - rng.gen::<f64>();
        let skip = (u.ln() / log_q).floor();
        if skip >= (total as f64) {
            break;
        }
        k += 1 + skip as i64;
        if k as u64 >= total {
            break;
        }
        emit(k as u64);
    }
}

/// Runs the scenario. Deterministic for a fixed `scn.seed`.
pub fn generate(scn: &Scenario) -> Result<GeneratedSequence> {
    scn.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scn.seed);
    let width = scn.label_pool_size.saturating_sub(1).to_string().len();
    let label = |i: usize| NodeId::new(format!("n{i:0width$}")).expect("non-empty");

    let mut phases = Vec::with_capacity(scn.steps.len());
    let mut partitions = Vec::with_capacity(scn.steps.len());
    let mut group_names = Vec::with_capacity(scn.steps.len());
    let mut previous: HashMap<String, Vec<usize>> = HashMap::new();
    let mut last_seen: Vec<Option<usize>> = vec![None; scn.label_pool_size];

    for (t, s) in scn.steps.iter().enumerate() {
        let mut members: Vec<Vec<usize>> = Vec::with_capacity(s.groups.len());
        let mut leftovers: HashMap<&str, Vec<usize>> = HashMap::new();
        for g in &s.groups {
            let mut prev = previous.get(&g.name).cloned().unwrap_or_default();
            let f = s.turnover.get(&g.name).copied().unwrap_or(0.0);
            let keep = ((1.0 - f) * prev.len() as f64).round() as usize;
            let kept = take_random(&mut rng, &mut prev, keep);
            leftovers.insert(g.name.as_str(), kept);
        }
        for m in &s.moves {
            let source_size = previous.get(&m.from).map_or(0, Vec::len);
            let count = (m.fraction * source_size as f64).round() as usize;
            let moved = match leftovers.get_mut(m.from.as_str()) {
                Some(pool) => take_random(&mut rng, pool, count),
                None => Vec::new(),
            };
            let target = leftovers.get_mut(m.to.as_str()).expect("validated move target");
            target.extend(moved);
            target.sort_unstable();
        }
        for g in &s.groups {
            let mut kept = leftovers.remove(g.name.as_str()).unwrap_or_default();
            if kept.len() > g.size {
                kept = take_random(&mut rng, &mut kept, g.size);
                kept.sort_unstable();
            }
            members.push(kept);
        }

        let occupied: BTreeSet<usize> = previous.values().flatten().copied().collect();
        let available: Vec<usize> = (0..scn.label_pool_size)
            .filter(|i| !occupied.contains(i))
            .collect();
        let needed: usize = s
            .groups
            .iter()
            .zip(&members)
            .map(|(g, m)| g.size - m.len())
            .sum();
        if needed > available.len() {
            return Err(Error::PoolExhausted {
                step: t,
                needed,
                available: available.len(),
            });
        }
        let (mut never, mut reused): (Vec<usize>, Vec<usize>) =
            available.into_iter().partition(|&i| last_seen[i].is_none());
        let mut fresh = if never.len() >= needed {
            take_random(&mut rng, &mut never, needed)
        } else {
            // Not enough never-used labels: top up with the labels that
            // left the longest time ago.
            reused.shuffle(&mut rng);
            reused.sort_by_key(|&i| last_seen[i]);
            let missing = needed - never.len();
            never.extend(reused.into_iter().take(missing));
            never.sort_unstable();
            never
        };
        for (g, m) in s.groups.iter().zip(members.iter_mut()) {
            let drawn = take_random(&mut rng, &mut fresh, g.size - m.len());
            m.extend(drawn);
            m.sort_unstable();
        }
        for &v in members.iter().flatten() {
            last_seen[v] = Some(t);
        }

        let mut all: Vec<(usize, usize)> = members
            .iter()
            .enumerate()
            .flat_map(|(g, m)| m.iter().map(move |&v| (v, g)))
            .collect();
        all.sort_unstable();
        let position: HashMap<usize, usize> =
            all.iter().enumerate().map(|(i, &(v, _))| (v, i)).collect();
        let nodes: Vec<NodeId> = all.iter().map(|&(v, _)| label(v)).collect();

        let mut edges: Vec<(usize, usize, f64)> = Vec::new();
        for a in 0..members.len() {
            for b in a..members.len() {
                let p = s.block_matrix[a][b];
                let (ma, mb) = (&members[a], &members[b]);
                if a == b {
                    let n = ma.len() as u64;
                    // Row-major walk over the strict upper triangle.
                    let (mut row, mut row_start) = (0u64, 0u64);
                    bernoulli_hits(&mut rng, n * n.saturating_sub(1) / 2, p, |k| {
                        while k >= row_start + (n - 1 - row) {
                            row_start += n - 1 - row;
                            row += 1;
                        }
                        let col = row + 1 + (k - row_start);
                        edges.push((
                            position[&ma[row as usize]],
                            position[&ma[col as usize]],
                            1.0,
                        ));
                    });
                } else {
                    let width = mb.len() as u64;
                    bernoulli_hits(&mut rng, ma.len() as u64 * width, p, |k| {
                        edges.push((
                            position[&ma[(k / width) as usize]],
                            position[&mb[(k % width) as usize]],
                            1.0,
                        ));
                    });
                }
            }
        }
        let phase = PhaseGraph::from_indexed(t, t.to_string(), nodes, edges)?;
        let partition = Partition::from_pairs(
            t,
            members
                .iter()
                .enumerate()
                .flat_map(|(g, m)| m.iter().map(move |&v| (v, g)))
                .map(|(v, g)| (label(v), g)),
        )?;
        phases.push(phase);
        partitions.push(partition);
        group_names.push(s.groups.iter().map(|g| g.name.clone()).collect());
        previous = s
            .groups
            .iter()
            .zip(members)
            .map(|(g, m)| (g.name.clone(), m))
            .collect();
    }

    Ok(GeneratedSequence {
        sequence: GraphSequence::new(phases)?,
        partitions,
        group_names,
    })
}
