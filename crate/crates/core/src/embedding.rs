//! Node2Vec over the similarity matrix: biased random walks produce
//! sentences of group ids, and skip-gram with negative sampling turns them
//! into one vector per group.

use std::io::Write;
use std::sync::atomic::{AtomicU32, Ordering};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metagraph::GroupId;
use crate::similarity::SimilarityMatrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WalkConfig {
    pub walks_per_node: usize,
    pub walk_length: usize,
    /// Return parameter; revisiting the previous group is weighted by `1/p`.
    pub p: f64,
    /// In-out parameter; moving away from the previous group is weighted by `1/q`.
    pub q: f64,
}

impl Default for WalkConfig {
    fn default() -> Self {
        WalkConfig {
            walks_per_node: 10,
            walk_length: 80,
            p: 1.0,
            q: 1.0,
        }
    }
}

impl WalkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.walks_per_node == 0 || self.walk_length == 0 {
            return Err(Error::Config("walks_per_node and walk_length must be >= 1".into()));
        }
        if !(self.p > 0.0 && self.q > 0.0) {
            return Err(Error::Config("p and q must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct WalkCorpus {
    pub sentences: Vec<Vec<GroupId>>,
}

impl WalkCorpus {
    pub fn token_count(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    /// One sentence per line, space-separated `phase:local` tokens.
    pub fn write_text<W: Write>(&self, mut out: W) -> Result<()> {
        for sentence in &self.sentences {
            let line: Vec<String> = sentence.iter().map(GroupId::to_string).collect();
            writeln!(out, "{}", line.join(" "))?;
        }
        Ok(())
    }
}

fn sample_weighted(weights: impl Iterator<Item = f64> + Clone, rng: &mut ChaCha8Rng) -> Option<usize> {
    let total: f64 = weights.clone().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut target = rng.gen::<f64>() * total;
    let mut last = None;
    for (i, w) in weights.enumerate() {
        if w <= 0.0 {
            continue;
        }
        last = Some(i);
        if target < w {
            return Some(i);
        }
        target -= w;
    }
    last
}

/// Generates `walks_per_node` walks from every group of `m`.
///
/// Each walk draws from its own RNG stream derived from `(seed, start, walk)`,
/// so the corpus does not depend on the number of threads.
pub fn random_walks(m: &SimilarityMatrix, cfg: &WalkConfig, seed: u64) -> Result<WalkCorpus> {
    cfg.validate()?;
    if m.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    let memoryless = cfg.p == 1.0 && cfg.q == 1.0;
    let (inv_p, inv_q) = (1.0 / cfg.p, 1.0 / cfg.q);
    let sentences = (0..m.len())
        .into_par_iter()
        .flat_map_iter(|start| {
            (0..cfg.walks_per_node).map(move |w| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream((start * cfg.walks_per_node + w) as u64);
                let mut walk = Vec::with_capacity(cfg.walk_length);
                walk.push(start);
                while walk.len() < cfg.walk_length {
                    let cur = *walk.last().unwrap();
                    let nbrs = m.neighbors(cur);
                    let prev = (walk.len() >= 2).then(|| walk[walk.len() - 2]);
                    let next = match prev {
                        Some(prev) if !memoryless => {
                            let prev_nbrs = m.neighbors(prev);
                            let biased = nbrs.iter().map(|&(x, w)| {
                                let alpha = if x == prev {
                                    inv_p
                                } else if prev_nbrs.binary_search_by_key(&x, |&(y, _)| y).is_ok() {
                                    1.0
                                } else {
                                    inv_q
                                };
                                w * alpha
                            });
                            sample_weighted(biased, &mut rng)
                        }
                        _ => sample_weighted(nbrs.iter().map(|&(_, w)| w), &mut rng),
                    };
                    match next {
                        Some(k) => walk.push(nbrs[k].0),
                        None => break,
                    }
                }
                walk.into_iter().map(|i| m.order()[i]).collect::<Vec<_>>()
            })
        })
        .collect();
    Ok(WalkCorpus { sentences })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub negatives: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Lock-free multi-threaded updates. Faster, not reproducible.
    pub parallel: bool,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 64,
            window: 10,
            negatives: 5,
            epochs: 5,
            lr: 0.025,
            parallel: false,
        }
    }
}

/// One vector per group.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEmbedding {
    dim: usize,
    ids: Vec<GroupId>,
    vectors: Vec<Vec<f64>>,
}

impl GroupEmbedding {
    pub fn new(ids: Vec<GroupId>, vectors: Vec<Vec<f64>>) -> Result<Self> {
        let dim = vectors.first().map_or(0, Vec::len);
        if ids.len() != vectors.len() || vectors.iter().any(|v| v.len() != dim) {
            return Err(Error::Config("embedding rows must share one dimension".into()));
        }
        Ok(GroupEmbedding { dim, ids, vectors })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[GroupId] {
        &self.ids
    }

    pub fn vectors(&self) -> &[Vec<f64>] {
        &self.vectors
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, gid: GroupId) -> Option<&[f64]> {
        self.ids
            .binary_search(&gid)
            .ok()
            .map(|i| self.vectors[i].as_slice())
    }

    /// CSV with a `group` column followed by one column per dimension.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["group".to_string()];
        header.extend((0..self.dim).map(|d| format!("d{d}")));
        w.write_record(&header)?;
        for (gid, v) in self.ids.iter().zip(&self.vectors) {
            let mut row = vec![gid.to_string()];
            row.extend(v.iter().map(f64::to_string));
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    /// Mean negative-sampling loss per (center, context) pair, per epoch.
    pub epoch_loss: Vec<f64>,
}

/// f32 matrix with relaxed atomic cells, shared by Hogwild workers.
struct SharedTable {
    dim: usize,
    cells: Vec<AtomicU32>,
}

impl SharedTable {
    fn new(rows: usize, dim: usize, mut init: impl FnMut() -> f32) -> Self {
        SharedTable {
            dim,
            cells: (0..rows * dim).map(|_| AtomicU32::new(init().to_bits())).collect(),
        }
    }

    #[inline]
    fn get(&self, row: usize, d: usize) -> f32 {
        f32::from_bits(self.cells[row * self.dim + d].load(Ordering::Relaxed))
    }

    #[inline]
    fn add(&self, row: usize, d: usize, delta: f32) {
        let cell = &self.cells[row * self.dim + d];
        let v = f32::from_bits(cell.load(Ordering::Relaxed)) + delta;
        cell.store(v.to_bits(), Ordering::Relaxed);
    }

    fn row(&self, row: usize) -> Vec<f32> {
        (0..self.dim).map(|d| self.get(row, d)).collect()
    }
}

/// Cumulative noise distribution proportional to `count^0.75`.
struct NoiseTable {
    cumulative: Vec<f64>,
}

impl NoiseTable {
    fn new(counts: &[usize]) -> Self {
        let mut acc = 0.0;
        let cumulative = counts
            .iter()
            .map(|&c| {
                acc += (c as f64).powf(0.75);
                acc
            })
            .collect();
        NoiseTable { cumulative }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> usize {
        let total = *self.cumulative.last().unwrap();
        let x = rng.gen::<f64>() * total;
        self.cumulative
            .partition_point(|&c| c <= x)
            .min(self.cumulative.len() - 1)
    }
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// `-ln(sigmoid(x))`, stable for large |x|.
#[inline]
fn neg_log_sigmoid(x: f32) -> f64 {
    let x = x as f64;
    if x > 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

struct Trainer<'a> {
    cfg: &'a SkipGramConfig,
    input: SharedTable,
    output: SharedTable,
    noise: NoiseTable,
    total_steps: f64,
}

impl Trainer<'_> {
    /// Trains on `sentences`; `offset` is the number of center tokens already
    /// processed, which drives the learning-rate schedule. Returns the summed
    /// loss and the number of positive pairs.
    fn run(&self, sentences: &[Vec<usize>], mut offset: usize, rng: &mut ChaCha8Rng) -> (f64, usize) {
        let dim = self.cfg.dim;
        let lr0 = self.cfg.lr as f32;
        let mut grad = vec![0f32; dim];
        let mut loss = 0.0;
        let mut pairs = 0;
        for sentence in sentences {
            for (pos, &center) in sentence.iter().enumerate() {
                let progress = (offset as f64 / self.total_steps).min(1.0) as f32;
                let lr = lr0 * (1.0 - 0.9 * progress);
                offset += 1;
                let reach = rng.gen_range(1..=self.cfg.window.max(1));
                let lo = pos.saturating_sub(reach);
                let hi = (pos + reach).min(sentence.len() - 1);
                for (ctx_pos, &context) in sentence.iter().enumerate().take(hi + 1).skip(lo) {
                    if ctx_pos == pos {
                        continue;
                    }
                    grad.iter_mut().for_each(|g| *g = 0.0);
                    pairs += 1;
                    for k in 0..=self.cfg.negatives {
                        let (target, label) = if k == 0 {
                            (context, 1.0f32)
                        } else {
                            let t = self.noise.sample(rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let mut dot = 0f32;
                        for d in 0..dim {
                            dot += self.input.get(center, d) * self.output.get(target, d);
                        }
                        loss += if label > 0.0 {
                            neg_log_sigmoid(dot)
                        } else {
                            neg_log_sigmoid(-dot)
                        };
                        let g = (label - sigmoid(dot)) * lr;
                        for (d, gd) in grad.iter_mut().enumerate() {
                            *gd += g * self.output.get(target, d);
                            self.output.add(target, d, g * self.input.get(center, d));
                        }
                    }
                    for (d, &gd) in grad.iter().enumerate() {
                        self.input.add(center, d, gd);
                    }
                }
            }
        }
        (loss, pairs)
    }
}

/// Skip-gram with negative sampling.
pub fn skipgram_train(corpus: &WalkCorpus, cfg: &SkipGramConfig, seed: u64) -> Result<GroupEmbedding> {
    skipgram_train_with_report(corpus, cfg, seed).map(|(emb, _)| emb)
}

/// Like [`skipgram_train`], also reporting the per-epoch loss.
///
/// Input vectors start uniform in `[-0.5/dim, 0.5/dim]`, output vectors at
/// zero; the learning rate decays linearly to a tenth of its start value.
/// Single-threaded training is bit-reproducible for a fixed seed.
pub fn skipgram_train_with_report(
    corpus: &WalkCorpus,
    cfg: &SkipGramConfig,
    seed: u64,
) -> Result<(GroupEmbedding, TrainingReport)> {
    if corpus.token_count() == 0 {
        return Err(Error::Config("empty walk corpus".into()));
    }
    if cfg.dim == 0 || cfg.epochs == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("dim, epochs and lr must be positive".into()));
    }
    let mut vocab: Vec<GroupId> = corpus.sentences.iter().flatten().copied().collect();
    vocab.sort();
    vocab.dedup();
    let mut counts = vec![0usize; vocab.len()];
    let sentences: Vec<Vec<usize>> = corpus
        .sentences
        .iter()
        .map(|s| {
            s.iter()
                .map(|g| {
                    let i = vocab.binary_search(g).expect("token in vocabulary");
                    counts[i] += 1;
                    i
                })
                .collect()
        })
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let half = 0.5 / cfg.dim as f32;
    let trainer = Trainer {
        cfg,
        input: SharedTable::new(vocab.len(), cfg.dim, || rng.gen_range(-half..half)),
        output: SharedTable::new(vocab.len(), cfg.dim, || 0.0),
        noise: NoiseTable::new(&counts),
        total_steps: (corpus.token_count() * cfg.epochs) as f64,
    };

    let tokens = corpus.token_count();
    let mut report = TrainingReport::default();
    for epoch in 0..cfg.epochs {
        let offset = epoch * tokens;
        let (loss, pairs) = if cfg.parallel {
            let chunk = sentences.len().div_ceil(rayon::current_num_threads().max(1)).max(1);
            let starts: Vec<usize> = sentences
                .chunks(chunk)
                .scan(offset, |acc, c| {
                    let start = *acc;
                    *acc += c.iter().map(Vec::len).sum::<usize>();
                    Some(start)
                })
                .collect();
            sentences
                .par_chunks(chunk)
                .zip(starts)
                .enumerate()
                .map(|(i, (part, start))| {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    rng.set_stream((epoch * 1_000_003 + i + 1) as u64);
                    trainer.run(part, start, &mut rng)
                })
                .reduce(|| (0.0, 0), |a, b| (a.0 + b.0, a.1 + b.1))
        } else {
            trainer.run(&sentences, offset, &mut rng)
        };
        report
            .epoch_loss
            .push(if pairs > 0 { loss / pairs as f64 } else { 0.0 });
    }

    let vectors = (0..vocab.len())
        .map(|r| trainer.input.row(r).into_iter().map(f64::from).collect())
        .collect();
    Ok((GroupEmbedding::new(vocab, vectors)?, report))
}

/// Cosine similarity; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gid(p: usize, l: usize) -> GroupId {
        GroupId::new(p, l)
    }

    fn matrix(order: &[GroupId], entries: &[(GroupId, GroupId, f64)]) -> SimilarityMatrix {
        SimilarityMatrix::from_entries(order.to_vec(), entries.iter().copied()).unwrap()
    }

    fn chain(n: usize) -> (Vec<GroupId>, SimilarityMatrix) {
        let order: Vec<GroupId> = (0..n).map(|p| gid(p, 0)).collect();
        let entries: Vec<_> = (1..n).map(|p| (order[p - 1], order[p], 0.5)).collect();
        let m = matrix(&order, &entries);
        (order, m)
    }

    #[test]
    fn walk_count_and_starts() {
        let (order, m) = chain(6);
        let cfg = WalkConfig {
            walks_per_node: 3,
            walk_length: 7,
            ..Default::default()
        };
        let corpus = random_walks(&m, &cfg, 1).unwrap();
        assert_eq!(corpus.sentences.len(), 18);
        for (i, g) in order.iter().enumerate() {
            let starts = corpus.sentences[i * 3..i * 3 + 3].iter().filter(|s| s[0] == *g).count();
            assert_eq!(starts, 3);
        }
        assert!(corpus.sentences.iter().all(|s| s.len() == 7));
    }

    #[test]
    fn isolated_group_walks_have_length_one() {
        let order = vec![gid(0, 0), gid(1, 0), gid(1, 1)];
        let m = matrix(&order, &[(order[0], order[1], 0.3)]);
        let corpus = random_walks(&m, &WalkConfig::default(), 4).unwrap();
        let lonely: Vec<_> = corpus.sentences.iter().filter(|s| s[0] == order[2]).collect();
        assert_eq!(lonely.len(), 10);
        assert!(lonely.iter().all(|s| s.as_slice() == [order[2]]));
    }

    #[test]
    fn two_node_walks_alternate() {
        let order = vec![gid(0, 0), gid(1, 0)];
        let m = matrix(&order, &[(order[0], order[1], 0.7)]);
        for cfg in [
            WalkConfig::default(),
            WalkConfig {
                p: 0.25,
                q: 4.0,
                ..Default::default()
            },
        ] {
            let corpus = random_walks(&m, &cfg, 9).unwrap();
            for s in &corpus.sentences {
                assert!(s.windows(2).all(|w| w[0] != w[1]));
                assert_eq!(s.len(), 80);
            }
        }
    }

    #[test]
    fn walks_are_seed_deterministic() {
        let (_, m) = chain(5);
        let cfg = WalkConfig {
            p: 0.5,
            q: 2.0,
            ..Default::default()
        };
        assert_eq!(random_walks(&m, &cfg, 3).unwrap(), random_walks(&m, &cfg, 3).unwrap());
        assert_ne!(random_walks(&m, &cfg, 3).unwrap(), random_walks(&m, &cfg, 4).unwrap());
    }

    #[test]
    fn walk_rejects_bad_input() {
        let m = SimilarityMatrix::from_entries(Vec::new(), []).unwrap();
        assert!(matches!(random_walks(&m, &WalkConfig::default(), 0), Err(Error::EmptyMatrix)));
        let (_, m) = chain(3);
        let bad = WalkConfig {
            q: 0.0,
            ..Default::default()
        };
        assert!(random_walks(&m, &bad, 0).is_err());
    }

    /// Empirical transition frequencies from a fixed previous/current pair
    /// against the biased weights computed by hand.
    #[test]
    fn biased_transition_frequencies() {
        // 0 - 1, 1 - 2, 1 - 3, 0 - 2 (so 2 is at distance 1 from 0, 3 at distance 2)
        let order: Vec<GroupId> = (0..4).map(|p| gid(p, 0)).collect();
        let m = matrix(
            &order,
            &[
                (order[0], order[1], 1.0),
                (order[1], order[2], 1.0),
                (order[1], order[3], 1.0),
                (order[0], order[2], 1.0),
            ],
        );
        let cfg = WalkConfig {
            walks_per_node: 20_000,
            walk_length: 3,
            p: 2.0,
            q: 0.5,
        };
        let corpus = random_walks(&m, &cfg, 17).unwrap();
        let mut counts = [0usize; 4];
        for s in corpus.sentences.iter().filter(|s| s.len() == 3 && s[0] == order[0] && s[1] == order[1]) {
            counts[s[2].phase] += 1;
        }
        // back to 0: 1/p = 0.5; to 2 (neighbor of 0): 1; to 3: 1/q = 2
        let total: usize = counts.iter().sum();
        let expect = [0.5 / 3.5, 0.0, 1.0 / 3.5, 2.0 / 3.5];
        for k in 0..4 {
            let freq = counts[k] as f64 / total as f64;
            assert!((freq - expect[k]).abs() < 0.02, "{k}: {freq} vs {}", expect[k]);
        }
    }

    fn small_corpus() -> WalkCorpus {
        let (_, m) = chain(8);
        random_walks(&m, &WalkConfig::default(), 2).unwrap()
    }

    #[test]
    fn vectors_have_configured_dimension() {
        let cfg = SkipGramConfig {
            epochs: 1,
            ..Default::default()
        };
        let emb = skipgram_train(&small_corpus(), &cfg, 1).unwrap();
        assert_eq!(emb.dim(), 64);
        assert_eq!(emb.len(), 8);
        assert!(emb.vectors().iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn single_threaded_training_is_bit_identical() {
        let corpus = small_corpus();
        let cfg = SkipGramConfig::default();
        let a = skipgram_train(&corpus, &cfg, 42).unwrap();
        let b = skipgram_train(&corpus, &cfg, 42).unwrap();
        let bits = |e: &GroupEmbedding| -> Vec<u64> { e.vectors().iter().flatten().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
    }

    #[test]
    fn loss_decreases_over_epochs() {
        let (_, m) = chain(200);
        let walks = WalkConfig {
            walk_length: 30,
            ..Default::default()
        };
        let corpus = random_walks(&m, &walks, 2).unwrap();
        let (_, report) = skipgram_train_with_report(&corpus, &SkipGramConfig::default(), 5).unwrap();
        assert_eq!(report.epoch_loss.len(), 5);
        assert!(report.epoch_loss.last().unwrap() < report.epoch_loss.first().unwrap(), "{:?}", report.epoch_loss);
    }

    #[test]
    fn parallel_mode_produces_finite_vectors() {
        let cfg = SkipGramConfig {
            parallel: true,
            ..Default::default()
        };
        let emb = skipgram_train(&small_corpus(), &cfg, 5).unwrap();
        assert_eq!(emb.len(), 8);
        assert!(emb.vectors().iter().flatten().all(|x| x.is_finite()));
    }

    #[test]
    fn empty_corpus_is_rejected() {
        assert!(skipgram_train(&WalkCorpus::default(), &SkipGramConfig::default(), 0).is_err());
    }

    #[test]
    fn noise_table_follows_three_quarter_power() {
        let table = NoiseTable::new(&[1, 16, 0]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut hits = [0usize; 3];
        for _ in 0..90_000 {
            hits[table.sample(&mut rng)] += 1;
        }
        // weights 1 and 16^0.75 = 8
        assert_eq!(hits[2], 0);
        let ratio = hits[1] as f64 / hits[0] as f64;
        assert!((ratio - 8.0).abs() < 0.4, "{ratio}");
    }

    #[test]
    fn dumps() {
        let corpus = WalkCorpus {
            sentences: vec![vec![gid(0, 0), gid(1, 2)]],
        };
        let mut buf = Vec::new();
        corpus.write_text(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "0:0 1:2\n");
        let emb = GroupEmbedding::new(vec![gid(0, 0)], vec![vec![0.5, -1.0]]).unwrap();
        let mut buf = Vec::new();
        emb.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "group,d0,d1\n0:0,0.5,-1\n");
    }
}
