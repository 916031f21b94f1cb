//! 2D projection of the group embedding with PaCMAP, and the shared 1D
//! alluvial axis obtained by PCA of the 2D cloud.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::embedding::GroupEmbedding;
use crate::error::{Error, Result};
use crate::metagraph::{GroupId, MetaGraphSequence};

/// Number of candidates drawn when picking a mid-near partner.
const MID_NEAR_CANDIDATES: usize = 6;
const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PacmapConfig {
    pub n_neighbors: usize,
    pub mid_near_ratio: f64,
    pub further_pair_ratio: f64,
    /// Iterations of the three weight phases.
    pub num_iters: (usize, usize, usize),
    pub learning_rate: f64,
    /// Initial mid-near weight, annealed to 3 over the first phase.
    pub mid_near_init_weight: f64,
}

impl Default for PacmapConfig {
    fn default() -> Self {
        PacmapConfig {
            n_neighbors: 10,
            mid_near_ratio: 0.5,
            further_pair_ratio: 2.0,
            num_iters: (100, 100, 250),
            learning_rate: 1.0,
            mid_near_init_weight: 1000.0,
        }
    }
}

impl PacmapConfig {
    pub fn total_iters(&self) -> usize {
        self.num_iters.0 + self.num_iters.1 + self.num_iters.2
    }

    /// `(near, mid_near, further)` loss weights at iteration `itr`.
    fn weights(&self, itr: usize) -> PairWeights {
        let (p1, p2, _) = self.num_iters;
        if itr < p1 {
            let t = itr as f64 / p1 as f64;
            PairWeights {
                near: 2.0,
                mid_near: (1.0 - t) * self.mid_near_init_weight + t * 3.0,
                further: 1.0,
            }
        } else if itr < p1 + p2 {
            PairWeights {
                near: 3.0,
                mid_near: 3.0,
                further: 1.0,
            }
        } else {
            PairWeights {
                near: 1.0,
                mid_near: 0.0,
                further: 1.0,
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct PairWeights {
    near: f64,
    mid_near: f64,
    further: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct PairSet {
    near: Vec<(usize, usize)>,
    mid_near: Vec<(usize, usize)>,
    further: Vec<(usize, usize)>,
}

/// 2D coordinates for every embedded group.
#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub ids: Vec<GroupId>,
    pub coords: Vec<[f64; 2]>,
    /// Objective value per iteration, under that iteration's weights.
    pub loss_history: Vec<f64>,
    /// Set when the input was too small for PaCMAP and PCA was used instead.
    pub notice: Option<String>,
}

impl Projection {
    pub fn as_map(&self) -> BTreeMap<GroupId, [f64; 2]> {
        self.ids.iter().copied().zip(self.coords.iter().copied()).collect()
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Top-`k` principal component scores of the rows of `data` (population
/// covariance) and the matching eigenvalues, largest first. Each axis is
/// oriented so its largest-magnitude loading is positive.
pub(crate) fn principal_components(data: &[Vec<f64>], k: usize) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = data.len();
    let d = data.first().map_or(0, Vec::len);
    if n == 0 || d == 0 {
        return (vec![vec![0.0; k]; n], vec![0.0; k]);
    }
    let mean: Vec<f64> = (0..d)
        .map(|j| data.iter().map(|r| r[j]).sum::<f64>() / n as f64)
        .collect();
    let centered = DMatrix::from_fn(n, d, |i, j| data[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut axes: Vec<usize> = (0..d).collect();
    axes.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));

    let mut scores = vec![vec![0.0; k]; n];
    let mut values = vec![0.0; k];
    for (c, &axis) in axes.iter().take(k).enumerate() {
        let mut v = eig.eigenvectors.column(axis).into_owned();
        let pivot = v.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        if pivot < 0.0 {
            v = -v;
        }
        values[c] = eig.eigenvalues[axis].max(0.0);
        let proj = &centered * v;
        for (row, s) in scores.iter_mut().zip(proj.iter()) {
            row[c] = *s;
        }
    }
    (scores, values)
}

/// Global min-max scaling followed by per-column centering.
fn preprocess(data: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (lo, hi) = data
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut out: Vec<Vec<f64>> = data
        .iter()
        .map(|r| r.iter().map(|x| (x - lo) / range).collect())
        .collect();
    let n = out.len() as f64;
    let d = out.first().map_or(0, Vec::len);
    for j in 0..d {
        let mean = out.iter().map(|r| r[j]).sum::<f64>() / n;
        out.iter_mut().for_each(|r| r[j] -= mean);
    }
    out
}

/// Pair counts `(near, mid_near, further)` for `n` points. When the three
/// classes together would need `n` or more partners per point, the counts
/// are re-derived from `n` and the configured ratios.
fn pair_counts(n: usize, cfg: &PacmapConfig) -> (usize, usize, usize) {
    let n_near = cfg.n_neighbors.min(n - 1);
    let n_mid = ((cfg.n_neighbors as f64 * cfg.mid_near_ratio).round() as usize).min(n - 1);
    let n_far = ((cfg.n_neighbors as f64 * cfg.further_pair_ratio).round() as usize).min(n - 1 - n_near);
    if n_near + n_mid + n_far < n {
        return (n_near, n_mid, n_far);
    }
    let base = n as f64 / (1.0 + cfg.mid_near_ratio + cfg.further_pair_ratio);
    (
        (base as usize).max(1),
        (base * cfg.mid_near_ratio) as usize,
        ((base * cfg.further_pair_ratio) as usize).max(1),
    )
}

fn build_pairs(x: &[Vec<f64>], cfg: &PacmapConfig, rng: &mut ChaCha8Rng) -> PairSet {
    let n = x.len();
    let (n_near, n_mid, n_far) = pair_counts(n, cfg);
    let n_extra = (n_near + 50).min(n - 1);

    // Exact k-NN with a generous candidate list.
    let knn: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let mut cand: Vec<(usize, f64)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (j, squared_distance(&x[i], &x[j]).sqrt()))
                .collect();
            cand.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            cand.truncate(n_extra);
            cand
        })
        .collect();
    // Local scale: mean distance to the 4th..6th neighbors.
    let sigma: Vec<f64> = knn
        .iter()
        .map(|c| {
            let tail = &c[c.len().min(3)..c.len().min(6)];
            let s = if tail.is_empty() {
                c.last().map_or(0.0, |&(_, d)| d)
            } else {
                tail.iter().map(|&(_, d)| d).sum::<f64>() / tail.len() as f64
            };
            s.max(1e-10)
        })
        .collect();

    let mut pairs = PairSet::default();
    let mut neighbor_sets: Vec<Vec<usize>> = Vec::with_capacity(n);
    for (i, cand) in knn.iter().enumerate() {
        let mut scaled: Vec<(usize, f64)> = cand
            .iter()
            .map(|&(j, d)| (j, d * d / sigma[i] / sigma[j]))
            .collect();
        scaled.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let chosen: Vec<usize> = scaled.iter().take(n_near).map(|&(j, _)| j).collect();
        pairs.near.extend(chosen.iter().map(|&j| (i, j)));
        neighbor_sets.push(chosen);
    }

    for i in 0..n {
        let mut picked: Vec<usize> = Vec::with_capacity(n_mid);
        for _ in 0..n_mid {
            let mut pool: Vec<usize> = (0..n).filter(|&j| j != i && !picked.contains(&j)).collect();
            if pool.is_empty() {
                break;
            }
            let take = MID_NEAR_CANDIDATES.min(pool.len());
            let (sample, _) = pool.partial_shuffle(rng, take);
            sample.sort_by(|&a, &b| {
                squared_distance(&x[i], &x[a])
                    .total_cmp(&squared_distance(&x[i], &x[b]))
                    .then(a.cmp(&b))
            });
            picked.push(sample[1.min(sample.len() - 1)]);
        }
        pairs.mid_near.extend(picked.into_iter().map(|j| (i, j)));
    }

    for (i, near) in neighbor_sets.iter().enumerate() {
        let mut pool: Vec<usize> = (0..n).filter(|&j| j != i && !near.contains(&j)).collect();
        let take = n_far.min(pool.len());
        let (chosen, _) = pool.partial_shuffle(rng, take);
        let mut chosen = chosen.to_vec();
        chosen.sort_unstable();
        pairs.further.extend(chosen.into_iter().map(|j| (i, j)));
    }
    pairs
}

/// Objective and gradient of the three pair classes.
fn gradient(y: &[[f64; 2]], pairs: &PairSet, w: PairWeights, grad: &mut [[f64; 2]]) -> f64 {
    grad.iter_mut().for_each(|g| *g = [0.0, 0.0]);
    let mut loss = 0.0;
    let mut attract = |list: &[(usize, usize)], weight: f64, offset: f64, grad: &mut [[f64; 2]]| {
        if weight == 0.0 {
            return;
        }
        for &(i, j) in list {
            let diff = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
            let d = 1.0 + diff[0] * diff[0] + diff[1] * diff[1];
            loss += weight * d / (offset + d);
            let coeff = weight * 2.0 * offset / ((offset + d) * (offset + d));
            for k in 0..2 {
                grad[i][k] += coeff * diff[k];
                grad[j][k] -= coeff * diff[k];
            }
        }
    };
    attract(&pairs.near, w.near, 10.0, grad);
    attract(&pairs.mid_near, w.mid_near, 10_000.0, grad);
    for &(i, j) in &pairs.further {
        let diff = [y[i][0] - y[j][0], y[i][1] - y[j][1]];
        let d = 1.0 + diff[0] * diff[0] + diff[1] * diff[1];
        loss += w.further / (1.0 + d);
        let coeff = w.further * 2.0 / ((1.0 + d) * (1.0 + d));
        for k in 0..2 {
            grad[i][k] -= coeff * diff[k];
            grad[j][k] += coeff * diff[k];
        }
    }
    loss
}

struct Optimized {
    coords: Vec<[f64; 2]>,
    #[cfg_attr(not(test), allow(dead_code))]
    initial: Vec<[f64; 2]>,
    loss_history: Vec<f64>,
    #[cfg_attr(not(test), allow(dead_code))]
    pairs: PairSet,
}

fn optimize(x: &[Vec<f64>], cfg: &PacmapConfig, seed: u64) -> Optimized {
    let x = preprocess(x);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pairs = build_pairs(&x, cfg, &mut rng);

    let (pcs, _) = principal_components(&x, 2);
    let mut y: Vec<[f64; 2]> = pcs.iter().map(|r| [0.01 * r[0], 0.01 * r[1]]).collect();
    let initial = y.clone();

    let mut grad = vec![[0.0; 2]; y.len()];
    let mut m = vec![[0.0; 2]; y.len()];
    let mut v = vec![[0.0; 2]; y.len()];
    let mut loss_history = Vec::with_capacity(cfg.total_iters());
    for itr in 0..cfg.total_iters() {
        let loss = gradient(&y, &pairs, cfg.weights(itr), &mut grad);
        loss_history.push(loss);
        let t = (itr + 1) as i32;
        let lr_t = cfg.learning_rate * (1.0 - ADAM_BETA2.powi(t)).sqrt() / (1.0 - ADAM_BETA1.powi(t));
        for p in 0..y.len() {
            for k in 0..2 {
                let g = grad[p][k];
                m[p][k] += (1.0 - ADAM_BETA1) * (g - m[p][k]);
                v[p][k] += (1.0 - ADAM_BETA2) * (g * g - v[p][k]);
                y[p][k] -= lr_t * m[p][k] / (v[p][k].sqrt() + ADAM_EPS);
            }
        }
    }
    Optimized {
        coords: y,
        initial,
        loss_history,
        pairs,
    }
}

/// Projects the embedding to 2D with PaCMAP.
///
/// Exact duplicate vectors are collapsed before optimization and share one
/// output coordinate. With fewer than 4 distinct vectors PaCMAP has no
/// neighborhood to work with; the first two principal components are
/// returned instead and `notice` says so.
pub fn pacmap_project(emb: &GroupEmbedding, seed: u64, cfg: &PacmapConfig) -> Result<Projection> {
    if cfg.n_neighbors == 0 || cfg.total_iters() == 0 {
        return Err(Error::Config("PaCMAP needs n_neighbors >= 1 and at least one iteration".into()));
    }
    let rows = emb.vectors();
    if rows.iter().flatten().any(|x| !x.is_finite()) {
        return Err(Error::Config("embedding contains non-finite values".into()));
    }
    let mut unique_of: HashMap<Vec<u64>, usize> = HashMap::new();
    let mut unique: Vec<Vec<f64>> = Vec::new();
    let slot: Vec<usize> = rows
        .iter()
        .map(|r| {
            let key: Vec<u64> = r.iter().map(|x| (x + 0.0).to_bits()).collect();
            *unique_of.entry(key).or_insert_with(|| {
                unique.push(r.clone());
                unique.len() - 1
            })
        })
        .collect();

    let (coords, loss_history, notice) = if unique.len() < 4 {
        let msg = format!(
            "{} distinct points are too few for PaCMAP; using PCA-2D",
            unique.len()
        );
        log::warn!("{msg}");
        let (pcs, _) = principal_components(&unique, 2);
        (pcs.into_iter().map(|r| [r[0], r[1]]).collect::<Vec<_>>(), Vec::new(), Some(msg))
    } else {
        let out = optimize(&unique, cfg, seed);
        (out.coords, out.loss_history, None)
    };
    Ok(Projection {
        ids: emb.ids().to_vec(),
        coords: slot.iter().map(|&s| coords[s]).collect(),
        loss_history,
        notice,
    })
}

/// Centered projection of all points onto the first principal axis of the
/// 2D cloud. The sign is fixed so that, scanning groups in id order, the
/// first one off the mean lands on the positive side.
pub fn pca_axis(coords: &BTreeMap<GroupId, [f64; 2]>) -> Result<BTreeMap<GroupId, f64>> {
    if coords.len() < 2 {
        return Err(Error::Config("alluvial axis needs at least 2 points".into()));
    }
    let rows: Vec<Vec<f64>> = coords.values().map(|c| c.to_vec()).collect();
    let (pcs, values) = principal_components(&rows, 1);
    if values[0] <= 0.0 {
        return Ok(coords.keys().map(|&g| (g, 0.0)).collect());
    }
    let mut axis: Vec<f64> = pcs.into_iter().map(|r| r[0]).collect();
    let scale = axis.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if let Some(first) = axis.iter().find(|x| x.abs() > 1e-9 * scale) {
        if *first < 0.0 {
            axis.iter_mut().for_each(|x| *x = -*x);
        }
    }
    Ok(coords.keys().copied().zip(axis).collect())
}

/// Final per-group layout: 2D chronophotographic position and 1D alluvial
/// coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupLayout {
    pub coords2d: BTreeMap<GroupId, [f64; 2]>,
    pub alluvial1d: BTreeMap<GroupId, f64>,
}

impl GroupLayout {
    pub fn from_projection(projection: &Projection) -> Result<Self> {
        let coords2d = projection.as_map();
        let alluvial1d = pca_axis(&coords2d)?;
        Ok(GroupLayout {
            coords2d,
            alluvial1d,
        })
    }

    /// Dump as `phase,group,x,y,alluvial`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["phase", "group", "x", "y", "alluvial"])?;
        for (gid, c) in &self.coords2d {
            w.write_record([
                gid.phase.to_string(),
                gid.local_id.to_string(),
                c[0].to_string(),
                c[1].to_string(),
                self.alluvial1d.get(gid).copied().unwrap_or(f64::NAN).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Member-count-weighted mean position of each phase's groups.
pub fn phase_centroids(layout: &GroupLayout, seq: &MetaGraphSequence) -> Result<Vec<[f64; 2]>> {
    seq.metas()
        .iter()
        .map(|meta| {
            let mut acc = [0.0, 0.0];
            let mut total = 0.0;
            for gid in meta.group_ids() {
                let c = layout
                    .coords2d
                    .get(&gid)
                    .ok_or_else(|| Error::Config(format!("layout has no coordinates for {gid}")))?;
                let w = seq.group_size(gid) as f64;
                acc[0] += w * c[0];
                acc[1] += w * c[1];
                total += w;
            }
            Ok(if total > 0.0 {
                [acc[0] / total, acc[1] / total]
            } else {
                [0.0, 0.0]
            })
        })
        .collect()
}

/// Draws `n` points around each center with isotropic Gaussian noise.
#[doc(hidden)]
pub fn gaussian_blobs(centers: &[Vec<f64>], n: usize, sigma: f64, seed: u64) -> Vec<(usize, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = move || -> f64 { rng.sample(StandardNormal) };
    centers
        .iter()
        .enumerate()
        .flat_map(|(label, c)| {
            (0..n)
                .map(|_| (label, c.iter().map(|x| x + sigma * normal()).collect()))
                .collect::<Vec<_>>()
        })
        .collect()
}
