//! Cosine-distance k-means.
//!
//! Lloyd iteration over unit-normalized feature vectors with a seeded
//! k-means++ initializer. Centroids are plain member means and are never
//! re-normalized; cosine distance ignores their norm, so assignments are
//! unaffected.
//!
//! Per-tile distance computation runs on the rayon pool. Every reduction
//! (inertia, centroid sums) is a sequential fold in record order, so results
//! do not depend on the number of worker threads.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::FeatureSet;
use crate::numeric::{dot, format_sig, norm, sig};

/// `1 - u·v / (‖u‖‖v‖)`, in `[0, 2]`.
pub fn cosine_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            found: v.len(),
        });
    }
    let (uu, vv) = (dot(u, u), dot(v, v));
    if uu == 0.0 || vv == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(cosine_distance_sq_norms(u, uu, v, vv))
}

/// Cosine distance given precomputed squared norms. A zero-norm operand is
/// treated as orthogonal to everything (distance 1).
#[inline]
pub(crate) fn cosine_distance_sq_norms(u: &[f64], uu: f64, v: &[f64], vv: f64) -> f64 {
    if uu == 0.0 || vv == 0.0 {
        return 1.0;
    }
    // sqrt(uu * vv) keeps identical vectors at exactly zero distance
    let sim = dot(u, v) / (uu * vv).sqrt();
    1.0 - sim.clamp(-1.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    /// Relative inertia improvement below which iteration stops.
    pub tol: f64,
}

impl KMeansParams {
    pub const DEFAULT_MAX_ITER: usize = 300;
    pub const DEFAULT_TOL: f64 = 1e-6;

    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: Self::DEFAULT_MAX_ITER,
            tol: Self::DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub k: usize,
    pub dim: usize,
    pub seed: u64,
    pub iterations_run: usize,
    /// Total cosine distance of the final assignment.
    #[serde(serialize_with = "sig::f64")]
    pub inertia: f64,
    #[serde(serialize_with = "sig::matrix")]
    pub centroids: Vec<Vec<f64>>,
}

impl ClusterModel {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: ClusterModel = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if model.centroids.len() != model.k || model.centroids.iter().any(|c| c.len() != model.dim) {
            return Err(Error::format(path, "centroid matrix does not match k x dim"));
        }
        Ok(model)
    }

    /// Nearest centroid of one vector; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let norms: Vec<f64> = self.centroids.iter().map(|c| dot(c, c)).collect();
        nearest_centroid(v, dot(v, v), &self.centroids, &norms)
    }
}

/// Per-tile cluster labels and distances, aligned with the record order of
/// the feature set they were computed on.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub tile_ids: Vec<String>,
    pub clusters: Vec<usize>,
    pub distances: Vec<f64>,
}

impl Assignment {
    pub fn len(&self) -> usize {
        self.clusters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clusters.is_empty()
    }

    pub fn cluster_of(&self, tile_id: &str) -> Option<usize> {
        self.tile_ids
            .iter()
            .position(|t| t == tile_id)
            .map(|i| self.clusters[i])
    }

    /// Member count per cluster index.
    pub fn cluster_sizes(&self, k: usize) -> Vec<usize> {
        let mut sizes = vec![0; k];
        for &c in &self.clusters {
            sizes[c] += 1;
        }
        sizes
    }

    pub fn inertia(&self) -> f64 {
        self.distances.iter().sum()
    }

    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("tile_id,cluster,distance\n");
        for ((t, c), d) in self.tile_ids.iter().zip(&self.clusters).zip(&self.distances) {
            out.push_str(&format!("{t},{c},{}\n", format_sig(*d)));
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_csv_string()).map_err(|e| Error::io(path, e))
    }

    /// Reads an assignment CSV and reorders it to match `fs`. Every tile of
    /// `fs` must appear exactly once.
    pub fn load(path: impl AsRef<Path>, fs: &FeatureSet) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut rows: HashMap<String, (usize, f64)> = HashMap::new();
        for (i, row) in reader.records().enumerate() {
            let row = row.map_err(|e| Error::csv(path, e))?;
            let bad = || Error::format(path, format!("row {}: malformed assignment row", i + 2));
            if row.len() != 3 {
                return Err(bad());
            }
            let cluster: usize = row[1].parse().map_err(|_| bad())?;
            let distance: f64 = row[2].parse().map_err(|_| bad())?;
            if rows.insert(row[0].to_owned(), (cluster, distance)).is_some() {
                return Err(Error::format(path, format!("duplicate tile {:?}", &row[0])));
            }
        }
        if rows.len() != fs.len() {
            return Err(Error::format(
                path,
                format!("{} assigned tiles but feature set has {}", rows.len(), fs.len()),
            ));
        }
        let mut out = Assignment {
            tile_ids: Vec::with_capacity(fs.len()),
            clusters: Vec::with_capacity(fs.len()),
            distances: Vec::with_capacity(fs.len()),
        };
        for r in fs.records() {
            let (c, d) = rows
                .get(&r.tile_id)
                .ok_or_else(|| Error::format(path, format!("tile {:?} has no assignment", r.tile_id)))?;
            out.tile_ids.push(r.tile_id.clone());
            out.clusters.push(*c);
            out.distances.push(*d);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub model: ClusterModel,
    pub assignment: Assignment,
    /// Inertia after each assignment pass; non-increasing.
    pub inertia_history: Vec<f64>,
}

fn nearest_centroid(v: &[f64], vv: f64, centroids: &[Vec<f64>], norms: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, (c, cc)) in centroids.iter().zip(norms).enumerate() {
        let d = cosine_distance_sq_norms(v, vv, c, *cc);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_points(points: &[&[f64]], point_norms: &[f64], centroids: &[Vec<f64>]) -> (Vec<usize>, Vec<f64>) {
    let norms: Vec<f64> = centroids.iter().map(|c| dot(c, c)).collect();
    points
        .par_iter()
        .zip(point_norms.par_iter())
        .map(|(p, pp)| nearest_centroid(p, *pp, centroids, &norms))
        .unzip()
}

/// Candidates drawn per greedy k-means++ step.
fn seeding_trials(k: usize) -> usize {
    2 + (k as f64).ln().floor() as usize
}

fn draw_weighted(weights: &[f64], total: f64, rng: &mut ChaCha8Rng) -> usize {
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut pick = None;
    for (i, w) in weights.iter().enumerate() {
        if *w <= 0.0 {
            continue;
        }
        acc += w;
        pick = Some(i);
        if acc > target {
            break;
        }
    }
    pick.expect("positive total weight")
}

/// Greedy k-means++: each step draws a few candidates with probability
/// proportional to their cosine distance from the chosen centroids and keeps
/// the one that lowers the total distance most.
fn kmeans_plus_plus(points: &[&[f64]], point_norms: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let trials = seeding_trials(k);
    let mut chosen = vec![false; n];
    let first = rng.random_range(0..n);
    chosen[first] = true;
    let mut centroids = vec![points[first].to_vec()];
    let mut weights: Vec<f64> = points
        .iter()
        .zip(point_norms)
        .map(|(p, pp)| cosine_distance_sq_norms(p, *pp, points[first], point_norms[first]))
        .collect();

    while centroids.len() < k {
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let candidates: Vec<usize> = (0..trials).map(|_| draw_weighted(&weights, total, rng)).collect();
            let updated: Vec<Vec<f64>> = candidates
                .par_iter()
                .map(|&c| {
                    points
                        .iter()
                        .zip(point_norms)
                        .zip(&weights)
                        .map(|((p, pp), w)| {
                            w.min(cosine_distance_sq_norms(p, *pp, points[c], point_norms[c]))
                        })
                        .collect()
                })
                .collect();
            let potentials: Vec<f64> = updated.iter().map(|u| u.iter().sum()).collect();
            let mut best = 0;
            for (i, p) in potentials.iter().enumerate() {
                if *p < potentials[best] {
                    best = i;
                }
            }
            weights = updated.into_iter().nth(best).expect("at least two trials");
            candidates[best]
        } else {
            // all remaining points coincide with a chosen centroid
            let free: Vec<usize> = (0..n).filter(|i| !chosen[*i]).collect();
            free[rng.random_range(0..free.len())]
        };
        chosen[pick] = true;
        centroids.push(points[pick].to_vec());
    }
    centroids
}

/// Moves the farthest point (among clusters with more than one member) into
/// each empty cluster and makes it that cluster's centroid.
fn repair_empty_clusters(
    points: &[&[f64]],
    labels: &mut [usize],
    dists: &mut [f64],
    centroids: &mut [Vec<f64>],
) -> bool {
    let k = centroids.len();
    let mut sizes = vec![0usize; k];
    for &l in labels.iter() {
        sizes[l] += 1;
    }
    let mut repaired = false;
    for j in 0..k {
        if sizes[j] > 0 {
            continue;
        }
        let mut far: Option<usize> = None;
        for i in 0..labels.len() {
            if sizes[labels[i]] < 2 {
                continue;
            }
            if far.is_none_or(|f| dists[i] > dists[f]) {
                far = Some(i);
            }
        }
        let Some(i) = far else { break };
        sizes[labels[i]] -= 1;
        sizes[j] = 1;
        labels[i] = j;
        dists[i] = 0.0;
        centroids[j] = points[i].to_vec();
        repaired = true;
    }
    repaired
}

fn member_means(points: &[&[f64]], labels: &[usize], k: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut sums = vec![vec![0.0; dim]; k];
    let mut counts = vec![0usize; k];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p.iter()) {
            *s += v;
        }
    }
    for (s, c) in sums.iter_mut().zip(&counts) {
        let c = *c as f64;
        s.iter_mut().for_each(|v| *v /= c);
    }
    sums
}

/// Fits cosine k-means to a normalized feature set.
pub fn fit_kmeans(fs: &FeatureSet, params: &KMeansParams) -> Result<KMeansFit> {
    if !fs.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let n = fs.len();
    let k = params.k;
    if k < 1 || k > n {
        return Err(Error::InvalidK { k, n });
    }
    if params.max_iter == 0 {
        return Err(Error::InvalidParameter("max_iter must be at least 1".into()));
    }
    let points = fs.vectors();
    let point_norms: Vec<f64> = points.iter().map(|p| dot(p, p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = kmeans_plus_plus(&points, &point_norms, k, &mut rng);

    let mut history = Vec::new();
    let mut previous: Option<Vec<usize>> = None;
    let mut iterations = 0;
    let (labels, dists) = loop {
        let (mut labels, mut dists) = assign_points(&points, &point_norms, &centroids);
        iterations += 1;
        let inertia: f64 = dists.iter().sum();
        let unchanged = previous.as_ref() == Some(&labels);
        let small_gain = history
            .last()
            .is_some_and(|prev: &f64| prev - inertia <= params.tol * prev.abs());
        history.push(inertia);
        if unchanged || small_gain || iterations >= params.max_iter {
            if repair_empty_clusters(&points, &mut labels, &mut dists, &mut centroids) {
                *history.last_mut().expect("non-empty") = dists.iter().sum();
            }
            break (labels, dists);
        }
        if repair_empty_clusters(&points, &mut labels, &mut dists, &mut centroids) {
            log::debug!("k={k}: re-seeded empty cluster(s) at iteration {iterations}");
        }
        centroids = member_means(&points, &labels, k, fs.dim());
        previous = Some(labels);
    };

    let inertia = dists.iter().sum();
    let model = ClusterModel {
        k,
        dim: fs.dim(),
        seed: params.seed,
        iterations_run: iterations,
        inertia,
        centroids,
    };
    let assignment = Assignment {
        tile_ids: fs.records().iter().map(|r| r.tile_id.clone()).collect(),
        clusters: labels,
        distances: dists,
    };
    Ok(KMeansFit {
        model,
        assignment,
        inertia_history: history,
    })
}

/// Nearest-centroid assignment of every record in `fs`.
pub fn assign(model: &ClusterModel, fs: &FeatureSet) -> Result<Assignment> {
    if fs.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            found: fs.dim(),
        });
    }
    let points = fs.vectors();
    if let Some(r) = fs.records().iter().find(|r| norm(&r.features) == 0.0) {
        return Err(Error::ZeroVector {
            tile_id: r.tile_id.clone(),
        });
    }
    let point_norms: Vec<f64> = points.iter().map(|p| dot(p, p)).collect();
    let (clusters, distances) = assign_points(&points, &point_norms, &model.centroids);
    Ok(Assignment {
        tile_ids: fs.records().iter().map(|r| r.tile_id.clone()).collect(),
        clusters,
        distances,
    })
}

/// Adjusted Rand index between two labelings of the same items.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings differ in length");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut table: HashMap<(usize, usize), u64> = HashMap::new();
    let mut rows: HashMap<usize, u64> = HashMap::new();
    let mut cols: HashMap<usize, u64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b) {
        *table.entry((x, y)).or_default() += 1;
        *rows.entry(x).or_default() += 1;
        *cols.entry(y).or_default() += 1;
    }
    let pairs = |m: u64| (m * m.saturating_sub(1) / 2) as f64;
    let index: f64 = table.values().map(|&m| pairs(m)).sum();
    let sum_rows: f64 = rows.values().map(|&m| pairs(m)).sum();
    let sum_cols: f64 = cols.values().map(|&m| pairs(m)).sum();
    let expected = sum_rows * sum_cols / pairs(n as u64);
    let max = 0.5 * (sum_rows + sum_cols);
    if max == expected {
        return 1.0;
    }
    (index - expected) / (max - expected)
}
