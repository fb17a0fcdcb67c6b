//! Cluster-count selection.
//!
//! Two selectors work on a sweep over k: the knee of the cosine-distortion
//! curve (Kneedle, sensitivity 1) and the minimum of the compactness score W.
//!
//! For image `q` with tiles `t_1..t_L` landing in the `K` distinct clusters
//! `c_1..c_K`, out of `n_clst` clusters in total:
//!
//! ```text
//! w_q = K / min(n_clst, L) * sum_j cosDst(mean(c_1..c_K), t_j)
//! W   = mean over images of w_q
//! ```
//!
//! Lower W is better: the first factor penalizes spreading one image's tiles
//! across many clusters and the sum penalizes tiles far from the common
//! center of their clusters. The mean of centroids is used as is, without
//! re-normalization.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{cosine_distance_sq_norms, fit_kmeans, Assignment, ClusterModel, KMeansParams};
use crate::error::{Error, Result};
use crate::feature_store::FeatureSet;
use crate::numeric::{dot, format_sig, sig};

/// Minimum curve length accepted by the elbow selector.
pub const MIN_ELBOW_POINTS: usize = 5;
/// Kneedle sensitivity.
pub const KNEEDLE_SENSITIVITY: f64 = 1.0;
/// Relative inertia increase between consecutive k that gets flagged.
pub const INERTIA_INCREASE_FLAG: f64 = 0.05;

/// The tiles of one image and the clusters they were assigned to.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTileGroup {
    pub image_id: String,
    /// Record indices into the feature set.
    pub members: Vec<usize>,
    pub clusters: BTreeSet<usize>,
}

fn check_alignment(fs: &FeatureSet, model: &ClusterModel, assignment: &Assignment) -> Result<()> {
    if assignment.len() != fs.len() {
        return Err(Error::InvalidParameter(format!(
            "assignment covers {} tiles, feature set has {}",
            assignment.len(),
            fs.len()
        )));
    }
    if fs.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            found: fs.dim(),
        });
    }
    for (r, t) in fs.records().iter().zip(&assignment.tile_ids) {
        if &r.tile_id != t {
            return Err(Error::InvalidParameter(format!(
                "assignment order differs from feature set at tile {:?}",
                r.tile_id
            )));
        }
    }
    if let Some(c) = assignment.clusters.iter().find(|c| **c >= model.k) {
        return Err(Error::InvalidParameter(format!(
            "cluster index {c} out of range for k={}",
            model.k
        )));
    }
    Ok(())
}

pub fn image_tile_groups(fs: &FeatureSet, assignment: &Assignment) -> Vec<ImageTileGroup> {
    fs.image_groups()
        .into_iter()
        .map(|(image_id, members)| ImageTileGroup {
            image_id: image_id.to_owned(),
            clusters: members.iter().map(|i| assignment.clusters[*i]).collect(),
            members,
        })
        .collect()
}

/// Per-image contributions `w_q`, images in lexicographic order.
pub fn compute_w_per_image(
    fs: &FeatureSet,
    model: &ClusterModel,
    assignment: &Assignment,
) -> Result<Vec<(String, f64)>> {
    check_alignment(fs, model, assignment)?;
    let n_clst = model.k;
    let mut out = Vec::new();
    for group in image_tile_groups(fs, assignment) {
        let k_q = group.clusters.len();
        let l_q = group.members.len();
        let mut center = vec![0.0; model.dim];
        for &c in &group.clusters {
            for (m, v) in center.iter_mut().zip(&model.centroids[c]) {
                *m += v;
            }
        }
        center.iter_mut().for_each(|m| *m /= k_q as f64);
        let cc = dot(&center, &center);
        if cc == 0.0 {
            return Err(Error::ZeroMeanCentroid {
                image_id: group.image_id,
            });
        }
        let mut spread = 0.0;
        for &i in &group.members {
            let t = &fs.records()[i].features;
            let tt = dot(t, t);
            if tt == 0.0 {
                return Err(Error::ZeroVector {
                    tile_id: fs.records()[i].tile_id.clone(),
                });
            }
            spread += cosine_distance_sq_norms(&center, cc, t, tt);
        }
        let factor = k_q as f64 / n_clst.min(l_q) as f64;
        out.push((group.image_id, factor * spread));
    }
    Ok(out)
}

/// The compactness score W of a clustering.
pub fn compute_w(fs: &FeatureSet, model: &ClusterModel, assignment: &Assignment) -> Result<f64> {
    let per_image = compute_w_per_image(fs, model, assignment)?;
    if per_image.is_empty() {
        return Err(Error::Empty("no images to score".into()));
    }
    Ok(per_image.iter().map(|(_, w)| w).sum::<f64>() / per_image.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SweepParams {
    pub k_min: usize,
    pub k_max: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl SweepParams {
    pub const DEFAULT_K_MIN: usize = 2;
    pub const DEFAULT_K_MAX: usize = 50;

    pub fn new(k_min: usize, k_max: usize, seed: u64) -> Self {
        Self {
            k_min,
            k_max,
            seed,
            max_iter: KMeansParams::DEFAULT_MAX_ITER,
            tol: KMeansParams::DEFAULT_TOL,
        }
    }

    /// k-means parameters for one k; each k gets seed `seed + k`.
    pub fn kmeans_params(&self, k: usize) -> KMeansParams {
        KMeansParams {
            k,
            seed: self.seed.wrapping_add(k as u64),
            max_iter: self.max_iter,
            tol: self.tol,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Elbow,
    Compactness,
    Both,
}

impl SelectionMethod {
    pub fn includes_elbow(self) -> bool {
        matches!(self, SelectionMethod::Elbow | SelectionMethod::Both)
    }

    pub fn includes_compactness(self) -> bool {
        matches!(self, SelectionMethod::Compactness | SelectionMethod::Both)
    }
}

impl fmt::Display for SelectionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionMethod::Elbow => "elbow",
            SelectionMethod::Compactness => "compactness",
            SelectionMethod::Both => "both",
        })
    }
}

impl std::str::FromStr for SelectionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbow" => Ok(SelectionMethod::Elbow),
            "compactness" => Ok(SelectionMethod::Compactness),
            "both" => Ok(SelectionMethod::Both),
            other => Err(Error::InvalidParameter(format!(
                "unknown selection method {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KSweepResult {
    pub k_values: Vec<usize>,
    #[serde(serialize_with = "sig::vec")]
    pub inertia_curve: Vec<f64>,
    #[serde(serialize_with = "sig::vec")]
    pub w_curve: Vec<f64>,
    pub chosen_elbow_k: Option<usize>,
    pub chosen_compactness_k: Option<usize>,
    /// Number of images in the swept set.
    #[serde(rename = "M")]
    pub m_images: usize,
    /// k values whose inertia rose more than 5% over the previous k.
    pub inertia_increases: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub elbow_diagnostic: Option<String>,
}

impl KSweepResult {
    /// Fills the chosen-k fields for the requested method(s).
    pub fn select(&mut self, method: SelectionMethod) -> Result<()> {
        if method.includes_elbow() {
            match select_k_elbow(&self.k_values, &self.inertia_curve) {
                Ok(Knee::Found(k)) => {
                    self.chosen_elbow_k = Some(k);
                    self.elbow_diagnostic = None;
                }
                Ok(Knee::NotFound(reason)) => {
                    self.chosen_elbow_k = None;
                    self.elbow_diagnostic = Some(reason);
                }
                Err(e) => {
                    self.chosen_elbow_k = None;
                    self.elbow_diagnostic = Some(e.to_string());
                }
            }
        }
        if method.includes_compactness() {
            self.chosen_compactness_k = Some(select_k_compactness(&self.k_values, &self.w_curve)?);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("sweep serializes")
    }

    /// `k,inertia,W` rows for plotting.
    pub fn to_csv_string(&self) -> String {
        let mut out = String::from("k,inertia,W\n");
        for ((k, i), w) in self.k_values.iter().zip(&self.inertia_curve).zip(&self.w_curve) {
            out.push_str(&format!("{k},{},{}\n", format_sig(*i), format_sig(*w)));
        }
        out
    }

    pub fn save(&self, json_path: impl AsRef<Path>, csv_path: impl AsRef<Path>) -> Result<()> {
        let (jp, cp) = (json_path.as_ref(), csv_path.as_ref());
        fs::write(jp, self.to_json() + "\n").map_err(|e| Error::io(jp, e))?;
        fs::write(cp, self.to_csv_string()).map_err(|e| Error::io(cp, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

/// Fits one model per k and records inertia and W for each.
pub fn sweep_k(fs: &FeatureSet, params: &SweepParams) -> Result<KSweepResult> {
    let n = fs.len();
    if params.k_min < 1 || params.k_min > params.k_max || params.k_max > n {
        return Err(Error::InvalidParameter(format!(
            "k range [{}, {}] not within [1, {n}]",
            params.k_min, params.k_max
        )));
    }
    let k_values: Vec<usize> = (params.k_min..=params.k_max).collect();
    let points: Vec<(f64, f64)> = k_values
        .par_iter()
        .map(|&k| {
            let fit = fit_kmeans(fs, &params.kmeans_params(k))?;
            let w = compute_w(fs, &fit.model, &fit.assignment)?;
            Ok((fit.model.inertia, w))
        })
        .collect::<Result<_>>()?;
    let (inertia_curve, w_curve): (Vec<f64>, Vec<f64>) = points.into_iter().unzip();

    let inertia_increases: Vec<usize> = inertia_curve
        .windows(2)
        .zip(&k_values[1..])
        .filter(|(w, _)| w[1] > w[0] * (1.0 + INERTIA_INCREASE_FLAG))
        .map(|(_, k)| *k)
        .collect();
    if !inertia_increases.is_empty() {
        log::info!("inertia rose by more than 5% at k = {inertia_increases:?}");
    }
    Ok(KSweepResult {
        k_values,
        inertia_curve,
        w_curve,
        chosen_elbow_k: None,
        chosen_compactness_k: None,
        m_images: fs.image_count(),
        inertia_increases,
        elbow_diagnostic: None,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub enum Knee {
    Found(usize),
    NotFound(String),
}

fn check_curve(k_values: &[usize], curve: &[f64]) -> Result<()> {
    if k_values.len() != curve.len() {
        return Err(Error::InvalidParameter(format!(
            "{} k values but {} curve points",
            k_values.len(),
            curve.len()
        )));
    }
    if let Some(index) = curve.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFiniteCurve { index });
    }
    if k_values.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidParameter(
            "k values must be strictly increasing".into(),
        ));
    }
    Ok(())
}

fn min_max_scale(values: &[f64]) -> Option<Vec<f64>> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    (hi > lo).then(|| values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

/// Knee of a decreasing convex distortion curve (Kneedle, offline mode).
pub fn select_k_elbow(k_values: &[usize], curve: &[f64]) -> Result<Knee> {
    if curve.len() < MIN_ELBOW_POINTS {
        return Err(Error::TooFewPoints {
            found: curve.len(),
            required: MIN_ELBOW_POINTS,
        });
    }
    check_curve(k_values, curve)?;
    let n = curve.len();
    if curve[n - 1] >= curve[0] {
        return Ok(Knee::NotFound("curve does not decrease overall".into()));
    }
    let xs: Vec<f64> = k_values.iter().map(|k| *k as f64).collect();
    let x_norm = min_max_scale(&xs).expect("strictly increasing k");
    let Some(y_norm) = min_max_scale(curve) else {
        return Ok(Knee::NotFound("curve is flat".into()));
    };
    // Flip the decreasing convex curve into an increasing concave one and
    // take its difference from the diagonal.
    let diff: Vec<f64> = y_norm.iter().zip(&x_norm).map(|(y, x)| (1.0 - y) - x).collect();

    let neighbours = |i: usize| (diff[i.saturating_sub(1)], diff[(i + 1).min(n - 1)]);
    let is_max = |i: usize| {
        let (l, r) = neighbours(i);
        diff[i] >= l && diff[i] >= r
    };
    let is_min = |i: usize| {
        let (l, r) = neighbours(i);
        diff[i] <= l && diff[i] <= r
    };
    let step = KNEEDLE_SENSITIVITY * (x_norm[n - 1] - x_norm[0]) / (n - 1) as f64;

    let first_max = (0..n).find(|i| is_max(*i)).expect("a global maximum exists");
    let mut threshold = 0.0;
    let mut threshold_index = first_max;
    for i in first_max..n - 1 {
        if is_max(i) {
            threshold = diff[i] - step;
            threshold_index = i;
        }
        if is_min(i) {
            threshold = 0.0;
        }
        if diff[i + 1] < threshold {
            return Ok(Knee::Found(k_values[threshold_index]));
        }
    }
    Ok(Knee::NotFound(
        "difference curve never falls below a threshold".into(),
    ))
}

/// The k with the lowest W; ties go to the smallest k.
pub fn select_k_compactness(k_values: &[usize], w_curve: &[f64]) -> Result<usize> {
    if w_curve.is_empty() {
        return Err(Error::Empty("W curve".into()));
    }
    check_curve(k_values, w_curve)?;
    let mut best = 0;
    for (i, w) in w_curve.iter().enumerate() {
        if *w < w_curve[best] {
            best = i;
        }
    }
    Ok(k_values[best])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_store::TileRecord;

    fn fs_of(rows: &[(&str, &str, Vec<f64>)]) -> FeatureSet {
        let dim = rows[0].2.len();
        FeatureSet::from_records(
            dim,
            vec!["A".into()],
            rows.iter()
                .map(|(t, i, f)| TileRecord {
                    tile_id: (*t).into(),
                    image_id: (*i).into(),
                    diagnosis: "A".into(),
                    x: 0,
                    y: 0,
                    features: f.clone(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn model(centroids: Vec<Vec<f64>>) -> ClusterModel {
        ClusterModel {
            k: centroids.len(),
            dim: centroids[0].len(),
            seed: 0,
            iterations_run: 0,
            inertia: 0.0,
            centroids,
        }
    }

    fn assignment(fs: &FeatureSet, clusters: Vec<usize>) -> Assignment {
        Assignment {
            tile_ids: fs.records().iter().map(|r| r.tile_id.clone()).collect(),
            distances: vec![0.0; clusters.len()],
            clusters,
        }
    }

    #[test]
    fn w_zero_when_tiles_sit_on_their_centroid() {
        let fs = fs_of(&[("a", "i", vec![1.0, 0.0]), ("b", "i", vec![1.0, 0.0])]);
        let m = model(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        assert_eq!(compute_w(&fs, &m, &assignment(&fs, vec![0, 0])).unwrap(), 0.0);
    }

    #[test]
    fn w_hand_value_two_tiles_two_centroids() {
        let fs = fs_of(&[("a", "i", vec![1.0, 0.0]), ("b", "i", vec![0.0, 1.0])]);
        let m = model(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let w = compute_w(&fs, &m, &assignment(&fs, vec![0, 1])).unwrap();
        assert!((w - (2.0 - 2f64.sqrt())).abs() < 1e-12);
    }

    #[test]
    fn w_is_mean_over_images_and_errors_on_zero_center() {
        let fs = fs_of(&[
            ("a", "i1", vec![1.0, 0.0]),
            ("b", "i1", vec![0.0, 1.0]),
            ("c", "i2", vec![1.0, 0.0]),
        ]);
        let m = model(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let a = assignment(&fs, vec![0, 1, 0]);
        let per = compute_w_per_image(&fs, &m, &a).unwrap();
        let w = compute_w(&fs, &m, &a).unwrap();
        assert!((w - (per[0].1 + per[1].1) / 2.0).abs() < 1e-15);

        let m = model(vec![vec![1.0, 0.0], vec![-1.0, 0.0]]);
        let fs = fs_of(&[("a", "i", vec![1.0, 0.0]), ("b", "i", vec![-1.0, 0.0])]);
        assert!(matches!(
            compute_w(&fs, &m, &assignment(&fs, vec![0, 1])),
            Err(Error::ZeroMeanCentroid { .. })
        ));
    }

    #[test]
    fn w_single_cluster_reduces_to_direct_formula() {
        let fs = fs_of(&[
            ("a", "i", vec![1.0, 0.2, 0.1]),
            ("b", "i", vec![0.9, 0.3, 0.0]),
            ("c", "i", vec![0.7, -0.1, 0.4]),
        ]);
        let m = model(vec![
            vec![0.8, 0.1, 0.2],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 1.0, 1.0],
        ]);
        let w = compute_w(&fs, &m, &assignment(&fs, vec![0, 0, 0])).unwrap();
        let direct: f64 = fs
            .records()
            .iter()
            .map(|r| crate::clustering::cosine_distance(&m.centroids[0], &r.features).unwrap())
            .sum::<f64>()
            / 3.0;
        assert!((w - direct).abs() < 1e-15);
    }

    #[test]
    fn w_invariant_under_relabeling() {
        let fs = fs_of(&[
            ("a", "i1", vec![1.0, 0.2]),
            ("b", "i1", vec![0.1, 1.0]),
            ("c", "i2", vec![0.5, 0.5]),
            ("d", "i2", vec![-0.3, 1.0]),
        ]);
        let cents = vec![vec![1.0, 0.1], vec![0.2, 1.0], vec![0.6, 0.4]];
        let w1 = compute_w(&fs, &model(cents.clone()), &assignment(&fs, vec![0, 1, 2, 1])).unwrap();
        // permutation 0->2, 1->0, 2->1
        let permuted = vec![cents[1].clone(), cents[2].clone(), cents[0].clone()];
        let w2 = compute_w(&fs, &model(permuted), &assignment(&fs, vec![2, 0, 1, 0])).unwrap();
        assert!((w1 - w2).abs() < 1e-12);
    }

    #[test]
    fn elbow_examples() {
        let ks: Vec<usize> = (1..=6).collect();
        let curve = [100.0, 50.0, 30.0, 28.0, 27.0, 26.5];
        assert_eq!(select_k_elbow(&ks, &curve).unwrap(), Knee::Found(3));
        let linear: Vec<f64> = ks.iter().map(|k| 60.0 - 7.0 * *k as f64).collect();
        assert!(matches!(select_k_elbow(&ks, &linear).unwrap(), Knee::NotFound(_)));
        assert!(matches!(
            select_k_elbow(&[1, 2, 3], &[3.0, 2.0, 1.0]),
            Err(Error::TooFewPoints { found: 3, .. })
        ));
        assert!(matches!(
            select_k_elbow(&ks, &[1.0, f64::NAN, 1.0, 1.0, 1.0, 1.0]),
            Err(Error::NonFiniteCurve { index: 1 })
        ));
        assert!(matches!(
            select_k_elbow(&ks, &[5.0; 6]).unwrap(),
            Knee::NotFound(_)
        ));
    }

    #[test]
    fn compactness_examples() {
        assert_eq!(select_k_compactness(&[2, 3, 4], &[0.9, 0.4, 0.6]).unwrap(), 3);
        assert_eq!(select_k_compactness(&[2, 3, 4], &[0.5, 0.5, 0.5]).unwrap(), 2);
        assert!(matches!(
            select_k_compactness(&[2, 3], &[0.5, f64::INFINITY]),
            Err(Error::NonFiniteCurve { index: 1 })
        ));
        assert!(select_k_compactness(&[], &[]).is_err());
    }

    #[test]
    fn method_parse_round_trip() {
        for m in [
            SelectionMethod::Elbow,
            SelectionMethod::Compactness,
            SelectionMethod::Both,
        ] {
            assert_eq!(m.to_string().parse::<SelectionMethod>().unwrap(), m);
        }
    }
}
