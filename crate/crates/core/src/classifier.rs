//! Cluster-frequency classifier: each cluster votes with the diagnosis
//! frequencies of its training tiles, a lesion averages the votes of its
//! tiles.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::{Assignment, ClusterModel};
use crate::error::{Error, Result};
use crate::feature_store::FeatureSet;
use crate::numeric::{format_sig, sig};

/// Two-sided 95% normal quantile.
pub const Z_95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityTable {
    pub labels: Vec<String>,
    /// Training tiles per cluster.
    pub support: Vec<usize>,
    #[serde(serialize_with = "sig::matrix")]
    pub rows: Vec<Vec<f64>>,
}

impl ProbabilityTable {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("table serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let t: Self = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        if t.rows.len() != t.support.len() || t.rows.iter().any(|r| r.len() != t.labels.len()) {
            return Err(Error::format(path, "table rows do not match labels and support"));
        }
        Ok(t)
    }
}

/// Diagnosis frequencies of the training tiles in every cluster. A cluster
/// without training tiles gets a uniform row.
pub fn build_probability_table(
    assignment: &Assignment,
    fs: &FeatureSet,
    k: usize,
) -> Result<ProbabilityTable> {
    if assignment.len() != fs.len() {
        return Err(Error::InvalidParameter(format!(
            "assignment has {} rows for {} records",
            assignment.len(),
            fs.len()
        )));
    }
    let labels = fs.label_set().to_vec();
    let mut counts = vec![vec![0usize; labels.len()]; k];
    for (r, &c) in fs.records().iter().zip(&assignment.clusters) {
        if c >= k {
            return Err(Error::InvalidParameter(format!(
                "cluster {c} out of range for k={k}"
            )));
        }
        let l = fs.label_index(&r.diagnosis).expect("validated label");
        counts[c][l] += 1;
    }
    let support: Vec<usize> = counts.iter().map(|r| r.iter().sum()).collect();
    let rows = counts
        .iter()
        .zip(&support)
        .map(|(row, &n)| {
            if n == 0 {
                vec![1.0 / labels.len() as f64; labels.len()]
            } else {
                row.iter().map(|&c| c as f64 / n as f64).collect()
            }
        })
        .collect();
    Ok(ProbabilityTable {
        labels,
        support,
        rows,
    })
}

/// Index of the largest entry; ties go to the earliest.
pub fn argmax_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Mean probability vector over the tiles' nearest clusters and the top-1
/// label index. `None` for a lesion without tiles.
pub fn predict_lesion(
    tiles: &[&[f64]],
    model: &ClusterModel,
    table: &ProbabilityTable,
) -> Option<(usize, Vec<f64>)> {
    if tiles.is_empty() {
        return None;
    }
    let mut acc = vec![0.0; table.labels.len()];
    for t in tiles {
        let (c, _) = model.nearest(t);
        for (a, p) in acc.iter_mut().zip(&table.rows[c]) {
            *a += p;
        }
    }
    let n = tiles.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Some((argmax_first(&acc), acc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionPrediction {
    pub lesion_id: String,
    pub true_label: String,
    pub n_tiles: usize,
    /// `None` when the lesion had no tiles and is excluded from scoring.
    pub predicted: Option<(String, Vec<f64>)>,
}

/// Predicts every lesion (image) of `fs`, plus any `expected` lesions that
/// have no tiles at all, ordered by lesion id.
pub fn predict_all(
    fs: &FeatureSet,
    model: &ClusterModel,
    table: &ProbabilityTable,
    expected: &[(String, String)],
) -> Result<Vec<LesionPrediction>> {
    if fs.dim() != model.dim {
        return Err(Error::DimensionMismatch {
            expected: model.dim,
            found: fs.dim(),
        });
    }
    if table.rows.len() != model.k {
        return Err(Error::InvalidParameter(format!(
            "probability table has {} rows for k={}",
            table.rows.len(),
            model.k
        )));
    }
    if fs.label_set() != table.labels.as_slice() {
        return Err(Error::InvalidParameter(
            "test label set differs from the probability table".into(),
        ));
    }
    let records = fs.records();
    let groups = fs.image_groups();
    let mut lesions: BTreeMap<String, (String, Vec<usize>)> = BTreeMap::new();
    for (id, members) in &groups {
        let label = &records[members[0]].diagnosis;
        if let Some(m) = members.iter().find(|&&i| &records[i].diagnosis != label) {
            return Err(Error::InvalidFeatureSet(format!(
                "lesion {id:?} has tiles labeled {label:?} and {:?}",
                records[*m].diagnosis
            )));
        }
        lesions.insert(id.to_string(), (label.clone(), members.clone()));
    }
    for (id, label) in expected {
        match lesions.get(id) {
            Some((l, _)) if l != label => {
                return Err(Error::InvalidFeatureSet(format!(
                    "lesion {id:?} is {label:?} in the lesion list but {l:?} in the features"
                )))
            }
            Some(_) => {}
            None => {
                lesions.insert(id.clone(), (label.clone(), Vec::new()));
            }
        }
    }
    let lesions: Vec<_> = lesions.into_iter().collect();
    Ok(lesions
        .par_iter()
        .map(|(id, (label, members))| {
            let tiles: Vec<&[f64]> = members.iter().map(|&i| records[i].features.as_slice()).collect();
            LesionPrediction {
                lesion_id: id.clone(),
                true_label: label.clone(),
                n_tiles: tiles.len(),
                predicted: predict_lesion(&tiles, model, table).map(|(l, p)| (table.labels[l].clone(), p)),
            }
        })
        .collect())
}

pub fn predictions_to_csv(predictions: &[LesionPrediction], labels: &[String]) -> String {
    let mut out = String::from("lesion_id,true_label,predicted_label");
    for l in labels {
        out.push_str(&format!(",p_{l}"));
    }
    out.push('\n');
    for p in predictions {
        out.push_str(&format!("{},{},", p.lesion_id, p.true_label));
        match &p.predicted {
            Some((label, probs)) => {
                out.push_str(label);
                for v in probs {
                    out.push(',');
                    out.push_str(&format_sig(*v));
                }
            }
            None => out.push_str(&",".repeat(labels.len())),
        }
        out.push('\n');
    }
    out
}

/// Reads a predictions CSV back into (true label, predicted label or
/// `None` for excluded lesions).
/// (true label, predicted label) per lesion; `None` marks an excluded lesion.
pub type Outcomes = Vec<(String, Option<String>)>;

pub fn load_predictions(path: &Path) -> Result<(Vec<String>, Outcomes)> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    if headers.len() < 3
        || &headers[0] != "lesion_id"
        || &headers[1] != "true_label"
        || &headers[2] != "predicted_label"
    {
        return Err(Error::format(
            path,
            "header must start with lesion_id,true_label,predicted_label",
        ));
    }
    let labels = headers
        .iter()
        .skip(3)
        .map(|h| {
            h.strip_prefix("p_")
                .map(String::from)
                .ok_or_else(|| Error::format(path, format!("column {h:?} is not p_<label>")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::csv(path, e))?;
        let predicted = (!rec[2].is_empty()).then(|| rec[2].to_string());
        rows.push((rec[1].to_string(), predicted));
    }
    Ok((labels, rows))
}

/// Wilson score interval for a binomial proportion.
pub fn wilson_ci(successes: usize, n: usize, z: f64) -> Option<(f64, f64)> {
    if n == 0 {
        return None;
    }
    let n = n as f64;
    let p = successes as f64 / n;
    let z2 = z * z;
    let denom = 1.0 + z2 / n;
    let center = (p + z2 / (2.0 * n)) / denom;
    let half = z * (p * (1.0 - p) / n + z2 / (4.0 * n * n)).sqrt() / denom;
    Some(((center - half).max(0.0), (center + half).min(1.0)))
}

/// Per-class recall from confusion counts (rows = truth); `None` for a class
/// absent from the ground truth.
pub fn per_class_recall(counts: &[Vec<usize>]) -> Vec<Option<f64>> {
    counts
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[i] as f64 / total as f64)
        })
        .collect()
}

/// Unweighted mean of the recalls of classes present in the ground truth.
pub fn mean_recall(counts: &[Vec<usize>]) -> Option<f64> {
    let present: Vec<f64> = per_class_recall(counts).into_iter().flatten().collect();
    (!present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64)
}

pub fn row_proportions(counts: &[Vec<usize>]) -> Vec<Vec<f64>> {
    counts
        .iter()
        .map(|row| {
            let total: usize = row.iter().sum();
            row.iter()
                .map(|&c| if total == 0 { 0.0 } else { c as f64 / total as f64 })
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub labels: Vec<String>,
    pub n_lesions: usize,
    pub n_scored: usize,
    pub n_excluded: usize,
    #[serde(serialize_with = "sig::f64")]
    pub accuracy: f64,
    #[serde(serialize_with = "sig::pair")]
    pub accuracy_ci95: (f64, f64),
    pub accuracy_ci_method: String,
    #[serde(serialize_with = "sig::f64")]
    pub mean_recall: f64,
    pub per_class_recall: Vec<Option<f64>>,
    pub confusion_counts: Vec<Vec<usize>>,
    #[serde(serialize_with = "sig::matrix")]
    pub confusion_proportions: Vec<Vec<f64>>,
}

impl EvaluationResult {
    pub fn to_json(&self) -> String {
        let mut copy = self.clone();
        copy.per_class_recall = copy
            .per_class_recall
            .iter()
            .map(|r| r.map(crate::numeric::round_sig))
            .collect();
        serde_json::to_string_pretty(&copy).expect("evaluation serializes") + "\n"
    }
}

/// Scores (true label, predicted label) pairs; `None` predictions are
/// excluded lesions.
pub fn evaluate(labels: &[String], outcomes: &[(String, Option<String>)]) -> Result<EvaluationResult> {
    let index = |l: &str| {
        labels
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::InvalidParameter(format!("label {l:?} not in label set")))
    };
    let mut counts = vec![vec![0usize; labels.len()]; labels.len()];
    let mut excluded = 0;
    for (truth, predicted) in outcomes {
        let t = index(truth)?;
        match predicted {
            Some(p) => counts[t][index(p)?] += 1,
            None => excluded += 1,
        }
    }
    let scored = outcomes.len() - excluded;
    if scored == 0 {
        return Err(Error::Empty("no scored lesions".into()));
    }
    let correct: usize = (0..labels.len()).map(|i| counts[i][i]).sum();
    Ok(EvaluationResult {
        labels: labels.to_vec(),
        n_lesions: outcomes.len(),
        n_scored: scored,
        n_excluded: excluded,
        accuracy: correct as f64 / scored as f64,
        accuracy_ci95: wilson_ci(correct, scored, Z_95).expect("scored > 0"),
        accuracy_ci_method: "wilson".into(),
        mean_recall: mean_recall(&counts).expect("scored > 0"),
        per_class_recall: per_class_recall(&counts),
        confusion_proportions: row_proportions(&counts),
        confusion_counts: counts,
    })
}

pub fn evaluate_predictions(predictions: &[LesionPrediction], labels: &[String]) -> Result<EvaluationResult> {
    let outcomes: Vec<(String, Option<String>)> = predictions
        .iter()
        .map(|p| (p.true_label.clone(), p.predicted.as_ref().map(|(l, _)| l.clone())))
        .collect();
    evaluate(labels, &outcomes)
}
