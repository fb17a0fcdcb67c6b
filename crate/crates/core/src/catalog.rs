//! Pattern catalog: representative tiles per cluster, informativeness,
//! human annotations and the static review report.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clustering::{Assignment, ClusterModel};
use crate::error::{Error, Result};
use crate::feature_store::FeatureSet;
use crate::numeric::{round_sig, sig};
use crate::stats::{mean_ci95, MeanCi};

/// Clusters with fewer tiles than this are non-informative.
pub const MIN_INFORMATIVE_SIZE: usize = 6;
pub const MAX_REPRESENTATIVES: usize = 7;

pub fn is_informative(size: usize, informative_override: Option<bool>) -> bool {
    informative_override.unwrap_or(size >= MIN_INFORMATIVE_SIZE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Representative {
    pub tile_id: String,
    pub distance: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub patterns: Vec<String>,
    pub redundant_with: Option<usize>,
    pub informative_override: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogEntry {
    pub diagnosis: String,
    pub cluster_index: usize,
    pub size: usize,
    pub informative: bool,
    pub representatives: Vec<Representative>,
    pub annotation: Option<Annotation>,
}

impl CatalogEntry {
    fn refresh_informative(&mut self) {
        let over = self.annotation.as_ref().and_then(|a| a.informative_override);
        self.informative = is_informative(self.size, over);
    }
}

/// One entry per cluster of `model`, built from the records of `fs` that
/// carry `diagnosis`.
///
/// Representatives are the members closest to their centroid, ties broken
/// by tile_id. Distances are stored at artifact precision so the JSON form
/// round-trips exactly.
pub fn build_catalog(
    fs: &FeatureSet,
    model: &ClusterModel,
    assignment: &Assignment,
    diagnosis: &str,
) -> Result<Vec<CatalogEntry>> {
    if assignment.len() != fs.len() {
        return Err(Error::InvalidParameter(format!(
            "assignment has {} rows for {} records",
            assignment.len(),
            fs.len()
        )));
    }
    let mut members: Vec<Vec<(f64, &str)>> = vec![Vec::new(); model.k];
    for ((r, &c), &d) in fs
        .records()
        .iter()
        .zip(&assignment.clusters)
        .zip(&assignment.distances)
    {
        if c >= model.k {
            return Err(Error::InvalidParameter(format!(
                "tile {:?} assigned to cluster {c} of {}",
                r.tile_id, model.k
            )));
        }
        if r.diagnosis == diagnosis {
            members[c].push((d, &r.tile_id));
        }
    }
    Ok(members
        .into_iter()
        .enumerate()
        .map(|(cluster_index, mut m)| {
            m.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
            let size = m.len();
            CatalogEntry {
                diagnosis: diagnosis.to_string(),
                cluster_index,
                size,
                informative: is_informative(size, None),
                representatives: m
                    .into_iter()
                    .take(MAX_REPRESENTATIVES)
                    .map(|(d, t)| Representative {
                        tile_id: t.to_string(),
                        distance: round_sig(d),
                    })
                    .collect(),
                annotation: None,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    pub entries: Vec<CatalogEntry>,
}

impl Catalog {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes") + "\n"
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn diagnoses(&self) -> Vec<String> {
        let set: BTreeSet<&str> = self.entries.iter().map(|e| e.diagnosis.as_str()).collect();
        set.into_iter().map(String::from).collect()
    }

    pub fn for_diagnosis<'a>(&'a self, diagnosis: &'a str) -> impl Iterator<Item = &'a CatalogEntry> {
        self.entries.iter().filter(move |e| e.diagnosis == diagnosis)
    }

    /// Fraction of a diagnosis' clusters marked redundant with another.
    pub fn redundancy_fraction(&self, diagnosis: &str) -> Option<f64> {
        let (mut total, mut redundant) = (0usize, 0usize);
        for e in self.for_diagnosis(diagnosis) {
            total += 1;
            redundant += usize::from(e.annotation.as_ref().is_some_and(|a| a.redundant_with.is_some()));
        }
        (total > 0).then(|| redundant as f64 / total as f64)
    }

    /// Attaches annotations from a CSV with columns
    /// `diagnosis,cluster_index,patterns,redundant_with,informative_override`.
    pub fn ingest_annotations(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let rows = load_annotations(path.as_ref())?;
        self.attach_annotations(rows)
    }

    pub fn attach_annotations(&mut self, rows: Vec<AnnotationRow>) -> Result<()> {
        let index: BTreeMap<(String, usize), usize> = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.diagnosis.clone(), e.cluster_index), i))
            .collect();
        let lookup = |d: &str, c: usize| {
            index
                .get(&(d.to_string(), c))
                .copied()
                .ok_or_else(|| Error::UnknownCluster {
                    diagnosis: d.to_string(),
                    cluster_index: c,
                })
        };
        let mut resolved = Vec::with_capacity(rows.len());
        for row in rows {
            let i = lookup(&row.diagnosis, row.cluster_index)?;
            if let Some(r) = row.annotation.redundant_with {
                lookup(&row.diagnosis, r)?;
            }
            resolved.push((i, row.annotation));
        }
        for (i, a) in resolved {
            self.entries[i].annotation = Some(a);
            self.entries[i].refresh_informative();
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnnotationRow {
    pub diagnosis: String,
    pub cluster_index: usize,
    pub annotation: Annotation,
}

#[derive(Deserialize)]
struct RawAnnotation {
    diagnosis: String,
    cluster_index: usize,
    #[serde(default)]
    patterns: String,
    #[serde(default)]
    redundant_with: Option<usize>,
    #[serde(default)]
    informative_override: Option<String>,
}

pub fn load_annotations(path: &Path) -> Result<Vec<AnnotationRow>> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::csv(path, e))?;
    let mut rows = Vec::new();
    for (line, raw) in reader.deserialize::<RawAnnotation>().enumerate() {
        let raw = raw.map_err(|e| Error::csv(path, e))?;
        let informative_override = match raw.informative_override.as_deref() {
            None | Some("") => None,
            Some(v) if v.eq_ignore_ascii_case("true") => Some(true),
            Some(v) if v.eq_ignore_ascii_case("false") => Some(false),
            Some(v) => {
                return Err(Error::format(
                    path,
                    format!("line {}: informative_override {v:?} is not true/false", line + 2),
                ))
            }
        };
        rows.push(AnnotationRow {
            diagnosis: raw.diagnosis,
            cluster_index: raw.cluster_index,
            annotation: Annotation {
                patterns: raw
                    .patterns
                    .split(';')
                    .map(str::trim)
                    .filter(|p| !p.is_empty())
                    .map(String::from)
                    .collect(),
                redundant_with: raw.redundant_with,
                informative_override,
            },
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosisSummary {
    pub diagnosis: String,
    pub clusters: usize,
    pub informative_clusters: usize,
    pub non_informative_clusters: usize,
    #[serde(serialize_with = "sig::f64")]
    pub non_informative_fraction: f64,
}

impl DiagnosisSummary {
    pub fn from_entries<'a>(diagnosis: &str, entries: impl IntoIterator<Item = &'a CatalogEntry>) -> Self {
        let (mut clusters, mut informative) = (0, 0);
        for e in entries {
            clusters += 1;
            informative += usize::from(e.informative);
        }
        let non_informative = clusters - informative;
        Self {
            diagnosis: diagnosis.to_string(),
            clusters,
            informative_clusters: informative,
            non_informative_clusters: non_informative,
            non_informative_fraction: if clusters == 0 {
                0.0
            } else {
                non_informative as f64 / clusters as f64
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub per_diagnosis: Vec<DiagnosisSummary>,
    pub mean_clusters: MeanCi,
    pub mean_informative_clusters: MeanCi,
    pub mean_non_informative_fraction: MeanCi,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CatalogSummary {
    pub methods: Vec<MethodSummary>,
}

impl CatalogSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn method(&self, name: &str) -> Option<&MethodSummary> {
        self.methods.iter().find(|m| m.method == name)
    }
}

/// Means with 95% t-intervals across diagnoses, one block per method.
pub fn summarize(catalogs: &BTreeMap<String, Catalog>) -> Result<CatalogSummary> {
    let mut methods = Vec::new();
    for (method, catalog) in catalogs {
        let per_diagnosis: Vec<DiagnosisSummary> = catalog
            .diagnoses()
            .iter()
            .map(|d| DiagnosisSummary::from_entries(d, catalog.for_diagnosis(d)))
            .collect();
        if per_diagnosis.is_empty() {
            return Err(Error::Empty(format!("method {method} has no diagnoses")));
        }
        let col = |f: fn(&DiagnosisSummary) -> f64| -> Vec<f64> { per_diagnosis.iter().map(f).collect() };
        methods.push(MethodSummary {
            method: method.clone(),
            mean_clusters: mean_ci95(&col(|s| s.clusters as f64))?,
            mean_informative_clusters: mean_ci95(&col(|s| s.informative_clusters as f64))?,
            mean_non_informative_fraction: mean_ci95(&col(|s| s.non_informative_fraction))?,
            per_diagnosis,
        });
    }
    Ok(CatalogSummary { methods })
}

/// Where representative tile images live.
#[derive(Debug, Clone, Default)]
pub enum TileSource {
    /// No images available; the report shows placeholders and one note.
    #[default]
    None,
    /// `<dir>/<tile_id>.png`.
    Directory(PathBuf),
    /// Explicit path per tile_id, e.g. from a tile manifest.
    Paths(BTreeMap<String, PathBuf>),
}

impl TileSource {
    fn locate(&self, tile_id: &str) -> Option<PathBuf> {
        match self {
            TileSource::None => None,
            TileSource::Directory(d) => Some(d.join(format!("{tile_id}.png"))),
            TileSource::Paths(m) => m.get(tile_id).cloned(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReportOutcome {
    pub pages: Vec<PathBuf>,
    pub warnings: Vec<String>,
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn href(from_dir: &Path, target: &Path) -> String {
    let rel = pathdiff::diff_paths(target, from_dir).unwrap_or_else(|| target.to_path_buf());
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

fn absolute(p: &Path) -> PathBuf {
    std::path::absolute(p).unwrap_or_else(|_| p.to_path_buf())
}

const STYLE: &str = "body{font-family:sans-serif;margin:1.5em}\
table{border-collapse:collapse}td,th{border:1px solid #ccc;padding:4px;vertical-align:top}\
.tile{width:96px;height:96px;margin:1px}\
.missing{display:inline-block;width:96px;height:96px;margin:1px;background:#eee;\
color:#999;font-size:10px;text-align:center;line-height:96px}\
.badge{padding:1px 6px;border-radius:3px;color:#fff}\
.yes{background:#2a7}.no{background:#c44}footer{margin-top:2em;color:#666}";

/// Renders one HTML page for a diagnosis.
pub fn render_diagnosis_page(
    diagnosis: &str,
    entries: &[&CatalogEntry],
    tiles: &TileSource,
    out_dir: &Path,
) -> (String, Vec<String>) {
    let out_abs = absolute(out_dir);
    let mut warnings = Vec::new();
    let mut html = String::new();
    let title = escape(diagnosis);
    let _ = write!(
        html,
        "<!DOCTYPE html>\n<html>\n<head>\n<meta charset=\"utf-8\">\n<title>Pattern catalog: {title}</title>\n<style>{STYLE}</style>\n</head>\n<body>\n<h1>Pattern catalog: {title}</h1>\n"
    );
    let informative = entries.iter().filter(|e| e.informative).count();
    let _ = writeln!(
        html,
        "<p>{} clusters, {} informative, {} non-informative.</p>",
        entries.len(),
        informative,
        entries.len() - informative
    );
    if entries.is_empty() {
        html.push_str("<p>This catalog contains zero clusters.</p>\n");
    } else {
        html.push_str("<table>\n<tr><th>Cluster</th><th>Size</th><th>Status</th><th>Representatives</th><th>Patterns</th><th>Redundant with</th></tr>\n");
    }
    for e in entries {
        let badge = if e.informative {
            "<span class=\"badge yes\">informative</span>"
        } else {
            "<span class=\"badge no\">non-informative</span>"
        };
        let _ = write!(
            html,
            "<tr id=\"cluster-{}\"><td>{}</td><td>{}</td><td>{badge}</td><td>",
            e.cluster_index, e.cluster_index, e.size
        );
        for r in &e.representatives {
            let id = escape(&r.tile_id);
            let tip = format!("{id} (distance {})", crate::numeric::format_sig(r.distance));
            match tiles.locate(&r.tile_id) {
                Some(p) if p.is_file() => {
                    let _ = write!(
                        html,
                        "<img class=\"tile\" src=\"{}\" alt=\"{id}\" title=\"{tip}\">",
                        escape(&href(&out_abs, &absolute(&p)))
                    );
                }
                located => {
                    if let Some(p) = located {
                        warnings.push(format!("missing tile image for {} at {}", r.tile_id, p.display()));
                    }
                    let _ = write!(html, "<span class=\"missing\" title=\"{tip}\">{id}</span>");
                }
            }
        }
        let (patterns, redundant) = match &e.annotation {
            Some(a) => (
                escape(&a.patterns.join("; ")),
                a.redundant_with.map(|r| r.to_string()).unwrap_or_default(),
            ),
            None => (String::new(), String::new()),
        };
        let _ = writeln!(html, "</td><td>{patterns}</td><td>{redundant}</td></tr>");
    }
    if !entries.is_empty() {
        html.push_str("</table>\n");
    }
    html.push_str("<footer>\n");
    if matches!(tiles, TileSource::None) {
        html.push_str("<p>No tile images were provided; representatives are shown by id.</p>\n");
    }
    if warnings.is_empty() {
        html.push_str("<p>No warnings.</p>\n");
    } else {
        let _ = writeln!(html, "<p>{} warnings:</p>\n<ul>", warnings.len());
        for w in &warnings {
            let _ = writeln!(html, "<li>{}</li>", escape(w));
        }
        html.push_str("</ul>\n");
    }
    html.push_str("</footer>\n</body>\n</html>\n");
    (html, warnings)
}

/// Writes `<diagnosis>.html` for every listed diagnosis plus `catalog.json`.
pub fn render_report(
    catalog: &Catalog,
    diagnoses: &[String],
    tiles: &TileSource,
    out_dir: &Path,
) -> Result<ReportOutcome> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut outcome = ReportOutcome::default();
    for d in diagnoses {
        let entries: Vec<&CatalogEntry> = catalog.for_diagnosis(d).collect();
        let (html, warnings) = render_diagnosis_page(d, &entries, tiles, out_dir);
        let path = out_dir.join(format!("{d}.html"));
        fs::write(&path, html).map_err(|e| Error::io(&path, e))?;
        outcome.pages.push(path);
        outcome.warnings.extend(warnings);
    }
    catalog.save(out_dir.join("catalog.json"))?;
    Ok(outcome)
}
