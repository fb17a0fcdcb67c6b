//! Feature set data model and its headered CSV file format.
//!
//! ```text
//! #featureset v1 dim=<D> labels=<l1|l2|...> [normalized=true]
//! tile_id,image_id,diagnosis,x,y,f0,...,f{D-1}
//! ```
//!
//! Lines starting with `#` after the header are comments. Floats are written
//! with nine significant digits; a save/load round trip is exact at that
//! precision.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numeric::{format_sig, norm};

const MAGIC: &str = "#featureset";
const VERSION: &str = "v1";
const FIXED_COLUMNS: usize = 5;

/// Tolerance on the unit norm of vectors in a normalized set.
pub const UNIT_NORM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TileRecord {
    pub tile_id: String,
    /// Groups the tiles of one lesion image.
    pub image_id: String,
    pub diagnosis: String,
    pub x: u32,
    pub y: u32,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    dim: usize,
    label_set: Vec<String>,
    records: Vec<TileRecord>,
    normalized: bool,
}

impl FeatureSet {
    /// Creates an empty set. Labels must be unique, non-empty, and free of
    /// `|`, `,` and whitespace so they survive the header encoding.
    pub fn new(dim: usize, label_set: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidFeatureSet("dim must be positive".into()));
        }
        let mut seen = HashSet::new();
        for label in &label_set {
            if label.is_empty() || label.chars().any(|c| c == '|' || c == ',' || c.is_whitespace()) {
                return Err(Error::InvalidFeatureSet(format!(
                    "label {label:?} is empty or contains a reserved character"
                )));
            }
            if !seen.insert(label.as_str()) {
                return Err(Error::InvalidFeatureSet(format!(
                    "label {label:?} declared twice"
                )));
            }
        }
        Ok(Self {
            dim,
            label_set,
            records: Vec::new(),
            normalized: false,
        })
    }

    /// Builds a set from records, validating every invariant.
    pub fn from_records(dim: usize, label_set: Vec<String>, records: Vec<TileRecord>) -> Result<Self> {
        let mut fs = Self::new(dim, label_set)?;
        let mut ids = HashSet::new();
        for record in records {
            fs.check_record(&record)?;
            if !ids.insert(record.tile_id.clone()) {
                return Err(Error::InvalidFeatureSet(format!(
                    "duplicate tile_id {:?}",
                    record.tile_id
                )));
            }
            fs.records.push(record);
        }
        Ok(fs)
    }

    fn check_record(&self, record: &TileRecord) -> Result<()> {
        if record.tile_id.is_empty() || record.tile_id.contains(',') {
            return Err(Error::InvalidFeatureSet(format!(
                "invalid tile_id {:?}",
                record.tile_id
            )));
        }
        if record.image_id.contains(',') {
            return Err(Error::InvalidFeatureSet(format!(
                "invalid image_id {:?}",
                record.image_id
            )));
        }
        if !self.label_set.contains(&record.diagnosis) {
            return Err(Error::InvalidFeatureSet(format!(
                "tile {:?}: unknown label {:?}",
                record.tile_id, record.diagnosis
            )));
        }
        if record.features.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: record.features.len(),
            });
        }
        if record.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatureSet(format!(
                "tile {:?}: non-finite feature value",
                record.tile_id
            )));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn records(&self) -> &[TileRecord] {
        &self.records
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    /// Feature vectors in record order.
    pub fn vectors(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.features.as_slice()).collect()
    }

    /// Record indices grouped by image id, images in lexicographic order.
    pub fn image_groups(&self) -> BTreeMap<&str, Vec<usize>> {
        let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, r) in self.records.iter().enumerate() {
            groups.entry(r.image_id.as_str()).or_default().push(i);
        }
        groups
    }

    pub fn image_count(&self) -> usize {
        self.image_groups().len()
    }

    /// The records of one diagnosis, with the label set and flags preserved.
    pub fn subset_by_diagnosis(&self, diagnosis: &str) -> FeatureSet {
        FeatureSet {
            dim: self.dim,
            label_set: self.label_set.clone(),
            records: self
                .records
                .iter()
                .filter(|r| r.diagnosis == diagnosis)
                .cloned()
                .collect(),
            normalized: self.normalized,
        }
    }

    /// Diagnoses that actually occur, in label-set order.
    pub fn present_diagnoses(&self) -> Vec<String> {
        self.label_set
            .iter()
            .filter(|l| self.records.iter().any(|r| &r.diagnosis == *l))
            .cloned()
            .collect()
    }
}

/// Scales every feature vector to unit Euclidean norm.
pub fn normalize(fs: &FeatureSet) -> Result<FeatureSet> {
    let mut records = Vec::with_capacity(fs.records.len());
    for r in &fs.records {
        let n = norm(&r.features);
        if n == 0.0 || !n.is_finite() {
            return Err(Error::ZeroVector {
                tile_id: r.tile_id.clone(),
            });
        }
        let mut out = r.clone();
        out.features.iter_mut().for_each(|v| *v /= n);
        records.push(out);
    }
    Ok(FeatureSet {
        dim: fs.dim,
        label_set: fs.label_set.clone(),
        records,
        normalized: true,
    })
}

fn parse_header(path: &Path, line: &str) -> Result<(usize, Vec<String>, bool)> {
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    let mut tokens = line.split_whitespace();
    if tokens.next() != Some(MAGIC) {
        return Err(malformed(format!("expected line to start with {MAGIC:?}")));
    }
    match tokens.next() {
        Some(VERSION) => {}
        other => return Err(malformed(format!("unsupported version {other:?}"))),
    }
    let mut dim = None;
    let mut labels = None;
    let mut normalized = false;
    for token in tokens {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| malformed(format!("token {token:?} is not key=value")))?;
        match key {
            "dim" => {
                let d: usize = value
                    .parse()
                    .map_err(|_| malformed(format!("dim {value:?} is not an integer")))?;
                dim = Some(d);
            }
            "labels" => {
                labels = Some(value.split('|').map(str::to_owned).collect::<Vec<String>>());
            }
            "normalized" => {
                normalized = match value {
                    "true" => true,
                    "false" => false,
                    _ => return Err(malformed(format!("normalized={value:?}"))),
                };
            }
            _ => return Err(malformed(format!("unknown header key {key:?}"))),
        }
    }
    let dim = dim.ok_or_else(|| malformed("missing dim".into()))?;
    let labels = labels.ok_or_else(|| malformed("missing labels".into()))?;
    Ok((dim, labels, normalized))
}

/// Reads and validates a feature set file.
pub fn load_feature_set(path: impl AsRef<Path>) -> Result<FeatureSet> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();
    let header = match lines.next() {
        Some((_, h)) => h,
        None => {
            return Err(Error::MalformedHeader {
                path: path.to_path_buf(),
                reason: "file is empty".into(),
            })
        }
    };
    let (dim, labels, normalized) = parse_header(path, header)?;
    let mut fs = FeatureSet::new(dim, labels).map_err(|e| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let expected = FIXED_COLUMNS + dim;
    let mut ids: HashSet<String> = HashSet::new();

    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != expected {
            return Err(Error::RowArity {
                path: path.to_path_buf(),
                line: line_no,
                expected,
                found: cols.len(),
            });
        }
        let parse_err = |column: usize| Error::ParseValue {
            path: path.to_path_buf(),
            line: line_no,
            column,
            value: cols[column].to_owned(),
        };
        let tile_id = cols[0].trim();
        if tile_id.is_empty() {
            return Err(parse_err(0));
        }
        let diagnosis = cols[2].trim();
        if !fs.label_set.iter().any(|l| l == diagnosis) {
            return Err(Error::UnknownLabel {
                path: path.to_path_buf(),
                line: line_no,
                label: diagnosis.to_owned(),
            });
        }
        let x: u32 = cols[3].trim().parse().map_err(|_| parse_err(3))?;
        let y: u32 = cols[4].trim().parse().map_err(|_| parse_err(4))?;
        let mut features = Vec::with_capacity(dim);
        for (column, raw) in cols.iter().enumerate().take(expected).skip(FIXED_COLUMNS) {
            let v: f64 = raw.trim().parse().map_err(|_| parse_err(column))?;
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    path: path.to_path_buf(),
                    line: line_no,
                    column,
                });
            }
            features.push(v);
        }
        if !ids.insert(tile_id.to_owned()) {
            return Err(Error::DuplicateTileId {
                path: path.to_path_buf(),
                line: line_no,
                tile_id: tile_id.to_owned(),
            });
        }
        if normalized {
            let n = norm(&features);
            if (n - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::format(
                    path,
                    format!("line {line_no}: header declares normalized=true but norm is {n}"),
                ));
            }
        }
        fs.records.push(TileRecord {
            tile_id: tile_id.to_owned(),
            image_id: cols[1].trim().to_owned(),
            diagnosis: diagnosis.to_owned(),
            x,
            y,
            features,
        });
    }
    fs.normalized = normalized;
    Ok(fs)
}

/// Serializes a feature set to its file representation.
pub fn to_feature_set_string(fs: &FeatureSet) -> String {
    let mut out = format!(
        "{MAGIC} {VERSION} dim={} labels={}",
        fs.dim,
        fs.label_set.join("|")
    );
    if fs.normalized {
        out.push_str(" normalized=true");
    }
    out.push('\n');
    for r in &fs.records {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.tile_id, r.image_id, r.diagnosis, r.x, r.y
        );
        for v in &r.features {
            out.push(',');
            out.push_str(&format_sig(*v));
        }
        out.push('\n');
    }
    out
}

pub fn save_feature_set(fs: &FeatureSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(to_feature_set_string(fs).as_bytes())
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::cosine_distance;
    use proptest::prelude::*;

    fn write(dir: &tempfile::TempDir, body: &str) -> std::path::PathBuf {
        let p = dir.path().join("f.csv");
        fs::write(&p, body).unwrap();
        p
    }

    fn record(id: &str, image: &str, label: &str, features: Vec<f64>) -> TileRecord {
        TileRecord {
            tile_id: id.into(),
            image_id: image.into(),
            diagnosis: label.into(),
            x: 0,
            y: 0,
            features,
        }
    }

    #[test]
    fn loads_valid_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "#featureset v1 dim=4 labels=MEL|NV\n\
             t1,i1,MEL,0,0,1,2,3,4\n\
             # a comment\n\
             t2,i1,NV,96,0,1e-3,2.5E2,-3,0\n\
             t3,i2,NV,0,96,0.1,0.2,0.3,0.4\n",
        );
        let fs = load_feature_set(&p).unwrap();
        assert_eq!(fs.dim(), 4);
        assert_eq!(fs.len(), 3);
        assert_eq!(fs.records()[1].features, vec![1e-3, 250.0, -3.0, 0.0]);
        assert_eq!(fs.records()[1].x, 96);
        assert!(!fs.is_normalized());
    }

    #[test]
    fn arity_error_names_row() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "#featureset v1 dim=4 labels=MEL\nt1,i1,MEL,0,0,1,2,3,4\nt2,i1,MEL,0,0,1,2,3\n",
        );
        match load_feature_set(&p) {
            Err(Error::RowArity {
                line,
                expected,
                found,
                ..
            }) => assert_eq!((line, expected, found), (3, 9, 8)),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nan_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "#featureset v1 dim=2 labels=MEL\nt1,i1,MEL,0,0,NaN,1\n");
        assert!(matches!(
            load_feature_set(&p),
            Err(Error::NonFinite {
                line: 2,
                column: 5,
                ..
            })
        ));
        let p = write(&dir, "#featureset v1 dim=2 labels=MEL\nt1,i1,MEL,0,0,1,inf\n");
        assert!(matches!(load_feature_set(&p), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn duplicate_and_unknown_label_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            &dir,
            "#featureset v1 dim=1 labels=MEL\nt1,i1,MEL,0,0,1\nt1,i2,MEL,0,0,1\n",
        );
        assert!(matches!(
            load_feature_set(&p),
            Err(Error::DuplicateTileId { line: 3, .. })
        ));
        let p = write(&dir, "#featureset v1 dim=1 labels=MEL\nt1,i1,BCC,0,0,1\n");
        assert!(matches!(
            load_feature_set(&p),
            Err(Error::UnknownLabel { line: 2, .. })
        ));
        let p = write(&dir, "#featureset v2 dim=1 labels=MEL\n");
        assert!(matches!(load_feature_set(&p), Err(Error::MalformedHeader { .. })));
        let p = write(&dir, "tile_id,image_id\n");
        assert!(matches!(load_feature_set(&p), Err(Error::MalformedHeader { .. })));
        let p = write(&dir, "#featureset v1 dim=x labels=MEL\n");
        assert!(matches!(load_feature_set(&p), Err(Error::MalformedHeader { .. })));
        let p = write(&dir, "#featureset v1 dim=1 labels=MEL\nt1,i1,MEL,-4,0,1\n");
        assert!(matches!(
            load_feature_set(&p),
            Err(Error::ParseValue { column: 3, .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let fs = FeatureSet::from_records(
            3,
            vec!["A".into()],
            vec![
                record("a", "i", "A", vec![3.0, 4.0, 0.0]),
                record("b", "i", "A", vec![1.0, 0.0, 0.0]),
            ],
        )
        .unwrap();
        let n = normalize(&fs).unwrap();
        assert!(n.is_normalized());
        assert_eq!(n.records()[0].features, vec![0.6, 0.8, 0.0]);
        assert_eq!(n.records()[1].features, vec![1.0, 0.0, 0.0]);

        let zero = FeatureSet::from_records(2, vec!["A".into()], vec![record("z", "i", "A", vec![0.0, 0.0])])
            .unwrap();
        match normalize(&zero) {
            Err(Error::ZeroVector { tile_id }) => assert_eq!(tile_id, "z"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn save_empty_and_unwritable() {
        let dir = tempfile::tempdir().unwrap();
        let fs = FeatureSet::new(3, vec!["A".into(), "B".into()]).unwrap();
        let p = dir.path().join("empty.csv");
        save_feature_set(&fs, &p).unwrap();
        let back = load_feature_set(&p).unwrap();
        assert_eq!(back, fs);
        assert!(matches!(
            save_feature_set(&fs, dir.path().join("missing/dir/f.csv")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn normalized_flag_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let fs = FeatureSet::from_records(2, vec!["A".into()], vec![record("a", "i", "A", vec![1.0, 3.0])])
            .unwrap();
        let n = normalize(&fs).unwrap();
        let p = dir.path().join("n.csv");
        save_feature_set(&n, &p).unwrap();
        let back = load_feature_set(&p).unwrap();
        assert!(back.is_normalized());
    }

    fn arb_feature_set() -> impl Strategy<Value = FeatureSet> {
        (1usize..6, 1usize..4).prop_flat_map(|(dim, n_labels)| {
            let labels: Vec<String> = (0..n_labels).map(|i| format!("L{i}")).collect();
            let rec = (
                0..n_labels,
                0u32..4,
                0u32..512,
                0u32..512,
                prop::collection::vec(-1e6f64..1e6, dim),
            );
            prop::collection::vec(rec, 0..12).prop_map(move |rows| {
                let records = rows
                    .into_iter()
                    .enumerate()
                    .map(|(i, (l, img, x, y, f))| TileRecord {
                        tile_id: format!("t{i}"),
                        image_id: format!("img{img}"),
                        diagnosis: labels[l].clone(),
                        x,
                        y,
                        features: f,
                    })
                    .collect();
                FeatureSet::from_records(dim, labels.clone(), records).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn round_trip_at_serialization_precision(fs in arb_feature_set()) {
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("rt.csv");
            save_feature_set(&fs, &p).unwrap();
            let back = load_feature_set(&p).unwrap();
            prop_assert_eq!(back.len(), fs.len());
            for (a, b) in fs.records().iter().zip(back.records()) {
                prop_assert_eq!(&a.tile_id, &b.tile_id);
                prop_assert_eq!(&a.image_id, &b.image_id);
                prop_assert_eq!((a.x, a.y), (b.x, b.y));
                let rounded: Vec<f64> = a.features.iter().map(|v| crate::numeric::round_sig(*v)).collect();
                prop_assert_eq!(&rounded, &b.features);
            }
            // values already at serialization precision survive exactly
            prop_assert_eq!(to_feature_set_string(&back), to_feature_set_string(&fs));
            let again = dir.path().join("rt2.csv");
            save_feature_set(&back, &again).unwrap();
            prop_assert_eq!(load_feature_set(&again).unwrap(), back);
        }

        #[test]
        fn normalize_idempotent_and_direction_preserving(
            v in prop::collection::vec(-100f64..100.0, 1..8).prop_filter("nonzero", |v| norm(v) > 1e-6),
            scale in 1e-3f64..1e3,
        ) {
            let dim = v.len();
            let fs = FeatureSet::from_records(dim, vec!["A".into()], vec![
                record("a", "i", "A", v.clone()),
                record("b", "i", "A", v.iter().map(|x| x * scale).collect()),
            ]).unwrap();
            let once = normalize(&fs).unwrap();
            let twice = normalize(&once).unwrap();
            for (a, b) in once.records().iter().zip(twice.records()) {
                for (x, y) in a.features.iter().zip(&b.features) {
                    prop_assert!((x - y).abs() < 1e-12);
                }
                prop_assert!((norm(&a.features) - 1.0).abs() < 1e-12);
            }
            let d = cosine_distance(&v, &once.records()[0].features).unwrap();
            prop_assert!(d.abs() < 1e-12);
            // scale invariance: positive rescaling gives the same unit vector
            for (x, y) in once.records()[0].features.iter().zip(&once.records()[1].features) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
