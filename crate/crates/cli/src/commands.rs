use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{info, warn};
use pattern_atlas::catalog::{
    build_catalog, load_annotations, render_report, summarize, Catalog, CatalogEntry, CatalogSummary,
    TileSource,
};
use pattern_atlas::classifier::{
    build_probability_table, evaluate, evaluate_predictions, load_predictions, predict_all,
    predictions_to_csv,
};
use pattern_atlas::clustering::{fit_kmeans, Assignment, ClusterModel};
use pattern_atlas::feature_store::{load_feature_set, normalize, save_feature_set, FeatureSet};
use pattern_atlas::model_selection::{sweep_k, KSweepResult, SelectionMethod, SweepParams};
use pattern_atlas::preprocess::{load_tile_manifest, run_tiling};
use pattern_atlas::stats::{holm_correct, one_sample_t, PairedComparison};
use pattern_atlas::synthetic::{generate_split, CorpusSpec};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{require_file, RunConfig};
use crate::error::{CliError, CliResult};
use crate::manifest::Recorder;

pub type Params = BTreeMap<String, Value>;

fn required(path: Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    let path = path.ok_or_else(|| CliError::Config(format!("no {what} given (flag or [paths] entry)")))?;
    require_file(&path)?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("artifact serializes") + "\n"
}

fn load_normalized(path: &Path) -> CliResult<FeatureSet> {
    require_file(path)?;
    let fs = load_feature_set(path)?;
    Ok(normalize(&fs)?)
}

fn restrict(fs: FeatureSet, diagnosis: Option<&str>) -> CliResult<FeatureSet> {
    match diagnosis {
        None => Ok(fs),
        Some(d) => {
            if fs.label_index(d).is_none() {
                return Err(CliError::Config(format!(
                    "diagnosis {d:?} is not in the label set {:?}",
                    fs.label_set()
                )));
            }
            let sub = fs.subset_by_diagnosis(d);
            if sub.is_empty() {
                return Err(pattern_atlas::Error::Empty(format!("no records with diagnosis {d:?}")).into());
            }
            Ok(sub)
        }
    }
}

fn clamp_k_range(params: &mut SweepParams, n: usize, what: &str) -> bool {
    if n < params.k_min {
        warn!("{what}: {n} tiles is fewer than k_min={}; skipped", params.k_min);
        return false;
    }
    if params.k_max > n {
        warn!("{what}: k_max lowered from {} to {n} (tile count)", params.k_max);
        params.k_max = n;
    }
    true
}

fn tile_source(
    cfg: &RunConfig,
    tile_manifest: Option<PathBuf>,
    tile_dir: Option<PathBuf>,
) -> CliResult<TileSource> {
    if let Some(dir) = tile_dir {
        return Ok(TileSource::Directory(dir));
    }
    match tile_manifest.or_else(|| cfg.paths.tile_manifest.clone()) {
        Some(path) => {
            require_file(&path)?;
            let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
            let rows = load_tile_manifest(&path)?;
            Ok(TileSource::Paths(
                rows.into_iter()
                    .map(|r| (r.tile_id, base.join(r.tile_path)))
                    .collect(),
            ))
        }
        None => Ok(TileSource::None),
    }
}

pub fn tile(cfg: &RunConfig, rec: &mut Recorder, manifest: Option<PathBuf>, seed: u64) -> CliResult<Params> {
    let ingest = required(
        manifest.or_else(|| cfg.paths.ingest_manifest.clone()),
        "ingest manifest",
    )?;
    let options = cfg.tiling_options(seed);
    let (rows, report) = run_tiling(&ingest, rec.out_dir(), &options)?;
    for r in &rows {
        rec.record(&rec.path(&r.tile_path));
    }
    rec.record(&rec.path("tiles.csv"));
    for w in &report.warnings {
        warn!("{w}");
    }
    rec.write("tiling_report.json", to_json(&report))?;
    println!("{} tiles written", rows.len());
    Ok(Params::from([("ingest_manifest".into(), json!(ingest))]))
}

#[derive(Serialize)]
struct Validation {
    dim: usize,
    labels: Vec<String>,
    records: usize,
    images: usize,
    normalized: bool,
    per_label: BTreeMap<String, usize>,
}

pub fn features_validate(rec: &mut Recorder, features: PathBuf) -> CliResult<Params> {
    require_file(&features)?;
    let fs = load_feature_set(&features)?;
    let mut per_label: BTreeMap<String, usize> = fs.label_set().iter().map(|l| (l.clone(), 0)).collect();
    for r in fs.records() {
        *per_label.get_mut(&r.diagnosis).expect("validated label") += 1;
    }
    let v = Validation {
        dim: fs.dim(),
        labels: fs.label_set().to_vec(),
        records: fs.len(),
        images: fs.image_count(),
        normalized: fs.is_normalized(),
        per_label,
    };
    rec.write("validation.json", to_json(&v))?;
    println!(
        "{}: valid, {} records, {} images, dim {}",
        features.display(),
        v.records,
        v.images,
        v.dim
    );
    Ok(Params::from([("features".into(), json!(features))]))
}

pub fn sweep(
    cfg: &RunConfig,
    rec: &mut Recorder,
    features: PathBuf,
    diagnosis: Option<String>,
    seed: u64,
) -> CliResult<Params> {
    let fs = restrict(load_normalized(&features)?, diagnosis.as_deref())?;
    let mut params = cfg.sweep_params(seed);
    if !clamp_k_range(&mut params, fs.len(), "sweep") {
        return Err(CliError::Config(format!(
            "cannot sweep k from {} with {} tiles",
            params.k_min,
            fs.len()
        )));
    }
    let mut result = sweep_k(&fs, &params)?;
    result.select(cfg.method())?;
    if let Some(d) = &result.elbow_diagnostic {
        warn!("elbow: {d}");
    }
    rec.write("sweep.json", result.to_json() + "\n")?;
    rec.write("sweep.csv", result.to_csv_string())?;
    println!(
        "elbow k = {}, compactness k = {}",
        fmt_k(result.chosen_elbow_k),
        fmt_k(result.chosen_compactness_k)
    );
    Ok(Params::from([
        ("features".into(), json!(features)),
        ("diagnosis".into(), json!(diagnosis)),
    ]))
}

fn fmt_k(k: Option<usize>) -> String {
    k.map_or_else(|| "none".into(), |k| k.to_string())
}

pub fn cluster(
    cfg: &RunConfig,
    rec: &mut Recorder,
    features: PathBuf,
    diagnosis: Option<String>,
    k: usize,
    seed: u64,
) -> CliResult<Params> {
    let fs = restrict(load_normalized(&features)?, diagnosis.as_deref())?;
    let fit = fit_kmeans(&fs, &cfg.sweep_params(seed).kmeans_params(k))?;
    rec.write("model.json", fit.model.to_json())?;
    rec.write("assignments.csv", fit.assignment.to_csv_string())?;
    println!(
        "k = {k}: inertia {}, {} iterations",
        pattern_atlas::numeric::format_sig(fit.model.inertia),
        fit.model.iterations_run
    );
    Ok(Params::from([
        ("features".into(), json!(features)),
        ("diagnosis".into(), json!(diagnosis)),
        ("k".into(), json!(k)),
    ]))
}

fn attach_annotations(catalog: &mut Catalog, path: Option<&Path>) -> CliResult<()> {
    let Some(path) = path else { return Ok(()) };
    require_file(path)?;
    let present = catalog.diagnoses();
    let rows = load_annotations(path)?
        .into_iter()
        .filter(|r| present.contains(&r.diagnosis))
        .collect();
    catalog.attach_annotations(rows)?;
    Ok(())
}

fn write_report(rec: &mut Recorder, catalog: &Catalog, tiles: &TileSource, rel_dir: &str) -> CliResult<()> {
    let dir = rec.path(rel_dir);
    let outcome = render_report(catalog, &catalog.diagnoses(), tiles, &dir)?;
    for p in &outcome.pages {
        rec.record(p);
    }
    rec.record(&dir.join("catalog.json"));
    for w in &outcome.warnings {
        warn!("{w}");
    }
    Ok(())
}

pub struct CatalogArgs {
    pub features: PathBuf,
    pub model: PathBuf,
    pub assignments: PathBuf,
    pub diagnosis: Option<String>,
    pub annotations: Option<PathBuf>,
    pub tile_manifest: Option<PathBuf>,
    pub tile_dir: Option<PathBuf>,
}

pub fn catalog(cfg: &RunConfig, rec: &mut Recorder, args: CatalogArgs) -> CliResult<Params> {
    let fs = restrict(load_normalized(&args.features)?, args.diagnosis.as_deref())?;
    require_file(&args.model)?;
    require_file(&args.assignments)?;
    let model = ClusterModel::load(&args.model)?;
    let assignment = Assignment::load(&args.assignments, &fs)?;
    let diagnoses = match &args.diagnosis {
        Some(d) => vec![d.clone()],
        None => fs.present_diagnoses(),
    };
    let existing = rec.path("report/catalog.json");
    let mut catalog = if existing.is_file() {
        Catalog::load(&existing)?
    } else {
        Catalog::default()
    };
    catalog.entries.retain(|e| !diagnoses.contains(&e.diagnosis));
    for d in &diagnoses {
        catalog
            .entries
            .extend(build_catalog(&fs, &model, &assignment, d)?);
    }
    catalog
        .entries
        .sort_by(|a, b| (&a.diagnosis, a.cluster_index).cmp(&(&b.diagnosis, b.cluster_index)));
    let annotations = args.annotations.or_else(|| cfg.paths.annotations.clone());
    attach_annotations(&mut catalog, annotations.as_deref())?;
    let tiles = tile_source(cfg, args.tile_manifest, args.tile_dir)?;
    write_report(rec, &catalog, &tiles, "report")?;
    println!("catalog holds {} clusters", catalog.entries.len());
    Ok(Params::from([
        ("features".into(), json!(args.features)),
        ("model".into(), json!(args.model)),
        ("assignments".into(), json!(args.assignments)),
        ("diagnosis".into(), json!(args.diagnosis)),
    ]))
}

fn load_lesions(path: Option<&Path>) -> CliResult<Vec<(String, String)>> {
    let Some(path) = path else { return Ok(Vec::new()) };
    require_file(path)?;
    let bad = |reason: String| pattern_atlas::Error::Format {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row.map_err(|e| bad(e.to_string()))?;
        if row.len() != 2 {
            return Err(bad("expected columns lesion_id,true_label".into()).into());
        }
        out.push((row[0].to_string(), row[1].to_string()));
    }
    Ok(out)
}

pub struct ClassifyArgs {
    pub train: PathBuf,
    pub test: PathBuf,
    pub model: PathBuf,
    pub assignments: PathBuf,
    pub lesions: Option<PathBuf>,
}

pub fn classify(cfg: &RunConfig, rec: &mut Recorder, args: ClassifyArgs) -> CliResult<Params> {
    let train = load_normalized(&args.train)?;
    let test = load_normalized(&args.test)?;
    require_file(&args.model)?;
    require_file(&args.assignments)?;
    let model = ClusterModel::load(&args.model)?;
    let assignment = Assignment::load(&args.assignments, &train)?;
    let lesions_path = args.lesions.clone().or_else(|| cfg.paths.lesions.clone());
    let lesions = load_lesions(lesions_path.as_deref())?;
    let table = build_probability_table(&assignment, &train, model.k)?;
    let predictions = predict_all(&test, &model, &table, &lesions)?;
    rec.write("probability_table.json", table.to_json())?;
    rec.write("predictions.csv", predictions_to_csv(&predictions, &table.labels))?;
    println!("{} lesions predicted", predictions.len());
    Ok(Params::from([
        ("train".into(), json!(args.train)),
        ("test".into(), json!(args.test)),
        ("model".into(), json!(args.model)),
        ("assignments".into(), json!(args.assignments)),
    ]))
}

pub fn evaluate_cmd(rec: &mut Recorder, predictions: PathBuf) -> CliResult<Params> {
    require_file(&predictions)?;
    let (labels, outcomes) = load_predictions(&predictions)?;
    let result = evaluate(&labels, &outcomes)?;
    rec.write("evaluation.json", result.to_json())?;
    println!(
        "accuracy {:.1}% (95% CI {:.1}-{:.1}), mean recall {:.1}%, {} excluded",
        100.0 * result.accuracy,
        100.0 * result.accuracy_ci95.0,
        100.0 * result.accuracy_ci95.1,
        100.0 * result.mean_recall,
        result.n_excluded
    );
    Ok(Params::from([("predictions".into(), json!(predictions))]))
}

#[derive(Debug, Serialize)]
pub struct MetricComparison {
    pub metric: String,
    pub result: Option<PairedComparison>,
    pub error: Option<String>,
    pub p_holm: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct Comparison {
    pub method_a: String,
    pub method_b: String,
    /// Differences are `method_a - method_b`, paired by diagnosis.
    pub diagnoses: Vec<String>,
    pub tests: Vec<MetricComparison>,
}

type Metric = fn(&pattern_atlas::catalog::DiagnosisSummary) -> f64;

pub fn compare_summary(summary: &CatalogSummary, a: &str, b: &str) -> CliResult<Comparison> {
    let ma = summary
        .method(a)
        .ok_or_else(|| CliError::Config(format!("no catalog for method {a:?}")))?;
    let mb = summary
        .method(b)
        .ok_or_else(|| CliError::Config(format!("no catalog for method {b:?}")))?;
    let pairs: Vec<_> = ma
        .per_diagnosis
        .iter()
        .filter_map(|x| {
            mb.per_diagnosis
                .iter()
                .find(|y| y.diagnosis == x.diagnosis)
                .map(|y| (x, y))
        })
        .collect();
    let metrics: [(&str, Metric); 2] = [
        ("clusters", |s| s.clusters as f64),
        ("non_informative_fraction", |s| s.non_informative_fraction),
    ];
    let mut tests: Vec<MetricComparison> = metrics
        .iter()
        .map(|(name, f)| {
            let diffs: Vec<f64> = pairs.iter().map(|(x, y)| f(x) - f(y)).collect();
            match one_sample_t(&diffs) {
                Ok(r) => MetricComparison {
                    metric: name.to_string(),
                    result: Some(r),
                    error: None,
                    p_holm: None,
                },
                Err(e) => MetricComparison {
                    metric: name.to_string(),
                    result: None,
                    error: Some(e.to_string()),
                    p_holm: None,
                },
            }
        })
        .collect();
    let ps: Vec<f64> = tests
        .iter()
        .filter_map(|t| t.result.as_ref().map(|r| r.p_value))
        .collect();
    if !ps.is_empty() {
        let mut adjusted = holm_correct(&ps)?.into_iter();
        for t in tests.iter_mut().filter(|t| t.result.is_some()) {
            t.p_holm = adjusted.next().map(pattern_atlas::numeric::round_sig);
        }
    }
    Ok(Comparison {
        method_a: a.into(),
        method_b: b.into(),
        diagnoses: pairs.iter().map(|(x, _)| x.diagnosis.clone()).collect(),
        tests,
    })
}

pub fn compare(rec: &mut Recorder, catalogs: Vec<(String, PathBuf)>) -> CliResult<Params> {
    if catalogs.is_empty() {
        return Err(CliError::Config("give at least one --catalog METHOD=PATH".into()));
    }
    let mut loaded = BTreeMap::new();
    for (method, path) in &catalogs {
        require_file(path)?;
        loaded.insert(method.clone(), Catalog::load(path)?);
    }
    let summary = summarize(&loaded)?;
    rec.write("summary.json", summary.to_json())?;
    if catalogs.len() >= 2 {
        let cmp = compare_summary(&summary, &catalogs[0].0, &catalogs[1].0)?;
        rec.write("compare.json", to_json(&cmp))?;
        print_comparison(&cmp);
    }
    Ok(Params::from([(
        "catalogs".into(),
        json!(catalogs
            .iter()
            .map(|(m, p)| (m.clone(), p.clone()))
            .collect::<BTreeMap<_, _>>()),
    )]))
}

fn print_comparison(cmp: &Comparison) {
    for t in &cmp.tests {
        match (&t.result, t.p_holm) {
            (Some(r), Some(p)) => println!(
                "{} - {} on {}: mean difference {:.3}, t = {:.3}, p = {:.4}, Holm p = {:.4}",
                cmp.method_a, cmp.method_b, t.metric, r.mean_diff, r.t_statistic, r.p_value, p
            ),
            _ => println!(
                "{} - {} on {}: not testable ({})",
                cmp.method_a,
                cmp.method_b,
                t.metric,
                t.error.as_deref().unwrap_or("no result")
            ),
        }
    }
}

fn methods_of(method: SelectionMethod) -> Vec<SelectionMethod> {
    match method {
        SelectionMethod::Both => vec![SelectionMethod::Elbow, SelectionMethod::Compactness],
        m => vec![m],
    }
}

fn chosen(sweep: &KSweepResult, method: SelectionMethod) -> Option<usize> {
    match method {
        SelectionMethod::Elbow => sweep.chosen_elbow_k,
        SelectionMethod::Compactness => sweep.chosen_compactness_k,
        SelectionMethod::Both => None,
    }
}

pub fn run_all(cfg: &RunConfig, rec: &mut Recorder, seed: u64) -> CliResult<Params> {
    let features = required(cfg.paths.features.clone(), "features file")?;
    let test_path = match &cfg.paths.test_features {
        Some(p) => {
            require_file(p)?;
            Some(p.clone())
        }
        None => None,
    };
    let fs = load_normalized(&features)?;
    let methods = methods_of(cfg.method());
    let mut catalogs: BTreeMap<String, Vec<CatalogEntry>> =
        methods.iter().map(|m| (m.to_string(), Vec::new())).collect();

    for d in fs.present_diagnoses() {
        let sub = fs.subset_by_diagnosis(&d);
        let mut params = cfg.sweep_params(seed);
        if !clamp_k_range(&mut params, sub.len(), &d) {
            continue;
        }
        info!(
            "{d}: sweeping k in [{}, {}] over {} tiles",
            params.k_min,
            params.k_max,
            sub.len()
        );
        let mut sweep = sweep_k(&sub, &params)?;
        sweep.select(cfg.method())?;
        rec.write(format!("sweep/{d}.json"), sweep.to_json() + "\n")?;
        rec.write(format!("sweep/{d}.csv"), sweep.to_csv_string())?;
        for &m in &methods {
            let Some(k) = chosen(&sweep, m) else {
                warn!(
                    "{d}: {m} selected no k ({}); diagnosis left out of the {m} catalog",
                    sweep.elbow_diagnostic.as_deref().unwrap_or("no knee")
                );
                continue;
            };
            let fit = fit_kmeans(&sub, &params.kmeans_params(k))?;
            rec.write(format!("{m}/{d}/model.json"), fit.model.to_json())?;
            rec.write(format!("{m}/{d}/assignments.csv"), fit.assignment.to_csv_string())?;
            let entries = build_catalog(&sub, &fit.model, &fit.assignment, &d)?;
            info!("{d}: {m} k = {k}");
            catalogs.get_mut(&m.to_string()).expect("method").extend(entries);
        }
    }

    let tiles = tile_source(cfg, None, None)?;
    let mut finished = BTreeMap::new();
    for (m, entries) in catalogs {
        let mut catalog = Catalog { entries };
        attach_annotations(&mut catalog, cfg.paths.annotations.as_deref())?;
        write_report(rec, &catalog, &tiles, &format!("{m}/report"))?;
        finished.insert(m, catalog);
    }
    let summary = summarize(&finished)?;
    rec.write("summary.json", summary.to_json())?;
    if methods.len() == 2 {
        let cmp = compare_summary(&summary, "elbow", "compactness")?;
        rec.write("compare.json", to_json(&cmp))?;
        print_comparison(&cmp);
    }
    for m in &summary.methods {
        let ci = m
            .mean_clusters
            .ci95
            .map_or_else(|| "n/a".to_string(), |(lo, hi)| format!("{lo:.1}-{hi:.1}"));
        println!(
            "{}: mean {:.1} clusters (95% CI {ci}), mean non-informative fraction {:.3}",
            m.method, m.mean_clusters.mean, m.mean_non_informative_fraction.mean
        );
    }

    if let Some(test_path) = &test_path {
        let test = load_normalized(test_path)?;
        let lesions = load_lesions(cfg.paths.lesions.as_deref())?;
        let mut params = cfg.sweep_params(seed);
        if clamp_k_range(&mut params, fs.len(), "all diagnoses") {
            info!(
                "all diagnoses: sweeping k in [{}, {}] over {} tiles",
                params.k_min,
                params.k_max,
                fs.len()
            );
            let mut sweep = sweep_k(&fs, &params)?;
            sweep.select(cfg.method())?;
            rec.write("all/sweep.json", sweep.to_json() + "\n")?;
            rec.write("all/sweep.csv", sweep.to_csv_string())?;
            for &m in &methods {
                let Some(k) = chosen(&sweep, m) else {
                    warn!("all diagnoses: {m} selected no k; no classifier for {m}");
                    continue;
                };
                let fit = fit_kmeans(&fs, &params.kmeans_params(k))?;
                rec.write(format!("all/{m}/model.json"), fit.model.to_json())?;
                rec.write(format!("all/{m}/assignments.csv"), fit.assignment.to_csv_string())?;
                let table = build_probability_table(&fit.assignment, &fs, k)?;
                let predictions = predict_all(&test, &fit.model, &table, &lesions)?;
                rec.write(format!("all/{m}/probability_table.json"), table.to_json())?;
                rec.write(
                    format!("predictions_{m}.csv"),
                    predictions_to_csv(&predictions, &table.labels),
                )?;
                let result = evaluate_predictions(&predictions, &table.labels)?;
                rec.write(format!("evaluation_{m}.json"), result.to_json())?;
                println!(
                    "{m} classifier (k = {k}): accuracy {:.1}%, mean recall {:.1}%",
                    100.0 * result.accuracy,
                    100.0 * result.mean_recall
                );
            }
        }
    }
    Ok(Params::new())
}

pub fn synth(rec: &mut Recorder, seed: u64, test_images: usize) -> CliResult<Params> {
    let spec = CorpusSpec::desk_scale(seed);
    let (train, test) = generate_split(&spec, test_images, "test")?;
    for (name, corpus) in [("train.csv", &train), ("test.csv", &test)] {
        let path = rec.path(name);
        save_feature_set(&corpus.feature_set, &path)?;
        rec.record(&path);
    }
    println!(
        "{} training and {} test tiles written",
        train.feature_set.len(),
        test.feature_set.len()
    );
    Ok(Params::from([("test_images".into(), json!(test_images))]))
}
