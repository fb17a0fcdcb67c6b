use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const BIN: &str = env!("CARGO_BIN_EXE_pattern-atlas");
const SEED_ENV: &str = "PATTERN_ATLAS_SEED";

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn cli(args: &[&str], out: &Path) -> Output {
    Command::new(BIN)
        .env_remove(SEED_ENV)
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn train() -> String {
    fixture("train.csv").display().to_string()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn synth_reproduces_the_fixture_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["--seed", "6", "synth"], dir.path());
    assert!(o.status.success(), "{}", stderr(&o));
    for name in ["train.csv", "test.csv"] {
        assert!(
            fs::read(dir.path().join(name)).unwrap() == fs::read(fixture(name)).unwrap(),
            "{name} differs from the fixture"
        );
    }
}

#[test]
fn seed_falls_back_to_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .env(SEED_ENV, "6")
        .args(["synth", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(fs::read(dir.path().join("train.csv")).unwrap() == fs::read(fixture("train.csv")).unwrap());

    // the flag wins over the environment
    let flagged = tempfile::tempdir().unwrap();
    let o = Command::new(BIN)
        .env(SEED_ENV, "6")
        .args(["--seed", "7", "synth", "--out"])
        .arg(flagged.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(fs::read(flagged.path().join("train.csv")).unwrap() != fs::read(fixture("train.csv")).unwrap());
    let manifest = json(&flagged.path().join("run-manifest.json"));
    assert!(manifest["config_toml"].as_str().unwrap().contains("seed = 7"));
}

#[test]
fn sweep_reports_both_choices() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(
        &[
            "--seed",
            "6",
            "sweep",
            "--features",
            &train(),
            "--diagnosis",
            "MEL",
            "--k-min",
            "2",
            "--k-max",
            "20",
            "--method",
            "both",
        ],
        dir.path(),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let sweep = json(&dir.path().join("sweep.json"));
    assert_eq!(sweep["k_values"].as_array().unwrap().len(), 19);
    assert!(sweep["chosen_elbow_k"].is_u64(), "{sweep}");
    assert!(sweep["chosen_compactness_k"].is_u64(), "{sweep}");
    let csv = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("k,inertia,W"));
    assert_eq!(csv.lines().count(), 20);

    let manifest = json(&dir.path().join("run-manifest.json"));
    assert_eq!(manifest["command"], "sweep");
    let artifacts = manifest["artifacts"].as_object().unwrap();
    assert!(artifacts.contains_key("sweep.json") && artifacts.contains_key("sweep.csv"));
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let test = fixture("test.csv").display().to_string();
    let out = |name: &str| d.join(name);
    let s = |p: PathBuf| p.display().to_string();

    let o = cli(&["features-validate", "--features", &train()], &out("validate"));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(
        json(&out("validate/validation.json"))["labels"]
            .as_array()
            .unwrap()
            .len(),
        6
    );

    let o = cli(
        &["--seed", "6", "cluster", "--features", &train(), "--k", "12"],
        &out("cluster"),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let model = s(out("cluster/model.json"));
    let assignments = s(out("cluster/assignments.csv"));
    assert_eq!(json(&out("cluster/model.json"))["k"], 12);

    let o = cli(
        &[
            "catalog",
            "--features",
            &train(),
            "--model",
            &model,
            "--assignments",
            &assignments,
        ],
        &out("catalog"),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let catalog = json(&out("catalog/report/catalog.json"));
    assert_eq!(catalog["entries"].as_array().unwrap().len(), 6 * 12);
    assert!(out("catalog/report/MEL.html").is_file());

    let o = cli(
        &[
            "classify",
            "--train",
            &train(),
            "--test",
            &test,
            "--model",
            &model,
            "--assignments",
            &assignments,
        ],
        &out("classify"),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let predictions = s(out("classify/predictions.csv"));

    let o = cli(&["evaluate", "--predictions", &predictions], &out("evaluate"));
    assert!(o.status.success(), "{}", stderr(&o));
    let eval = json(&out("evaluate/evaluation.json"));
    assert_eq!(eval["n_lesions"], 60);
    assert_eq!(eval["accuracy_ci_method"], "wilson");
    let acc = eval["accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));

    let o = cli(
        &[
            "compare",
            "--catalog",
            &format!("a={}", s(out("catalog/report/catalog.json"))),
        ],
        &out("compare"),
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(out("compare/summary.json").is_file());
    assert!(!out("compare/compare.json").exists());
}

#[test]
fn missing_seed_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = cli(&["sweep", "--features", &train()], dir.path());
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains(SEED_ENV), "{}", stderr(&o));
}

#[test]
fn bad_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "seed = 6\n[sweep]\nk_max = \"lots\"\n").unwrap();
    let o = cli(
        &["--config", cfg.to_str().unwrap(), "sweep", "--features", &train()],
        &dir.path().join("o"),
    );
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("run.toml"), "{}", stderr(&o));

    fs::write(&cfg, "seed = 6\n[sweep]\nk_min = 9\nk_max = 3\n").unwrap();
    let o = cli(
        &["--config", cfg.to_str().unwrap(), "sweep", "--features", &train()],
        &dir.path().join("o"),
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn missing_input_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere.csv");
    let o = cli(
        &["--seed", "1", "sweep", "--features", missing.to_str().unwrap()],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(4));
    assert!(stderr(&o).contains("nowhere.csv"), "{}", stderr(&o));
}

#[test]
fn malformed_features_are_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "#featureset v1 dim=2 labels=MEL\nt1,i1,MEL,0,0,1.0\n").unwrap();
    let o = cli(
        &["features-validate", "--features", bad.to_str().unwrap()],
        &dir.path().join("o"),
    );
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("bad.csv"), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_2() {
    let o = Command::new(BIN)
        .args(["sweep", "--k-min", "two"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(BIN).arg("frobnicate").output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn tile_writes_manifest_and_report() {
    use image::{GrayImage, Luma, Rgb, RgbImage};
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let mut ingest = String::from("image_id,diagnosis,image_path,mask_path\n");
    for (id, diag) in [("a", "NV"), ("b", "NV"), ("c", "MEL")] {
        RgbImage::from_pixel(256, 256, Rgb([180, 120, 90]))
            .save(root.join(format!("{id}.png")))
            .unwrap();
        GrayImage::from_pixel(256, 256, Luma([255]))
            .save(root.join(format!("{id}_m.png")))
            .unwrap();
        ingest += &format!("{id},{diag},{id}.png,{id}_m.png\n");
    }
    fs::write(root.join("ingest.csv"), ingest).unwrap();
    let cfg = root.join("run.toml");
    fs::write(
        &cfg,
        "seed = 3\n[paths]\ningest_manifest = \"ingest.csv\"\n[caps]\nmax_tiles_per_class = { NV = 5 }\n",
    )
    .unwrap();
    let o = cli(&["--config", cfg.to_str().unwrap(), "tile"], &root.join("out"));
    assert!(o.status.success(), "{}", stderr(&o));
    let tiles = fs::read_to_string(root.join("out/tiles.csv")).unwrap();
    assert_eq!(tiles.lines().count(), 1 + 5 + 4);
    let report = json(&root.join("out/tiling_report.json"));
    assert_eq!(report["per_class"]["NV"]["tiles"], 8);
    let manifest = json(&root.join("out/run-manifest.json"));
    let pngs = manifest["artifacts"]
        .as_object()
        .unwrap()
        .keys()
        .filter(|k| k.ends_with(".png"))
        .count();
    assert_eq!(pngs, 9);
}
