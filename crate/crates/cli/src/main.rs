//! `pattern-atlas`: tiling, clustering, k selection, pattern catalogs and
//! cluster-frequency classification from the command line.

mod commands;
mod config;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pattern_atlas::model_selection::SelectionMethod;

use crate::commands::{CatalogArgs, ClassifyArgs, Params};
use crate::config::RunConfig;
use crate::error::{exit, CliError, CliResult};
use crate::manifest::Recorder;

#[derive(Debug, Parser)]
#[command(name = "pattern-atlas", version, about)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// RNG seed. Falls back to the config, then PATTERN_ATLAS_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Output directory (default: config paths.out_dir, else ./out).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Cut masked images into tiles, correct color and apply class caps.
    Tile {
        /// Ingestion manifest `image_id,diagnosis,image_path,mask_path`.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Check a feature-set file and report its contents.
    FeaturesValidate {
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Fit k-means for every k in a range and select k.
    Sweep {
        #[arg(long)]
        features: Option<PathBuf>,
        /// Restrict to one diagnosis.
        #[arg(long)]
        diagnosis: Option<String>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
        #[arg(long)]
        method: Option<SelectionMethod>,
    },
    /// Fit k-means at one k (seeded with seed + k, as in a sweep).
    Cluster {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        diagnosis: Option<String>,
        #[arg(long)]
        k: usize,
    },
    /// Build the pattern catalog and HTML report for a clustering.
    Catalog {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
        #[arg(long)]
        diagnosis: Option<String>,
        /// Annotation CSV `diagnosis,cluster_index,patterns,redundant_with,informative_override`.
        #[arg(long)]
        annotations: Option<PathBuf>,
        /// Tile manifest locating representative images.
        #[arg(long, conflicts_with = "tile_dir")]
        tile_manifest: Option<PathBuf>,
        /// Directory holding `<tile_id>.png`.
        #[arg(long)]
        tile_dir: Option<PathBuf>,
    },
    /// Predict test lesions from cluster diagnosis frequencies.
    Classify {
        /// Training features the clustering was fitted on.
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        assignments: PathBuf,
        /// Optional `lesion_id,true_label` list; lesions without tiles count as excluded.
        #[arg(long)]
        lesions: Option<PathBuf>,
    },
    /// Score a predictions file.
    Evaluate {
        #[arg(long)]
        predictions: PathBuf,
    },
    /// Summarize catalogs and compare two methods across diagnoses.
    Compare {
        /// `METHOD=PATH` to a catalog.json; the first two are compared.
        #[arg(long = "catalog", value_parser = parse_catalog_arg, required = true)]
        catalogs: Vec<(String, PathBuf)>,
    },
    /// Run sweep, selection, catalogs, comparison and classification.
    RunAll {
        #[arg(long)]
        features: Option<PathBuf>,
        #[arg(long)]
        test_features: Option<PathBuf>,
        #[arg(long)]
        method: Option<SelectionMethod>,
        #[arg(long)]
        k_min: Option<usize>,
        #[arg(long)]
        k_max: Option<usize>,
    },
    /// Write a seeded synthetic train/test feature corpus.
    Synth {
        /// Held-out images per class.
        #[arg(long, default_value_t = 10)]
        test_images: usize,
    },
}

fn parse_catalog_arg(s: &str) -> Result<(String, PathBuf), String> {
    let (m, p) = s
        .split_once('=')
        .ok_or_else(|| format!("expected METHOD=PATH, got {s:?}"))?;
    if m.is_empty() || p.is_empty() {
        return Err(format!("expected METHOD=PATH, got {s:?}"));
    }
    Ok((m.to_string(), PathBuf::from(p)))
}

fn or_config(flag: Option<PathBuf>, cfg: &Option<PathBuf>, what: &str) -> CliResult<PathBuf> {
    flag.or_else(|| cfg.clone())
        .ok_or_else(|| CliError::Config(format!("no {what} given (flag or [paths] entry)")))
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if cli.seed.is_some() {
        cfg.seed = cli.seed;
    }
    if let Some(out) = &cli.out {
        cfg.paths.out_dir = Some(out.clone());
    }

    // flag overrides that belong in the effective config
    match &cli.command {
        Command::Sweep {
            k_min, k_max, method, ..
        }
        | Command::RunAll {
            k_min, k_max, method, ..
        } => {
            if let Some(v) = k_min {
                cfg.sweep.k_min = *v;
            }
            if let Some(v) = k_max {
                cfg.sweep.k_max = *v;
            }
            if method.is_some() {
                cfg.method = *method;
            }
        }
        _ => {}
    }
    if let Command::RunAll {
        features,
        test_features,
        ..
    } = &cli.command
    {
        if features.is_some() {
            cfg.paths.features = features.clone();
        }
        if test_features.is_some() {
            cfg.paths.test_features = test_features.clone();
        }
    }
    cfg.validate()?;

    let needs_seed = matches!(
        cli.command,
        Command::Tile { .. }
            | Command::Sweep { .. }
            | Command::Cluster { .. }
            | Command::RunAll { .. }
            | Command::Synth { .. }
    );
    let seed = if needs_seed {
        Some(cfg.resolve_seed()?)
    } else {
        None
    };
    let seed_value = seed.unwrap_or_default();

    let mut rec = Recorder::new(&cfg.out_dir())?;
    let (name, params): (&str, Params) = match cli.command {
        Command::Tile { manifest } => ("tile", commands::tile(&cfg, &mut rec, manifest, seed_value)?),
        Command::FeaturesValidate { features } => {
            let f = or_config(features, &cfg.paths.features, "features file")?;
            ("features-validate", commands::features_validate(&mut rec, f)?)
        }
        Command::Sweep {
            features, diagnosis, ..
        } => {
            let f = or_config(features, &cfg.paths.features, "features file")?;
            (
                "sweep",
                commands::sweep(&cfg, &mut rec, f, diagnosis, seed_value)?,
            )
        }
        Command::Cluster {
            features,
            diagnosis,
            k,
        } => {
            let f = or_config(features, &cfg.paths.features, "features file")?;
            (
                "cluster",
                commands::cluster(&cfg, &mut rec, f, diagnosis, k, seed_value)?,
            )
        }
        Command::Catalog {
            features,
            model,
            assignments,
            diagnosis,
            annotations,
            tile_manifest,
            tile_dir,
        } => {
            let args = CatalogArgs {
                features: or_config(features, &cfg.paths.features, "features file")?,
                model,
                assignments,
                diagnosis,
                annotations,
                tile_manifest,
                tile_dir,
            };
            ("catalog", commands::catalog(&cfg, &mut rec, args)?)
        }
        Command::Classify {
            train,
            test,
            model,
            assignments,
            lesions,
        } => {
            let args = ClassifyArgs {
                train: or_config(train, &cfg.paths.features, "training features")?,
                test: or_config(test, &cfg.paths.test_features, "test features")?,
                model,
                assignments,
                lesions,
            };
            ("classify", commands::classify(&cfg, &mut rec, args)?)
        }
        Command::Evaluate { predictions } => ("evaluate", commands::evaluate_cmd(&mut rec, predictions)?),
        Command::Compare { catalogs } => ("compare", commands::compare(&mut rec, catalogs)?),
        Command::RunAll { .. } => ("run-all", commands::run_all(&cfg, &mut rec, seed_value)?),
        Command::Synth { test_images } => ("synth", commands::synth(&mut rec, seed_value, test_images)?),
    };
    let manifest = rec.finish(name, params, cfg.to_toml())?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
