//! Run configuration: a TOML file, overridden by command-line flags.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use pattern_atlas::model_selection::{SelectionMethod, SweepParams};
use pattern_atlas::preprocess::{ClassCaps, ColorConstancyScope, TileSpec, TilingOptions};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "PATTERN_ATLAS_SEED";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub method: Option<SelectionMethod>,
    pub paths: PathsConfig,
    pub tiling: TilingConfig,
    pub caps: CapsConfig,
    pub sweep: SweepConfig,
    pub kmeans: KMeansConfig,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub out_dir: Option<PathBuf>,
    pub ingest_manifest: Option<PathBuf>,
    pub features: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
    /// Optional `lesion_id,true_label` list; lesions absent from the test
    /// features are reported as excluded.
    pub lesions: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    /// Tile manifest used to locate representative images for reports.
    pub tile_manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingConfig {
    pub tile_size: u32,
    pub overlap_fraction: f64,
    pub min_lesion_fraction: f64,
    pub color_constancy: ColorConstancyScope,
    pub minkowski_p: f64,
}

impl Default for TilingConfig {
    fn default() -> Self {
        let spec = TileSpec::default();
        let opts = TilingOptions::default();
        Self {
            tile_size: spec.tile_size,
            overlap_fraction: spec.overlap_fraction,
            min_lesion_fraction: spec.min_lesion_fraction,
            color_constancy: opts.color_constancy,
            minkowski_p: opts.minkowski_p,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapsConfig {
    pub max_images_per_class: BTreeMap<String, usize>,
    pub max_tiles_per_class: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k_min: usize,
    pub k_max: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_min: SweepParams::DEFAULT_K_MIN,
            k_max: SweepParams::DEFAULT_K_MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        let p = pattern_atlas::clustering::KMeansParams::new(1, 0);
        Self {
            max_iter: p.max_iter,
            tol: p.tol,
        }
    }
}

impl RunConfig {
    /// Parses a config file. Relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.is_file() {
            return Err(CliError::MissingInput(path.to_path_buf()));
        }
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        cfg.paths.resolve_against(base);
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    /// Canonical TOML of the effective configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Seed from the config or, failing that, the environment.
    pub fn resolve_seed(&mut self) -> CliResult<u64> {
        if let Some(s) = self.seed {
            return Ok(s);
        }
        match std::env::var(SEED_ENV) {
            Ok(v) => {
                let s = v
                    .trim()
                    .parse::<u64>()
                    .map_err(|_| CliError::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
                self.seed = Some(s);
                Ok(s)
            }
            Err(_) => Err(CliError::Config(format!(
                "a seed is required: pass --seed, set `seed` in the config, or set {SEED_ENV}"
            ))),
        }
    }

    pub fn method(&self) -> SelectionMethod {
        self.method.unwrap_or(SelectionMethod::Both)
    }

    pub fn sweep_params(&self, seed: u64) -> SweepParams {
        SweepParams {
            k_min: self.sweep.k_min,
            k_max: self.sweep.k_max,
            seed,
            max_iter: self.kmeans.max_iter,
            tol: self.kmeans.tol,
        }
    }

    pub fn tiling_options(&self, seed: u64) -> TilingOptions {
        TilingOptions {
            tile_spec: TileSpec {
                tile_size: self.tiling.tile_size,
                overlap_fraction: self.tiling.overlap_fraction,
                min_lesion_fraction: self.tiling.min_lesion_fraction,
            },
            caps: ClassCaps {
                max_images_per_class: self.caps.max_images_per_class.clone(),
                max_tiles_per_class: self.caps.max_tiles_per_class.clone(),
                seed,
            },
            color_constancy: self.tiling.color_constancy,
            minkowski_p: self.tiling.minkowski_p,
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.paths.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.sweep.k_min < 1 || self.sweep.k_min > self.sweep.k_max {
            return Err(CliError::Config(format!(
                "sweep range [{}, {}] is empty or starts below 1",
                self.sweep.k_min, self.sweep.k_max
            )));
        }
        if self.kmeans.max_iter == 0 || self.kmeans.tol.is_nan() || self.kmeans.tol < 0.0 {
            return Err(CliError::Config(
                "kmeans.max_iter must be positive and kmeans.tol non-negative".into(),
            ));
        }
        Ok(())
    }
}

impl PathsConfig {
    fn resolve_against(&mut self, base: &Path) {
        for p in [
            &mut self.out_dir,
            &mut self.ingest_manifest,
            &mut self.features,
            &mut self.test_features,
            &mut self.lesions,
            &mut self.annotations,
            &mut self.tile_manifest,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
    }
}

/// Fails with a missing-input error naming `path` unless it is a file.
pub fn require_file(path: &Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingInput(path.to_path_buf()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::parse("seed = 4\nmethod = \"compactness\"\n[sweep]\nk_max = 20\n").unwrap();
        assert_eq!(cfg.seed, Some(4));
        assert_eq!(cfg.method(), SelectionMethod::Compactness);
        assert_eq!((cfg.sweep.k_min, cfg.sweep.k_max), (2, 20));
        assert_eq!(cfg.tiling.tile_size, 128);
        assert_eq!(cfg.kmeans.max_iter, 300);
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = RunConfig::parse("seed = 4\n\n[sweep]\nk_max = \"many\"\n").unwrap_err();
        assert!(err.to_string().contains("line 4"), "{err}");
        assert!(RunConfig::parse("bogus = 1\n").is_err());
    }

    #[test]
    fn relative_paths_follow_the_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(
            &path,
            "[paths]\nfeatures = \"train.csv\"\nout_dir = \"/abs/out\"\n",
        )
        .unwrap();
        let cfg = RunConfig::load(&path).unwrap();
        assert_eq!(cfg.paths.features, Some(dir.path().join("train.csv")));
        assert_eq!(cfg.paths.out_dir, Some(PathBuf::from("/abs/out")));
    }

    #[test]
    fn caps_parse() {
        let cfg = RunConfig::parse("[caps]\nmax_images_per_class = { NV = 1100 }\n").unwrap();
        assert_eq!(cfg.tiling_options(1).caps.max_images_per_class["NV"], 1100);
    }
}
