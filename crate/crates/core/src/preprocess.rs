//! Tiling of masked lesion images, color constancy and per-class caps.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, RgbImage};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::fnv1a;

/// An RGB image with its binary lesion mask (nonzero = lesion).
#[derive(Debug, Clone)]
pub struct MaskedImage {
    pub image_id: String,
    pub diagnosis: String,
    pixels: RgbImage,
    mask: GrayImage,
}

impl MaskedImage {
    pub fn new(
        image_id: impl Into<String>,
        diagnosis: impl Into<String>,
        pixels: RgbImage,
        mask: GrayImage,
    ) -> Result<Self> {
        if pixels.dimensions() != mask.dimensions() {
            return Err(Error::InvalidParameter(format!(
                "mask is {:?} but image is {:?}",
                mask.dimensions(),
                pixels.dimensions()
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            diagnosis: diagnosis.into(),
            pixels,
            mask,
        })
    }

    pub fn pixels(&self) -> &RgbImage {
        &self.pixels
    }

    pub fn mask(&self) -> &GrayImage {
        &self.mask
    }

    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TileSpec {
    pub tile_size: u32,
    pub overlap_fraction: f64,
    pub min_lesion_fraction: f64,
}

impl Default for TileSpec {
    fn default() -> Self {
        Self {
            tile_size: 128,
            overlap_fraction: 0.25,
            min_lesion_fraction: 0.60,
        }
    }
}

impl TileSpec {
    pub fn validate(&self) -> Result<()> {
        if self.tile_size == 0 {
            return Err(Error::InvalidParameter("tile_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.overlap_fraction) {
            return Err(Error::InvalidParameter(format!(
                "overlap_fraction {} outside [0, 1)",
                self.overlap_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.min_lesion_fraction) {
            return Err(Error::InvalidParameter(format!(
                "min_lesion_fraction {} outside [0, 1]",
                self.min_lesion_fraction
            )));
        }
        if self.stride() < 1 {
            return Err(Error::InvalidParameter(format!(
                "tile_size {} with overlap {} gives a zero stride",
                self.tile_size, self.overlap_fraction
            )));
        }
        Ok(())
    }

    pub fn stride(&self) -> u32 {
        (f64::from(self.tile_size) * (1.0 - self.overlap_fraction)).round() as u32
    }

    /// Window origins along one axis of the given extent.
    pub fn origins(&self, extent: u32) -> Vec<u32> {
        let stride = self.stride().max(1);
        if extent < self.tile_size {
            return Vec::new();
        }
        (0..=extent - self.tile_size).step_by(stride as usize).collect()
    }
}

#[derive(Debug, Clone)]
pub struct Tile {
    pub x: u32,
    pub y: u32,
    pub lesion_fraction: f64,
    pub pixels: RgbImage,
}

/// Summed-area table over the mask, one row and column of zero padding.
struct MaskIntegral {
    width: usize,
    sums: Vec<u64>,
}

impl MaskIntegral {
    fn new(mask: &GrayImage) -> Self {
        let (w, h) = (mask.width() as usize, mask.height() as usize);
        let width = w + 1;
        let mut sums = vec![0u64; width * (h + 1)];
        for y in 0..h {
            let mut row = 0u64;
            for x in 0..w {
                row += u64::from(mask.get_pixel(x as u32, y as u32)[0] != 0);
                sums[(y + 1) * width + x + 1] = sums[y * width + x + 1] + row;
            }
        }
        Self { width, sums }
    }

    fn count(&self, x: u32, y: u32, size: u32) -> u64 {
        let (x0, y0) = (x as usize, y as usize);
        let (x1, y1) = (x0 + size as usize, y0 + size as usize);
        let s = |x: usize, y: usize| self.sums[y * self.width + x];
        s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0)
    }
}

/// Slides a window over the image and keeps tiles with enough lesion area.
///
/// Origins sit on multiples of the stride with the window fully inside the
/// image; no extra window is aligned to the right or bottom edge. Output is
/// row-major. An image smaller than the tile yields no tiles.
pub fn extract_tiles(img: &MaskedImage, spec: &TileSpec) -> Result<Vec<Tile>> {
    spec.validate()?;
    let integral = MaskIntegral::new(&img.mask);
    let area = f64::from(spec.tile_size) * f64::from(spec.tile_size);
    let xs = spec.origins(img.width());
    let mut tiles = Vec::new();
    for y in spec.origins(img.height()) {
        for &x in &xs {
            let fraction = integral.count(x, y, spec.tile_size) as f64 / area;
            if fraction >= spec.min_lesion_fraction {
                let pixels =
                    image::imageops::crop_imm(&img.pixels, x, y, spec.tile_size, spec.tile_size).to_image();
                tiles.push(Tile {
                    x,
                    y,
                    lesion_fraction: fraction,
                    pixels,
                });
            }
        }
    }
    Ok(tiles)
}

pub const DEFAULT_MINKOWSKI_P: f64 = 6.0;

/// Shades-of-Gray illuminant estimate per channel, on the [0, 1] scale.
pub fn illuminant_estimate(pixels: &RgbImage, p: f64) -> [f64; 3] {
    let n = f64::from(pixels.width()) * f64::from(pixels.height());
    let mut acc = [0.0; 3];
    for px in pixels.pixels() {
        for c in 0..3 {
            acc[c] += (f64::from(px[c]) / 255.0).powf(p);
        }
    }
    acc.map(|a| if n > 0.0 { (a / n).powf(1.0 / p) } else { 0.0 })
}

/// Per-channel gains that bring every illuminant estimate to the mean of the
/// three. `None` when some channel has a zero estimate.
pub fn shades_of_gray_gains(pixels: &RgbImage, p: f64) -> Option<[f64; 3]> {
    let e = illuminant_estimate(pixels, p);
    if e.iter().any(|v| *v <= 0.0) {
        return None;
    }
    let target = (e[0] + e[1] + e[2]) / 3.0;
    Some(e.map(|v| target / v))
}

/// Applies gains without clipping or rounding.
pub fn apply_gains_unquantized(pixels: &RgbImage, gains: [f64; 3]) -> Vec<[f64; 3]> {
    pixels
        .pixels()
        .map(|px| [0, 1, 2].map(|c| f64::from(px[c]) * gains[c]))
        .collect()
}

fn quantize(v: f64) -> u8 {
    v.round_ties_even().clamp(0.0, 255.0) as u8
}

pub fn apply_gains(pixels: &RgbImage, gains: [f64; 3]) -> RgbImage {
    let mut out = pixels.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            px[c] = quantize(f64::from(px[c]) * gains[c]);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct Corrected {
    pub pixels: RgbImage,
    /// `None` when the input was returned unchanged.
    pub gains: Option<[f64; 3]>,
    pub warning: Option<String>,
}

/// Shades-of-Gray color constancy with Minkowski order `p`.
///
/// A tile with a channel that is entirely zero (including an all-black tile)
/// is returned unchanged with a warning.
pub fn color_constancy(pixels: &RgbImage, p: f64) -> Result<Corrected> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Minkowski order {p} must be finite and >= 1"
        )));
    }
    Ok(match shades_of_gray_gains(pixels, p) {
        Some(gains) => Corrected {
            pixels: apply_gains(pixels, gains),
            gains: Some(gains),
            warning: None,
        },
        None => Corrected {
            pixels: pixels.clone(),
            gains: None,
            warning: Some("a channel is entirely zero; color constancy skipped".into()),
        },
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColorConstancyScope {
    #[default]
    PerTile,
    PerImage,
    Off,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassCaps {
    pub max_images_per_class: BTreeMap<String, usize>,
    pub max_tiles_per_class: BTreeMap<String, usize>,
    pub seed: u64,
}

impl ClassCaps {
    pub fn validate(&self) -> Result<()> {
        for (label, cap) in self.max_images_per_class.iter().chain(&self.max_tiles_per_class) {
            if *cap == 0 {
                return Err(Error::InvalidParameter(format!(
                    "cap for class {label:?} must be positive"
                )));
            }
        }
        Ok(())
    }

    pub fn cap_images<T>(&self, items: BTreeMap<String, Vec<T>>) -> BTreeMap<String, Vec<T>> {
        apply_caps(items, &self.max_images_per_class, self.seed, "images")
    }

    pub fn cap_tiles<T>(&self, items: BTreeMap<String, Vec<T>>) -> BTreeMap<String, Vec<T>> {
        apply_caps(items, &self.max_tiles_per_class, self.seed, "tiles")
    }
}

/// Reduces every class above its cap by uniform sampling without
/// replacement. Kept items stay in their original order. Each class and
/// stage draws from its own stream so results do not depend on which other
/// classes are present.
pub fn apply_caps<T>(
    items: BTreeMap<String, Vec<T>>,
    caps: &BTreeMap<String, usize>,
    seed: u64,
    stage: &str,
) -> BTreeMap<String, Vec<T>> {
    items
        .into_iter()
        .map(|(label, list)| {
            let list = match caps.get(&label) {
                Some(&cap) if list.len() > cap => {
                    let stream = fnv1a(format!("{stage}/{label}").as_bytes());
                    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ stream);
                    let mut keep = sample(&mut rng, list.len(), cap).into_vec();
                    keep.sort_unstable();
                    let mut keep = keep.into_iter().peekable();
                    list.into_iter()
                        .enumerate()
                        .filter_map(|(i, item)| {
                            (keep.peek() == Some(&i)).then(|| {
                                keep.next();
                                item
                            })
                        })
                        .collect()
                }
                _ => list,
            };
            (label, list)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestEntry {
    pub image_id: String,
    pub diagnosis: String,
    pub image_path: PathBuf,
    pub mask_path: PathBuf,
}

/// Reads an ingestion manifest. Relative paths resolve against the
/// manifest's directory.
pub fn load_ingest_manifest(path: &Path) -> Result<Vec<IngestEntry>> {
    let base = path.parent().unwrap_or(Path::new("")).to_path_buf();
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    let headers = reader.headers().map_err(|e| Error::csv(path, e))?.clone();
    let expected = ["image_id", "diagnosis", "image_path", "mask_path"];
    if headers.iter().ne(expected) {
        return Err(Error::format(
            path,
            format!("header must be {}", expected.join(",")),
        ));
    }
    let mut entries: Vec<IngestEntry> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for row in reader.deserialize() {
        let mut e: IngestEntry = row.map_err(|e| Error::csv(path, e))?;
        if !seen.insert(e.image_id.clone()) {
            return Err(Error::format(
                path,
                format!("duplicate image_id {:?}", e.image_id),
            ));
        }
        e.image_path = base.join(&e.image_path);
        e.mask_path = base.join(&e.mask_path);
        entries.push(e);
    }
    Ok(entries)
}

pub fn load_masked_image(entry: &IngestEntry) -> Result<MaskedImage> {
    let open = |p: &Path| {
        image::open(p).map_err(|source| Error::Image {
            path: p.to_path_buf(),
            source,
        })
    };
    let pixels = open(&entry.image_path)?.to_rgb8();
    let mask = open(&entry.mask_path)?.to_luma8();
    MaskedImage::new(&entry.image_id, &entry.diagnosis, pixels, mask)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TileManifestRow {
    pub tile_id: String,
    pub image_id: String,
    pub diagnosis: String,
    pub x: u32,
    pub y: u32,
    pub tile_path: String,
}

pub fn tile_id(image_id: &str, x: u32, y: u32) -> String {
    format!("{image_id}_{x}_{y}")
}

pub fn save_tile_manifest(path: &Path, rows: &[TileManifestRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::csv(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_tile_manifest(path: &Path) -> Result<Vec<TileManifestRow>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
    reader
        .deserialize()
        .map(|r| r.map_err(|e| Error::csv(path, e)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TilingOptions {
    pub tile_spec: TileSpec,
    pub caps: ClassCaps,
    pub color_constancy: ColorConstancyScope,
    pub minkowski_p: f64,
}

impl Default for TilingOptions {
    fn default() -> Self {
        Self {
            tile_spec: TileSpec::default(),
            caps: ClassCaps::default(),
            color_constancy: ColorConstancyScope::default(),
            minkowski_p: DEFAULT_MINKOWSKI_P,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTilingCounts {
    pub images: usize,
    pub images_after_cap: usize,
    pub images_without_tiles: usize,
    pub tiles: usize,
    pub tiles_after_cap: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TilingReport {
    pub per_class: BTreeMap<String, ClassTilingCounts>,
    pub warnings: Vec<String>,
}

struct PendingTile {
    row: TileManifestRow,
    pixels: RgbImage,
}

/// Runs the whole tiling stage: caps images, tiles and corrects them, caps
/// tiles, then writes PNGs under `out_dir/tiles` and the tile manifest.
pub fn run_tiling(
    ingest_manifest: &Path,
    out_dir: &Path,
    options: &TilingOptions,
) -> Result<(Vec<TileManifestRow>, TilingReport)> {
    options.tile_spec.validate()?;
    options.caps.validate()?;
    let p = options.minkowski_p;
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "Minkowski order {p} must be finite and >= 1"
        )));
    }
    let entries = load_ingest_manifest(ingest_manifest)?;
    let mut report = TilingReport::default();
    let mut by_class: BTreeMap<String, Vec<IngestEntry>> = BTreeMap::new();
    for e in entries {
        by_class.entry(e.diagnosis.clone()).or_default().push(e);
    }
    for (label, list) in &by_class {
        report.per_class.entry(label.clone()).or_default().images = list.len();
    }
    let by_class = options.caps.cap_images(by_class);

    let mut tiles_by_class: BTreeMap<String, Vec<PendingTile>> = BTreeMap::new();
    for (label, mut list) in by_class {
        list.sort_by(|a, b| a.image_id.cmp(&b.image_id));
        let per_image: Vec<(Vec<PendingTile>, Vec<String>)> = list
            .par_iter()
            .map(|entry| tile_one(entry, options, p))
            .collect::<Result<_>>()?;
        let counts = report.per_class.entry(label.clone()).or_default();
        counts.images_after_cap = list.len();
        let mut kept = Vec::new();
        for (tiles, warnings) in per_image {
            counts.images_without_tiles += usize::from(tiles.is_empty());
            kept.extend(tiles);
            report.warnings.extend(warnings);
        }
        counts.tiles = kept.len();
        tiles_by_class.insert(label, kept);
    }
    let tiles_by_class = options.caps.cap_tiles(tiles_by_class);

    let tile_dir = out_dir.join("tiles");
    fs::create_dir_all(&tile_dir).map_err(|e| Error::io(&tile_dir, e))?;
    let mut rows = Vec::new();
    for (label, tiles) in tiles_by_class {
        report.per_class.entry(label).or_default().tiles_after_cap = tiles.len();
        for t in tiles {
            let path = out_dir.join(&t.row.tile_path);
            t.pixels.save(&path).map_err(|source| Error::Image {
                path: path.clone(),
                source,
            })?;
            rows.push(t.row);
        }
    }
    let manifest = out_dir.join("tiles.csv");
    save_tile_manifest(&manifest, &rows)?;
    Ok((rows, report))
}

fn tile_one(entry: &IngestEntry, options: &TilingOptions, p: f64) -> Result<(Vec<PendingTile>, Vec<String>)> {
    let img = load_masked_image(entry)?;
    let mut warnings = Vec::new();
    let image_gains = match options.color_constancy {
        ColorConstancyScope::PerImage => {
            let g = shades_of_gray_gains(img.pixels(), p);
            if g.is_none() {
                warnings.push(format!(
                    "{}: a channel is entirely zero; color constancy skipped",
                    entry.image_id
                ));
            }
            g
        }
        _ => None,
    };
    let mut out = Vec::new();
    for tile in extract_tiles(&img, &options.tile_spec)? {
        let id = tile_id(&entry.image_id, tile.x, tile.y);
        let pixels = match options.color_constancy {
            ColorConstancyScope::Off => tile.pixels,
            ColorConstancyScope::PerImage => match image_gains {
                Some(g) => apply_gains(&tile.pixels, g),
                None => tile.pixels,
            },
            ColorConstancyScope::PerTile => {
                let c = color_constancy(&tile.pixels, p)?;
                if let Some(w) = c.warning {
                    warnings.push(format!("{id}: {w}"));
                }
                c.pixels
            }
        };
        out.push(PendingTile {
            row: TileManifestRow {
                tile_path: format!("tiles/{id}.png"),
                tile_id: id,
                image_id: entry.image_id.clone(),
                diagnosis: entry.diagnosis.clone(),
                x: tile.x,
                y: tile.y,
            },
            pixels,
        });
    }
    Ok((out, warnings))
}
