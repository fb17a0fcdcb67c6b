//! Seeded synthetic feature corpora for tests, fixtures and demos.
//!
//! A corpus is built from latent direction prototypes. Every image draws one
//! or two prototypes and each of its tiles is a noisy copy of one of them,
//! scaled by a random positive magnitude (normalization removes it again).

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::Result;
use crate::feature_store::{FeatureSet, TileRecord};
use crate::numeric::{dot, norm};

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSpec {
    pub labels: Vec<String>,
    pub images_per_class: usize,
    /// Inclusive range of tiles per image.
    pub tiles_per_image: (usize, usize),
    /// Number of latent prototypes (per class, or in total when shared).
    pub prototypes: usize,
    pub dim: usize,
    /// Standard deviation of the isotropic tile noise, relative to a unit
    /// prototype. The expected noise norm is about `noise`.
    pub noise: f64,
    /// One prototype pool for all classes instead of one pool per class.
    pub shared_prototypes: bool,
    /// Spread of the per-class log-preferences over a shared pool; 0 means
    /// every class uses every prototype equally.
    pub class_preference_spread: f64,
    /// Sub-modes per prototype. Tiles pick a sub-mode at random, so one
    /// image varies within each of its patterns.
    pub submodes: usize,
    /// Offset norm of a sub-mode from its prototype before re-normalization.
    pub submode_spread: f64,
    /// Probability that an image shows two prototypes rather than one.
    pub two_prototype_rate: f64,
    /// Prefix for generated image ids.
    pub image_prefix: String,
    pub seed: u64,
}

impl CorpusSpec {
    /// Six classes of 30 images with about 8 tiles each. Every class has
    /// its own 10 prototypes, each with 6 sub-modes.
    pub fn desk_scale(seed: u64) -> Self {
        Self {
            labels: ["AKIEC", "BCC", "BKL", "DF", "MEL", "NV"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            images_per_class: 30,
            tiles_per_image: (6, 10),
            prototypes: 10,
            dim: 32,
            noise: 0.35,
            shared_prototypes: false,
            class_preference_spread: 0.0,
            submodes: 6,
            submode_spread: 1.0,
            two_prototype_rate: 0.5,
            image_prefix: "img".into(),
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub feature_set: FeatureSet,
    /// Unit prototype directions; per-class pools are concatenated.
    pub prototypes: Vec<Vec<f64>>,
    /// Ground-truth prototype index of every tile, in record order.
    pub tile_prototypes: Vec<usize>,
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = norm(&v);
        if n > 1e-9 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn weighted_pick(rng: &mut ChaCha8Rng, weights: &[f64], exclude: Option<usize>) -> usize {
    let total: f64 = weights
        .iter()
        .enumerate()
        .filter(|(i, _)| Some(*i) != exclude)
        .map(|(_, w)| w)
        .sum();
    let target = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = 0;
    for (i, w) in weights.iter().enumerate() {
        if Some(i) == exclude {
            continue;
        }
        acc += w;
        last = i;
        if acc > target {
            return i;
        }
    }
    last
}

struct Latent {
    prototypes: Vec<Vec<f64>>,
    submodes: Vec<Vec<Vec<f64>>>,
    /// Per-class prototype weights.
    weights: Vec<Vec<f64>>,
}

fn latent(spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Latent {
    let pools = if spec.shared_prototypes {
        1
    } else {
        spec.labels.len()
    };
    let prototypes: Vec<Vec<f64>> = (0..pools * spec.prototypes)
        .map(|_| random_unit(rng, spec.dim))
        .collect();
    let submodes = prototypes
        .iter()
        .map(|p| {
            (0..spec.submodes.max(1))
                .map(|_| {
                    let offset = random_unit(rng, spec.dim);
                    let v: Vec<f64> = p
                        .iter()
                        .zip(&offset)
                        .map(|(a, b)| a + spec.submode_spread * b)
                        .collect();
                    let n = norm(&v);
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect()
        })
        .collect();
    let weights = spec
        .labels
        .iter()
        .map(|_| {
            (0..spec.prototypes)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(rng);
                    (spec.class_preference_spread * z).exp()
                })
                .collect()
        })
        .collect();
    Latent {
        prototypes,
        submodes,
        weights,
    }
}

fn sample_images(
    spec: &CorpusSpec,
    latent: &Latent,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    images_per_class: usize,
) -> Result<Corpus> {
    let mut records = Vec::new();
    let mut tile_prototypes = Vec::new();
    for (c, label) in spec.labels.iter().enumerate() {
        let offset = if spec.shared_prototypes {
            0
        } else {
            c * spec.prototypes
        };
        let weights = &latent.weights[c];
        for i in 0..images_per_class {
            let image_id = format!("{prefix}_{label}_{i:03}");
            let first = weighted_pick(rng, weights, None);
            let mut shown = vec![first];
            if spec.prototypes > 1 && rng.random::<f64>() < spec.two_prototype_rate {
                shown.push(weighted_pick(rng, weights, Some(first)));
            }
            let n_tiles = rng.random_range(spec.tiles_per_image.0..=spec.tiles_per_image.1);
            for t in 0..n_tiles {
                let p = offset + shown[rng.random_range(0..shown.len())];
                let modes = &latent.submodes[p];
                let mode = &modes[rng.random_range(0..modes.len())];
                let scale = rng.random_range(0.5..2.0);
                let features: Vec<f64> = mode
                    .iter()
                    .map(|v| {
                        let e: f64 = StandardNormal.sample(rng);
                        scale * (v + spec.noise * e / (spec.dim as f64).sqrt())
                    })
                    .collect();
                let (x, y) = ((t % 4) as u32 * 96, (t / 4) as u32 * 96);
                records.push(TileRecord {
                    tile_id: format!("{image_id}_{x}_{y}"),
                    image_id: image_id.clone(),
                    diagnosis: label.clone(),
                    x,
                    y,
                    features,
                });
                tile_prototypes.push(p);
            }
        }
    }
    Ok(Corpus {
        feature_set: FeatureSet::from_records(spec.dim, spec.labels.clone(), records)?,
        prototypes: latent.prototypes.clone(),
        tile_prototypes,
    })
}

/// Generates a corpus. Deterministic for a given spec.
pub fn generate_corpus(spec: &CorpusSpec) -> Result<Corpus> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = latent(spec, &mut rng);
    sample_images(spec, &latent, &mut rng, &spec.image_prefix, spec.images_per_class)
}

/// A training corpus as from [`generate_corpus`] plus a held-out corpus of
/// new images drawn from the same prototypes. Held-out image ids use
/// `test_prefix`.
pub fn generate_split(
    spec: &CorpusSpec,
    test_images_per_class: usize,
    test_prefix: &str,
) -> Result<(Corpus, Corpus)> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = latent(spec, &mut rng);
    let train = sample_images(spec, &latent, &mut rng, &spec.image_prefix, spec.images_per_class)?;
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(1);
    let test = sample_images(spec, &latent, &mut test_rng, test_prefix, test_images_per_class)?;
    Ok((train, test))
}

#[derive(Debug, Clone)]
pub struct SeparatedGroups {
    pub feature_set: FeatureSet,
    pub truth: Vec<usize>,
    pub centers: Vec<Vec<f64>>,
}

/// Groups of unit vectors scattered around well-separated centers.
///
/// Centers form a regular simplex (antipodal for two groups); every member
/// lies within cosine distance `max_intra` of its center.
pub fn separated_groups(
    groups: usize,
    dim: usize,
    per_group: usize,
    max_intra: f64,
    seed: u64,
) -> Result<SeparatedGroups> {
    assert!(groups >= 1 && dim >= groups, "need dim >= groups for a simplex");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // simplex: centered basis vectors e_g - mean, embedded in `dim` dims,
    // then randomly rotated by a sign flip and coordinate shuffle
    let mut centers: Vec<Vec<f64>> = (0..groups)
        .map(|g| {
            let mut v = vec![0.0; dim];
            for (i, x) in v.iter_mut().enumerate().take(groups) {
                *x = if i == g { 1.0 } else { 0.0 } - 1.0 / groups as f64;
            }
            if groups == 1 {
                v[0] = 1.0;
            }
            let n = norm(&v);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect();
    let perm = sample(&mut rng, dim, dim).into_vec();
    let signs: Vec<f64> = (0..dim)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();
    for c in centers.iter_mut() {
        *c = perm.iter().zip(&signs).map(|(&p, s)| c[p] * s).collect();
    }

    let max_angle = (1.0 - max_intra).acos();
    let mut records = Vec::new();
    let mut truth = Vec::new();
    let mut order: Vec<(usize, usize)> = (0..groups)
        .flat_map(|g| (0..per_group).map(move |i| (g, i)))
        .collect();
    // interleave groups so record order carries no label information
    for i in (1..order.len()).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    for (n, (g, _)) in order.into_iter().enumerate() {
        let center = &centers[g];
        let mut u = random_unit(&mut rng, dim);
        let proj = dot(&u, center);
        u.iter_mut().zip(center).for_each(|(x, c)| *x -= proj * c);
        let un = norm(&u);
        let theta = rng.random::<f64>() * max_angle * 0.999;
        let features: Vec<f64> = center
            .iter()
            .zip(&u)
            .map(|(c, x)| c * theta.cos() + x / un * theta.sin())
            .collect();
        records.push(TileRecord {
            tile_id: format!("t{n:04}"),
            image_id: format!("img{:03}", n / 4),
            diagnosis: "A".into(),
            x: 0,
            y: 0,
            features,
        });
        truth.push(g);
    }
    let feature_set = FeatureSet::from_records(dim, vec!["A".into()], records)?;
    Ok(SeparatedGroups {
        feature_set,
        truth,
        centers,
    })
}
