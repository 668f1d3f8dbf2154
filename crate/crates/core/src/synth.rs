//! Synthetic scenes with planted ground truth.
//!
//! A fixed dictionary of class prototypes (unit vectors, pairwise cosine at
//! most `class_margin`) plus one background prototype is drawn from
//! `dictionary_seed`, standing in for a closed set of object categories.
//! Each scene picks `K` distinct classes, places one disjoint rectangle per
//! source, fills source cells with the class
//! prototype and every other cell with the background prototype, and adds
//! isotropic Gaussian noise. The audio embedding is the mean of the source
//! prototypes, or the background prototype for a silent scene.

use rand::distr::weighted::WeightedIndex;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{dot, norm, AudioEmbedding, BinaryMap, FeatureGrid, VectorBatch};

const PROTOTYPE_ATTEMPTS: usize = 20_000;
const PLACEMENT_ATTEMPTS: usize = 2_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Size of the class dictionary scenes draw their sources from.
    pub num_classes: usize,
    /// Upper bound on the cosine between two class prototypes.
    pub class_margin: f64,
    /// Upper bound on the cosine between a class and the background.
    pub background_margin: f64,
    /// Per-channel standard deviation of the feature noise.
    pub noise: f64,
    /// Relative weight of each source count, indexed by `K`.
    pub k_weights: Vec<f64>,
    /// Rectangle side lengths are drawn uniformly from `min_side..=max_side`.
    pub min_side: usize,
    pub max_side: usize,
    pub dictionary_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            height: 7,
            width: 7,
            channels: 32,
            num_classes: 8,
            class_margin: 0.2,
            background_margin: 0.0,
            noise: 0.0,
            k_weights: vec![0.0, 1.0, 1.0, 1.0],
            min_side: 1,
            max_side: 3,
            dictionary_seed: 0x5EED_D1C7,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return bad("grid dims must be positive".into());
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return bad(format!("noise must be finite and >= 0, got {}", self.noise));
        }
        if self.k_weights.is_empty()
            || self
                .k_weights
                .iter()
                .any(|w| !(*w >= 0.0) || !w.is_finite())
            || self.k_weights.iter().sum::<f64>() <= 0.0
        {
            return bad("k_weights must be non-negative with a positive sum".into());
        }
        if self.max_k() > self.num_classes {
            return bad(format!(
                "K up to {} needs at least that many classes, have {}",
                self.max_k(),
                self.num_classes
            ));
        }
        if self.min_side == 0 || self.min_side > self.max_side {
            return bad("need 1 <= min_side <= max_side".into());
        }
        if self.max_side > self.height.min(self.width) {
            return bad("max_side exceeds the grid".into());
        }
        if self.max_k() * self.min_side * self.min_side > self.height * self.width {
            return bad("sources cannot fit on the grid".into());
        }
        Ok(())
    }

    /// Largest `K` with positive weight.
    pub fn max_k(&self) -> usize {
        self.k_weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }
}

/// Background and class prototypes shared by all scenes of a config.
#[derive(Debug, Clone, PartialEq)]
pub struct Dictionary {
    pub background: Vec<f64>,
    pub classes: Vec<Vec<f64>>,
}

fn gaussian_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Draws the dictionary.
///
/// The background prototype is the first coordinate axis. Classes are random
/// unit vectors with an exactly zero first coordinate, tilted towards the
/// background by `background_margin` when that is negative. With
/// `class_margin > 0` classes are rejection-sampled until every pairwise
/// cosine is within the margin; with `class_margin == 0` they are
/// orthonormalized instead.
pub fn build_dictionary(cfg: &SynthConfig) -> Result<Dictionary> {
    cfg.validate()?;
    let c = cfg.channels;
    if c < 2 {
        return Err(Error::Config("need at least 2 channels".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.dictionary_seed);
    let mut background = vec![0.0; c];
    background[0] = 1.0;
    let tilt = cfg.background_margin.min(0.0);
    if tilt <= -1.0 {
        return Err(Error::Config("background_margin must exceed -1".into()));
    }
    let mut directions: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    let mut attempts = 0;
    while directions.len() < cfg.num_classes {
        attempts += 1;
        if attempts > PROTOTYPE_ATTEMPTS {
            return Err(Error::Config(format!(
                "could not place {} prototypes with pairwise cosine <= {} in {} dims",
                cfg.num_classes, cfg.class_margin, c
            )));
        }
        let mut v = gaussian_unit(&mut rng, c - 1);
        if cfg.class_margin == 0.0 {
            for u in &directions {
                let along = dot(&v, u);
                v.iter_mut().zip(u).for_each(|(x, y)| *x -= along * y);
            }
            let n = norm(&v);
            if n < 1e-6 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            directions.push(v);
            continue;
        }
        let cos_of = |u: &[f64]| (1.0 - tilt * tilt) * dot(u, &v) + tilt * tilt;
        if directions.iter().all(|u| cos_of(u) <= cfg.class_margin) {
            directions.push(v);
        }
    }
    let scale = (1.0 - tilt * tilt).sqrt();
    let classes = directions
        .into_iter()
        .map(|d| {
            std::iter::once(tilt)
                .chain(d.into_iter().map(|x| x * scale))
                .collect()
        })
        .collect();
    Ok(Dictionary {
        background,
        classes,
    })
}

/// Planted ground truth of one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub k: usize,
    pub masks: Vec<BinaryMap>,
    /// Dictionary index of each source.
    pub classes: Vec<usize>,
    pub prototypes: Vec<Vec<f64>>,
    pub background: Vec<f64>,
    pub seed: u64,
}

/// One generated clip: batch-1 features and audio plus truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub visual: FeatureGrid,
    pub audio: AudioEmbedding,
    pub truth: SceneTruth,
}

/// Counter-based seed for the `index`-th scene of a stream (splitmix64).
pub fn scene_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct SceneGenerator {
    cfg: SynthConfig,
    dictionary: Dictionary,
    k_dist: WeightedIndex<f64>,
}

impl SceneGenerator {
    pub fn new(cfg: SynthConfig) -> Result<Self> {
        let dictionary = build_dictionary(&cfg)?;
        let k_dist = WeightedIndex::new(&cfg.k_weights)
            .map_err(|e| Error::Config(format!("k_weights: {e}")))?;
        Ok(Self {
            cfg,
            dictionary,
            k_dist,
        })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn dictionary(&self) -> &Dictionary {
        &self.dictionary
    }

    /// Scene with `K` drawn from the configured weights.
    pub fn generate(&self, seed: u64) -> Result<Scene> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = self.k_dist.sample(&mut rng);
        self.build(k, seed, &mut rng)
    }

    /// Scene with exactly `k` sources.
    pub fn generate_with_k(&self, k: usize, seed: u64) -> Result<Scene> {
        if k > self.cfg.num_classes {
            return Err(Error::Config(format!(
                "{k} sources but only {} classes",
                self.cfg.num_classes
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.build(k, seed, &mut rng)
    }

    fn build(&self, k: usize, seed: u64, rng: &mut ChaCha8Rng) -> Result<Scene> {
        let cfg = &self.cfg;
        let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
        let classes = sample(rng, cfg.num_classes, k).into_vec();
        let masks = place_rectangles(cfg, k, rng)?;

        let mut owner = vec![None; h * w];
        for (s, m) in masks.iter().enumerate() {
            for (cell, &inside) in m.cells().iter().enumerate() {
                if inside {
                    owner[cell] = Some(s);
                }
            }
        }
        let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
        let mut data = Vec::with_capacity(h * w * c);
        for cell in owner {
            let proto = match cell {
                Some(s) => &self.dictionary.classes[classes[s]],
                None => &self.dictionary.background,
            };
            for &v in proto {
                let eps = if cfg.noise > 0.0 {
                    noise.sample(rng)
                } else {
                    0.0
                };
                data.push(v + eps);
            }
        }
        let prototypes: Vec<Vec<f64>> = classes
            .iter()
            .map(|&i| self.dictionary.classes[i].clone())
            .collect();
        let audio = if k == 0 {
            self.dictionary.background.clone()
        } else {
            (0..c)
                .map(|ch| prototypes.iter().map(|p| p[ch]).sum::<f64>() / k as f64)
                .collect()
        };
        Ok(Scene {
            visual: FeatureGrid::new(1, h, w, c, data)?,
            audio: VectorBatch::new(1, c, audio)?,
            truth: SceneTruth {
                k,
                masks,
                classes,
                prototypes,
                background: self.dictionary.background.clone(),
                seed,
            },
        })
    }
}

fn place_rectangles(cfg: &SynthConfig, k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<BinaryMap>> {
    let (h, w) = (cfg.height, cfg.width);
    for _ in 0..PLACEMENT_ATTEMPTS {
        let mut taken = BinaryMap::empty(h, w);
        let mut masks = Vec::with_capacity(k);
        for _ in 0..k {
            let rh = rng.random_range(cfg.min_side..=cfg.max_side);
            let rw = rng.random_range(cfg.min_side..=cfg.max_side);
            let top = rng.random_range(0..=h - rh);
            let left = rng.random_range(0..=w - rw);
            let mut m = BinaryMap::empty(h, w);
            for i in top..top + rh {
                for j in left..left + rw {
                    m.set(i, j, true);
                }
            }
            if m.intersects(&taken) {
                break;
            }
            taken.union_with(&m);
            masks.push(m);
        }
        if masks.len() == k {
            return Ok(masks);
        }
    }
    Err(Error::Config(format!(
        "could not place {k} disjoint sources"
    )))
}

/// Convenience wrapper: build the generator and draw one scene.
pub fn generate_scene(cfg: &SynthConfig, seed: u64) -> Result<Scene> {
    SceneGenerator::new(cfg.clone())?.generate(seed)
}

/// Serialized truth sidecar; masks are run-length encoded per row as
/// `[start, length]` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthFile {
    pub k: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub classes: Vec<usize>,
    pub masks: Vec<Vec<Vec<[usize; 2]>>>,
}

pub fn encode_mask(mask: &BinaryMap) -> Vec<Vec<[usize; 2]>> {
    (0..mask.height())
        .map(|i| {
            let mut runs = Vec::new();
            let mut j = 0;
            while j < mask.width() {
                if mask.get(i, j) {
                    let start = j;
                    while j < mask.width() && mask.get(i, j) {
                        j += 1;
                    }
                    runs.push([start, j - start]);
                } else {
                    j += 1;
                }
            }
            runs
        })
        .collect()
}

pub fn decode_mask(height: usize, width: usize, rows: &[Vec<[usize; 2]>]) -> Result<BinaryMap> {
    if rows.len() != height {
        return Err(Error::Format(format!(
            "mask has {} rows, expected {height}",
            rows.len()
        )));
    }
    let mut m = BinaryMap::empty(height, width);
    for (i, runs) in rows.iter().enumerate() {
        for &[start, len] in runs {
            if start + len > width {
                return Err(Error::Format(format!(
                    "run [{start}, {len}] overflows row {i}"
                )));
            }
            for j in start..start + len {
                m.set(i, j, true);
            }
        }
    }
    Ok(m)
}

impl TruthFile {
    pub fn from_truth(truth: &SceneTruth, height: usize, width: usize) -> Self {
        Self {
            k: truth.k,
            seed: truth.seed,
            height,
            width,
            classes: truth.classes.clone(),
            masks: truth.masks.iter().map(encode_mask).collect(),
        }
    }

    pub fn masks(&self) -> Result<Vec<BinaryMap>> {
        if self.masks.len() != self.k {
            return Err(Error::Format(format!(
                "truth lists {} masks for k = {}",
                self.masks.len(),
                self.k
            )));
        }
        self.masks
            .iter()
            .map(|m| decode_mask(self.height, self.width, m))
            .collect()
    }
}
