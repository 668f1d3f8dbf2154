//! Sound-associated region localization: normalized audio-visual similarity
//! maps, their sigmoid soft masks, the sound-weighted visual features and the
//! background probe vector.

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grid::{
    cosine_backward, cosine_unchecked, AudioEmbedding, FeatureGrid, SimilarityMap, VectorBatch,
};

/// Self-pair similarity sums at or below this magnitude cannot be normalized.
pub const DEGENERATE_SUM: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SarlConfig {
    /// Mask center.
    pub alpha: f64,
    /// Mask sharpness, strictly positive.
    pub omega: f64,
    /// A cell is background when its mask value falls below this.
    pub background_cut: f64,
}

impl Default for SarlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.65,
            omega: 0.03,
            background_cut: 0.5,
        }
    }
}

impl SarlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0) || !self.omega.is_finite() {
            return Err(Error::Config(format!(
                "omega must be > 0, got {}",
                self.omega
            )));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("alpha must be finite".into()));
        }
        if !(self.background_cut > 0.0 && self.background_cut < 1.0) {
            return Err(Error::Config(format!(
                "background_cut must lie in (0,1), got {}",
                self.background_cut
            )));
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Per-sample soft masks `sigmoid((S - alpha) / omega)`, entries in (0,1).
#[derive(Debug, Clone, PartialEq)]
pub struct SoftMask {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl SoftMask {
    pub fn plane(&self, b: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[b * n..(b + 1) * n]
    }
}

fn check_pair(visual: &FeatureGrid, audio: &AudioEmbedding) -> Result<()> {
    if visual.channels() != audio.channels() {
        return Err(dim_err(format!(
            "visual has {} channels, audio has {}",
            visual.channels(),
            audio.channels()
        )));
    }
    if visual.batch() != audio.batch() {
        return Err(dim_err(format!(
            "visual batch {} vs audio batch {}",
            visual.batch(),
            audio.batch()
        )));
    }
    Ok(())
}

/// Raw cosines between every cell of image `n` and audio `m`.
pub(crate) fn cosine_plane(visual: &FeatureGrid, n: usize, audio: &[f64]) -> Vec<f64> {
    (0..visual.cells())
        .map(|k| cosine_unchecked(visual.cell_linear(n, k), audio))
        .collect()
}

/// Sum of image `n`'s cell cosines against its own audio, rejecting sums
/// too close to zero.
pub(crate) fn self_denominator(self_cos: &[f64], n: usize) -> Result<f64> {
    let d: f64 = self_cos.iter().sum();
    if d.abs() <= DEGENERATE_SUM || !d.is_finite() {
        return Err(Error::DegenerateNormalization {
            sample: n,
            denominator: d,
        });
    }
    Ok(d)
}

/// Similarity plane between image `n` and audio `m`, normalized by image
/// `n`'s self-pair cosine sum. Self-pair planes sum to one.
pub fn sim_map(
    visual: &FeatureGrid,
    audio: &AudioEmbedding,
    image_sample: usize,
    audio_sample: usize,
) -> Result<Vec<f64>> {
    check_pair(visual, audio)?;
    if image_sample >= visual.batch() || audio_sample >= audio.batch() {
        return Err(dim_err("sample index out of range"));
    }
    let self_cos = cosine_plane(visual, image_sample, audio.row(image_sample));
    let d = self_denominator(&self_cos, image_sample)?;
    let cos = if image_sample == audio_sample {
        self_cos
    } else {
        cosine_plane(visual, image_sample, audio.row(audio_sample))
    };
    Ok(cos.into_iter().map(|v| v / d).collect())
}

/// Self-pair maps `S^{n->n}` for every sample in the batch.
pub fn self_maps(visual: &FeatureGrid, audio: &AudioEmbedding) -> Result<SimilarityMap> {
    check_pair(visual, audio)?;
    let planes = (0..visual.batch())
        .map(|n| sim_map(visual, audio, n, n))
        .collect::<Result<Vec<_>>>()?;
    SimilarityMap::from_planes(visual.height(), visual.width(), &planes)
}

pub fn soft_mask(self_map: &[f64], cfg: &SarlConfig) -> Vec<f64> {
    self_map
        .iter()
        .map(|&s| sigmoid((s - cfg.alpha) / cfg.omega))
        .collect()
}

pub fn soft_masks(maps: &SimilarityMap, cfg: &SarlConfig) -> SoftMask {
    let data = (0..maps.batch())
        .flat_map(|b| soft_mask(maps.plane(b), cfg))
        .collect();
    SoftMask {
        batch: maps.batch(),
        height: maps.height(),
        width: maps.width(),
        data,
    }
}

fn check_map_shape(visual: &FeatureGrid, maps: &SimilarityMap) -> Result<()> {
    if (visual.batch(), visual.height(), visual.width())
        != (maps.batch(), maps.height(), maps.width())
    {
        return Err(dim_err("similarity map shape does not match feature grid"));
    }
    Ok(())
}

/// `F_hat[b,i,j,:] = S[b,i,j] * F[b,i,j,:]`.
pub fn sound_assoc_features(
    visual: &FeatureGrid,
    self_maps: &SimilarityMap,
) -> Result<FeatureGrid> {
    check_map_shape(visual, self_maps)?;
    let c = visual.channels();
    let data = visual
        .data()
        .chunks_exact(c)
        .zip(self_maps.data())
        .flat_map(|(cell, &s)| cell.iter().map(move |v| s * v))
        .collect();
    FeatureGrid::new(visual.batch(), visual.height(), visual.width(), c, data)
}

/// Background probe `E_n` per sample together with the cells it averages.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeVectors {
    pub vectors: VectorBatch,
    /// Row-major indices of the background cells of each sample.
    pub background: Vec<Vec<usize>>,
    /// Set for samples where no cell qualified as background; their vector is zero.
    pub empty: Vec<bool>,
}

/// Row-major indices of cells whose mask value is below `background_cut`.
pub fn background_cells(self_map: &[f64], cfg: &SarlConfig) -> Vec<usize> {
    soft_mask(self_map, cfg)
        .iter()
        .enumerate()
        .filter(|(_, &m)| m < cfg.background_cut)
        .map(|(k, _)| k)
        .collect()
}

/// Mean of the raw visual features over each sample's background cells.
pub fn negative_vector(
    visual: &FeatureGrid,
    self_maps: &SimilarityMap,
    cfg: &SarlConfig,
) -> Result<NegativeVectors> {
    check_map_shape(visual, self_maps)?;
    let c = visual.channels();
    let mut data = Vec::with_capacity(visual.batch() * c);
    let mut background = Vec::with_capacity(visual.batch());
    let mut empty = Vec::with_capacity(visual.batch());
    for b in 0..visual.batch() {
        let cells = background_cells(self_maps.plane(b), cfg);
        data.extend(mean_of_cells(visual, b, &cells));
        empty.push(cells.is_empty());
        background.push(cells);
    }
    Ok(NegativeVectors {
        vectors: VectorBatch::new(visual.batch(), c, data)?,
        background,
        empty,
    })
}

pub(crate) fn mean_of_cells(visual: &FeatureGrid, b: usize, cells: &[usize]) -> Vec<f64> {
    let mut acc = vec![0.0; visual.channels()];
    if cells.is_empty() {
        return acc;
    }
    for &k in cells {
        for (a, v) in acc.iter_mut().zip(visual.cell_linear(b, k)) {
            *a += v;
        }
    }
    let n = cells.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// All pairwise cosine planes of a batch, `cos[n][m][k] = Sim(F^n_k, l^m)`,
/// with the self-pair denominators. Shared by the contrastive loss and its
/// gradient.
pub(crate) struct CosineTable {
    pub cos: Vec<Vec<Vec<f64>>>,
    pub denom: Vec<f64>,
}

impl CosineTable {
    pub fn build(visual: &FeatureGrid, audio: &AudioEmbedding) -> Result<Self> {
        check_pair(visual, audio)?;
        let bsz = visual.batch();
        let mut cos = Vec::with_capacity(bsz);
        let mut denom = Vec::with_capacity(bsz);
        for n in 0..bsz {
            let row: Vec<Vec<f64>> = (0..bsz)
                .map(|m| cosine_plane(visual, n, audio.row(m)))
                .collect();
            denom.push(self_denominator(&row[n], n)?);
            cos.push(row);
        }
        Ok(Self { cos, denom })
    }

    pub fn map(&self, n: usize, m: usize) -> Vec<f64> {
        let d = self.denom[n];
        self.cos[n][m].iter().map(|v| v / d).collect()
    }
}

/// Backpropagates gradients on normalized maps to the features and audio.
///
/// `self_grad[n][k]` is dL/dS^{n->n}_k and `cross_grad[n][m][k]` is
/// dL/dS^{n->m}_k for `m != n` (the `m == n` slot is ignored).
pub(crate) fn sim_map_backward(
    visual: &FeatureGrid,
    audio: &AudioEmbedding,
    table: &CosineTable,
    self_grad: &[Vec<f64>],
    cross_grad: Option<&[Vec<Vec<f64>>]>,
    grad_visual: &mut [f64],
    grad_audio: &mut [f64],
) {
    let bsz = visual.batch();
    let cells = visual.cells();
    let c = visual.channels();
    for n in 0..bsz {
        let d = table.denom[n];
        // dL/dcos for each audio m, then d(denominator) through the self plane.
        let mut dcos: Vec<Vec<f64>> = vec![vec![0.0; cells]; bsz];
        let mut d_denom = 0.0;
        for k in 0..cells {
            let g = self_grad[n][k];
            dcos[n][k] += g / d;
            d_denom -= g * table.cos[n][n][k] / (d * d);
        }
        if let Some(cross) = cross_grad {
            for m in (0..bsz).filter(|&m| m != n) {
                for k in 0..cells {
                    let g = cross[n][m][k];
                    dcos[m][k] += g / d;
                    d_denom -= g * table.cos[n][m][k] / (d * d);
                }
            }
        }
        for k in 0..cells {
            dcos[n][k] += d_denom;
        }
        for (m, plane) in dcos.iter().enumerate() {
            let (ga_all, la) = (&mut *grad_audio, audio.row(m));
            for (k, &g) in plane.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                let off = (n * cells + k) * c;
                let gv = &mut grad_visual[off..off + c];
                let ga = &mut ga_all[m * c..(m + 1) * c];
                cosine_backward(visual.cell_linear(n, k), la, g, gv, ga);
            }
        }
    }
}
