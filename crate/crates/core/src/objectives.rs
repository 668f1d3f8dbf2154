//! Training objectives: the audio-visual contrastive loss over normalized
//! similarity maps, the object similarity-aware clustering loss over grouped
//! cells, and their weighted sum. Gradients are derived by hand.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grid::{cosine_backward, cosine_unchecked, AudioEmbedding, CellIndex, FeatureGrid};
use crate::sarl::{sigmoid, sim_map_backward, CosineTable, SarlConfig};

pub const GRAD_VISUAL: &str = "visual";
pub const GRAD_AUDIO: &str = "audio";
pub const GRAD_VECTORS: &str = "vectors";

/// A scalar loss with optional gradients keyed by parameter block.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossValue {
    pub value: f64,
    pub gradients: BTreeMap<String, Vec<f64>>,
}

impl LossValue {
    pub fn scalar(value: f64) -> Self {
        Self {
            value,
            gradients: BTreeMap::new(),
        }
    }

    pub fn gradient(&self, block: &str) -> Option<&[f64]> {
        self.gradients.get(block).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 1.0,
        }
    }
}

/// Per-clip positive and negative logits of the contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct AvcTerms {
    pub pos: Vec<f64>,
    pub neg: Vec<f64>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

struct ClipTerms {
    pos: f64,
    neg: f64,
    // derivatives of pos and of the in-clip part of neg w.r.t. the self map
    dpos: Vec<f64>,
    dneg_self: Vec<f64>,
}

fn clip_terms(table: &CosineTable, n: usize, cfg: &SarlConfig, cells: usize) -> ClipTerms {
    let s = table.map(n, n);
    let x: Vec<f64> = s.iter().map(|&v| (v - cfg.alpha) / cfg.omega).collect();
    let mask: Vec<f64> = x.iter().map(|&v| sigmoid(v)).collect();
    let inv_mask: Vec<f64> = x.iter().map(|&v| sigmoid(-v)).collect();
    let z: f64 = mask.iter().sum();
    let zw: f64 = inv_mask.iter().sum();
    let pos = mask.iter().zip(&s).map(|(m, v)| m * v).sum::<f64>() / z;
    let q = inv_mask.iter().zip(&s).map(|(m, v)| m * v).sum::<f64>() / zw;
    let bsz = table.cos.len();
    let cross: f64 = (0..bsz)
        .filter(|&m| m != n)
        .map(|m| table.cos[n][m].iter().sum::<f64>() / table.denom[n])
        .sum::<f64>()
        / cells as f64;

    let mut dpos = Vec::with_capacity(cells);
    let mut dneg_self = Vec::with_capacity(cells);
    for k in 0..cells {
        let dm = mask[k] * inv_mask[k] / cfg.omega;
        dpos.push((mask[k] + dm * (s[k] - pos)) / z);
        dneg_self.push((inv_mask[k] - dm * (s[k] - q)) / zw);
    }
    ClipTerms {
        pos,
        neg: q + cross,
        dpos,
        dneg_self,
    }
}

/// Positive and negative logits for each clip of the batch.
pub fn avc_terms(
    visual: &FeatureGrid,
    audio: &AudioEmbedding,
    cfg: &SarlConfig,
) -> Result<AvcTerms> {
    let table = CosineTable::build(visual, audio)?;
    let cells = visual.cells();
    let (pos, neg) = (0..visual.batch())
        .map(|n| {
            let t = clip_terms(&table, n, cfg, cells);
            (t.pos, t.neg)
        })
        .unzip();
    Ok(AvcTerms { pos, neg })
}

/// Audio-visual contrastive loss with gradients w.r.t. the visual features
/// (block `"visual"`) and the audio embedding (block `"audio"`).
pub fn avc_loss(
    visual: &FeatureGrid,
    audio: &AudioEmbedding,
    cfg: &SarlConfig,
) -> Result<LossValue> {
    let table = CosineTable::build(visual, audio)?;
    let bsz = visual.batch();
    let cells = visual.cells();
    let inv_b = 1.0 / bsz as f64;

    let mut value = 0.0;
    let mut self_grad = Vec::with_capacity(bsz);
    let mut cross_grad = Vec::with_capacity(bsz);
    for n in 0..bsz {
        let t = clip_terms(&table, n, cfg, cells);
        let u = t.neg - t.pos;
        value += softplus(u) * inv_b;
        let w = sigmoid(u) * inv_b;
        self_grad.push(
            t.dneg_self
                .iter()
                .zip(&t.dpos)
                .map(|(dq, dp)| w * (dq - dp))
                .collect::<Vec<_>>(),
        );
        cross_grad.push(vec![vec![w / cells as f64; cells]; bsz]);
    }
    if !value.is_finite() {
        return Err(Error::NumericalInstability(format!(
            "contrastive loss evaluated to {value}"
        )));
    }

    let mut grad_visual = vec![0.0; visual.data().len()];
    let mut grad_audio = vec![0.0; audio.data().len()];
    sim_map_backward(
        visual,
        audio,
        &table,
        &self_grad,
        Some(&cross_grad),
        &mut grad_visual,
        &mut grad_audio,
    );
    let mut out = LossValue::scalar(value);
    out.gradients.insert(GRAD_VISUAL.into(), grad_visual);
    out.gradients.insert(GRAD_AUDIO.into(), grad_audio);
    Ok(out)
}

/// Where a vector of the clustering structure came from, so gradients can be
/// routed back to features.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VectorOrigin {
    /// A cell of the sound-weighted feature grid.
    Cell(CellIndex),
    /// The background probe of a sample.
    Background(usize),
    /// Caller-supplied vector with no grid provenance.
    Free,
}

/// One object: an anchor plus positive and negative cells, as indices into
/// the sample's vector pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OscGroup {
    pub anchor: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct OscSample {
    pub vectors: Vec<Vec<f64>>,
    pub origins: Vec<VectorOrigin>,
    pub groups: Vec<OscGroup>,
}

impl OscSample {
    pub fn push_vector(&mut self, v: Vec<f64>, origin: VectorOrigin) -> usize {
        self.vectors.push(v);
        self.origins.push(origin);
        self.vectors.len() - 1
    }
}

/// Anchor/positive/negative structure of every clip in a batch.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct OscBatchStructure {
    pub samples: Vec<OscSample>,
}

impl OscBatchStructure {
    /// Checks index bounds, that each anchor heads exactly one group and
    /// that positives and negatives are disjoint.
    pub fn validate(&self) -> Result<()> {
        for (b, s) in self.samples.iter().enumerate() {
            if s.origins.len() != s.vectors.len() {
                return Err(dim_err(format!(
                    "sample {b}: origins/vectors length differ"
                )));
            }
            let dim = s.vectors.first().map_or(0, Vec::len);
            if s.vectors.iter().any(|v| v.len() != dim) {
                return Err(dim_err(format!("sample {b}: vectors of unequal length")));
            }
            let mut anchors = Vec::new();
            for g in &s.groups {
                let all = std::iter::once(&g.anchor)
                    .chain(&g.positives)
                    .chain(&g.negatives);
                if all.clone().any(|&i| i >= s.vectors.len()) {
                    return Err(dim_err(format!("sample {b}: index out of range")));
                }
                if g.positives.iter().any(|p| g.negatives.contains(p)) {
                    return Err(Error::Config(format!(
                        "sample {b}: positives and negatives overlap"
                    )));
                }
                anchors.push(g.anchor);
            }
            let mut sorted = anchors.clone();
            sorted.sort_unstable();
            sorted.dedup();
            if sorted.len() != anchors.len() {
                return Err(Error::Config(format!(
                    "sample {b}: anchor shared by groups"
                )));
            }
        }
        Ok(())
    }

    /// Splits a flattened `"vectors"` gradient back into per-sample pools.
    pub fn split_vector_grad(&self, flat: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let mut off = 0;
        self.samples
            .iter()
            .map(|s| {
                s.vectors
                    .iter()
                    .map(|v| {
                        let g = flat[off..off + v.len()].to_vec();
                        off += v.len();
                        g
                    })
                    .collect()
            })
            .collect()
    }
}

fn mean_cosine(anchor: &[f64], others: &[usize], pool: &[Vec<f64>]) -> f64 {
    others
        .iter()
        .map(|&i| cosine_unchecked(anchor, &pool[i]))
        .sum::<f64>()
        / others.len() as f64
}

/// Per-group clustering terms `(1 - C_p) + C_n` of one sample.
pub fn osc_group_terms(sample: &OscSample) -> Vec<f64> {
    sample
        .groups
        .iter()
        .map(|g| {
            let anchor = &sample.vectors[g.anchor];
            let cp = if g.positives.is_empty() {
                1.0
            } else {
                mean_cosine(anchor, &g.positives, &sample.vectors)
            };
            let cn = if g.negatives.is_empty() {
                0.0
            } else {
                mean_cosine(anchor, &g.negatives, &sample.vectors)
            };
            (1.0 - cp) + cn
        })
        .collect()
}

/// Clustering loss averaged over groups within a clip and over clips, with
/// the gradient w.r.t. every pool vector (block `"vectors"`, concatenated
/// sample by sample).
pub fn osc_loss(structure: &OscBatchStructure) -> Result<LossValue> {
    structure.validate()?;
    let bsz = structure.samples.len();
    let total_len: usize = structure
        .samples
        .iter()
        .map(|s| s.vectors.iter().map(Vec::len).sum::<usize>())
        .sum();
    let mut grad = vec![0.0; total_len];
    let mut value = 0.0;
    let mut off = 0;
    for s in &structure.samples {
        let dim = s.vectors.first().map_or(0, Vec::len);
        let k_b = s.groups.len();
        if k_b > 0 {
            let weight = 1.0 / (bsz as f64 * k_b as f64);
            value += osc_group_terms(s).iter().sum::<f64>() * weight;
            let mut pool_grad = vec![vec![0.0; dim]; s.vectors.len()];
            for g in &s.groups {
                let anchor = &s.vectors[g.anchor];
                let mut ga = vec![0.0; dim];
                let terms = [(&g.positives, -weight), (&g.negatives, weight)];
                for (set, sign) in terms {
                    if set.is_empty() {
                        continue;
                    }
                    let scale = sign / set.len() as f64;
                    for &i in set.iter() {
                        let mut gi = vec![0.0; dim];
                        cosine_backward(anchor, &s.vectors[i], scale, &mut ga, &mut gi);
                        for (acc, v) in pool_grad[i].iter_mut().zip(gi) {
                            *acc += v;
                        }
                    }
                }
                for (acc, v) in pool_grad[g.anchor].iter_mut().zip(ga) {
                    *acc += v;
                }
            }
            for v in pool_grad {
                grad[off..off + dim].copy_from_slice(&v);
                off += dim;
            }
        } else {
            off += s.vectors.len() * dim;
        }
    }
    let mut out = LossValue::scalar(value);
    out.gradients.insert(GRAD_VECTORS.into(), grad);
    Ok(out)
}

/// `lambda1 * avc + lambda2 * osc`, with gradients combined blockwise.
pub fn total_loss(avc: &LossValue, osc: &LossValue, weights: LossWeights) -> LossValue {
    let mut gradients: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (src, w) in [(avc, weights.lambda1), (osc, weights.lambda2)] {
        for (key, g) in &src.gradients {
            let entry = gradients
                .entry(key.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            for (acc, v) in entry.iter_mut().zip(g) {
                *acc += w * v;
            }
        }
    }
    LossValue {
        value: weights.lambda1 * avc.value + weights.lambda2 * osc.value,
        gradients,
    }
}
