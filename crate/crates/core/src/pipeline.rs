//! End-to-end localization of a batch: similarity maps, sound-weighted
//! features, background probe, iterative identification and grouping.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::grid::{AudioEmbedding, FeatureGrid, SimilarityMap};
use crate::grouping::{group_sample, GroupConfig, ObjectGrouping};
use crate::ioi::{run_ioi, IoiConfig, ObjectBank};
use crate::objectives::OscBatchStructure;
use crate::sarl::{negative_vector, self_maps, sound_assoc_features, NegativeVectors, SarlConfig};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LocalizerConfig {
    pub sarl: SarlConfig,
    /// Loop threshold; `None` means `1/(h*w)` for the grid at hand.
    pub epsilon: Option<f64>,
    /// Iteration cap; `None` means `h*w`.
    pub t_max: Option<usize>,
    pub group: GroupConfig,
}

impl LocalizerConfig {
    pub fn ioi_for(&self, height: usize, width: usize) -> IoiConfig {
        let base = IoiConfig::for_grid(height, width);
        IoiConfig {
            epsilon: self.epsilon.unwrap_or(base.epsilon),
            t_max: self.t_max.unwrap_or(base.t_max),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.sarl.validate()?;
        self.group.validate()?;
        self.ioi_for(1, 1).validate()
    }
}

/// Every intermediate of a localization pass.
#[derive(Debug, Clone)]
pub struct Localization {
    pub self_maps: SimilarityMap,
    pub f_hat: FeatureGrid,
    pub negatives: NegativeVectors,
    pub banks: Vec<ObjectBank>,
    pub grouping: ObjectGrouping,
}

impl Localization {
    pub fn object_counts(&self) -> Vec<usize> {
        self.grouping.iter().map(|g| g.object_count()).collect()
    }

    /// Clustering-loss structure induced by this pass.
    pub fn osc_structure(&self) -> OscBatchStructure {
        let e_n: Vec<Vec<f64>> = self.negatives.vectors.rows().map(<[f64]>::to_vec).collect();
        crate::grouping::osc_structure(&self.banks, &self.grouping, &e_n, &self.negatives.empty)
    }
}

pub fn localize(
    visual: &FeatureGrid,
    audio: &AudioEmbedding,
    cfg: &LocalizerConfig,
) -> Result<Localization> {
    cfg.validate()?;
    let maps = self_maps(visual, audio)?;
    let f_hat = sound_assoc_features(visual, &maps)?;
    let negatives = negative_vector(visual, &maps, &cfg.sarl)?;
    let ioi = cfg.ioi_for(visual.height(), visual.width());
    let banks = run_ioi(&f_hat, &maps, &negatives.vectors, &ioi)?;
    let grouping = banks
        .par_iter()
        .enumerate()
        .map(|(b, bank)| group_sample(bank, negatives.vectors.row(b), &cfg.group))
        .collect();
    Ok(Localization {
        self_maps: maps,
        f_hat,
        negatives,
        banks,
        grouping,
    })
}
