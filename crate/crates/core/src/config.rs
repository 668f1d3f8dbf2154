//! Flat key-value configuration covering every stage.
//!
//! A config file is a TOML document of top-level keys; any key may be
//! omitted and unknown keys are rejected. An absent file means all defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grouping::GroupConfig;
use crate::metrics::EvalConfig;
use crate::objectives::LossWeights;
use crate::pipeline::LocalizerConfig;
use crate::sarl::SarlConfig;
use crate::synth::SynthConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub alpha: f64,
    pub omega: f64,
    pub background_cut: f64,
    /// Omitted means `1/(h*w)` of the grid being processed.
    pub epsilon: Option<f64>,
    /// Omitted means `h*w`.
    pub t_max: Option<usize>,
    pub tau1: f64,
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub auc_grid: Vec<f64>,
    pub iou_thresholds: Vec<f64>,
    pub ciou_threshold: f64,

    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub num_classes: usize,
    pub class_margin: f64,
    pub background_margin: f64,
    pub noise: f64,
    pub k_weights: Vec<f64>,
    pub min_side: usize,
    pub max_side: usize,
    pub dictionary_seed: u64,

    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
    pub proj_channels: usize,
    pub eval_every: usize,
    pub eval_scenes: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::from_parts(
            &LocalizerConfig::default(),
            LossWeights::default(),
            &EvalConfig::default(),
            &SynthConfig::default(),
            &TrainConfig::default(),
        )
    }
}

impl PipelineConfig {
    pub fn from_parts(
        loc: &LocalizerConfig,
        weights: LossWeights,
        eval: &EvalConfig,
        synth: &SynthConfig,
        train: &TrainConfig,
    ) -> Self {
        Self {
            alpha: loc.sarl.alpha,
            omega: loc.sarl.omega,
            background_cut: loc.sarl.background_cut,
            epsilon: loc.epsilon,
            t_max: loc.t_max,
            tau1: loc.group.tau1,
            tau2: loc.group.tau2,
            lambda1: weights.lambda1,
            lambda2: weights.lambda2,
            auc_grid: eval.auc_grid.clone(),
            iou_thresholds: eval.iou_thresholds.clone(),
            ciou_threshold: eval.ciou_threshold,
            height: synth.height,
            width: synth.width,
            channels: synth.channels,
            num_classes: synth.num_classes,
            class_margin: synth.class_margin,
            background_margin: synth.background_margin,
            noise: synth.noise,
            k_weights: synth.k_weights.clone(),
            min_side: synth.min_side,
            max_side: synth.max_side,
            dictionary_seed: synth.dictionary_seed,
            lr: train.lr,
            momentum: train.momentum,
            steps: train.steps,
            batch: train.batch,
            seed: train.seed,
            proj_channels: train.proj_channels,
            eval_every: train.eval_every,
            eval_scenes: train.eval_scenes,
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))
    }

    /// Reads `path`, or returns the defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => Self::from_toml_str(&std::fs::read_to_string(p)?),
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("flat config always serializes")
    }

    pub fn localizer(&self) -> LocalizerConfig {
        LocalizerConfig {
            sarl: SarlConfig {
                alpha: self.alpha,
                omega: self.omega,
                background_cut: self.background_cut,
            },
            epsilon: self.epsilon,
            t_max: self.t_max,
            group: GroupConfig {
                tau1: self.tau1,
                tau2: self.tau2,
            },
        }
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.lambda1,
            lambda2: self.lambda2,
        }
    }

    pub fn eval(&self) -> EvalConfig {
        EvalConfig {
            iou_thresholds: self.iou_thresholds.clone(),
            auc_grid: self.auc_grid.clone(),
            ciou_threshold: self.ciou_threshold,
        }
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            height: self.height,
            width: self.width,
            channels: self.channels,
            num_classes: self.num_classes,
            class_margin: self.class_margin,
            background_margin: self.background_margin,
            noise: self.noise,
            k_weights: self.k_weights.clone(),
            min_side: self.min_side,
            max_side: self.max_side,
            dictionary_seed: self.dictionary_seed,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            momentum: self.momentum,
            steps: self.steps,
            batch: self.batch,
            seed: self.seed,
            proj_channels: self.proj_channels,
            eval_every: self.eval_every,
            eval_scenes: self.eval_scenes,
        }
    }

    /// Validates the stage configs that do not depend on a dataset.
    /// Synthesis settings are checked when a generator is built.
    pub fn validate(&self) -> Result<()> {
        self.localizer().validate()?;
        if !self.lambda1.is_finite() || !self.lambda2.is_finite() {
            return Err(Error::Config("loss weights must be finite".into()));
        }
        if self.auc_grid.iter().any(|t| !(0.0..=1.0).contains(t)) {
            return Err(Error::Config(
                "auc_grid thresholds must lie in [0,1]".into(),
            ));
        }
        if self.auc_grid.is_empty() {
            return Err(Error::Config("auc_grid must not be empty".into()));
        }
        self.train().validate()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.alpha, 0.65);
        assert_eq!(cfg.tau2, 0.6);
    }

    #[test]
    fn partial_override() {
        let cfg = PipelineConfig::from_toml_str("tau1 = 0.8\nnoise = 0.1\nt_max = 5\n").unwrap();
        assert_eq!(cfg.tau1, 0.8);
        assert_eq!(cfg.synth().noise, 0.1);
        assert_eq!(cfg.localizer().t_max, Some(5));
        assert_eq!(cfg.tau2, 0.6);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = PipelineConfig::from_toml_str("tau3 = 0.1").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn wrong_type_rejected() {
        assert!(PipelineConfig::from_toml_str("alpha = \"high\"").is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = PipelineConfig::default();
        cfg.epsilon = Some(0.01);
        let back = PipelineConfig::from_toml_str(&cfg.to_toml_string()).unwrap();
        assert_eq!(back, cfg);
    }
}
