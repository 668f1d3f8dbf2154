//! Seeded smoke instances for finite-difference checks of every objective.
//!
//! Each instance is a batch of three noisy synthetic scenes pushed through a
//! freshly initialized projection. Three gradients are checked per instance:
//! the contrastive loss w.r.t. projected features and audio, the clustering
//! loss w.r.t. its pool vectors, and the combined loss w.r.t. both
//! projection matrices.

use rayon::prelude::*;
use serde::Serialize;

use crate::config::PipelineConfig;
use crate::error::Result;
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::grid::{norm, FeatureGrid, VectorBatch};
use crate::objectives::{avc_loss, osc_loss, GRAD_AUDIO, GRAD_VECTORS, GRAD_VISUAL};
use crate::synth::{scene_seed, SceneGenerator, SynthConfig};
use crate::trainer::{
    composed_loss, freeze_structure, stack_scenes, FrozenStructure, ProjectionParams,
};

pub const SMOKE_BATCH: usize = 3;
pub const SMOKE_NOISE: f64 = 0.1;

/// One seeded batch with the projection it is checked at.
#[derive(Debug, Clone)]
pub struct SmokeInstance {
    pub raw_visual: FeatureGrid,
    pub raw_audio: VectorBatch,
    pub params: ProjectionParams,
    pub frozen: FrozenStructure,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SmokeCheck {
    pub instance: usize,
    pub name: &'static str,
    pub report: GradCheckReport,
}

fn smoke_synth(cfg: &PipelineConfig) -> SynthConfig {
    SynthConfig {
        noise: SMOKE_NOISE,
        k_weights: vec![0.0, 1.0, 1.0, 1.0],
        ..cfg.synth()
    }
}

pub fn smoke_instance(cfg: &PipelineConfig, seed: u64, index: usize) -> Result<SmokeInstance> {
    let generator = SceneGenerator::new(smoke_synth(cfg))?;
    let base = scene_seed(seed, index as u64);
    let scenes = (0..SMOKE_BATCH as u64)
        .map(|i| generator.generate(scene_seed(base, i)))
        .collect::<Result<Vec<_>>>()?;
    let (raw_visual, raw_audio) = stack_scenes(&scenes)?;
    let params = ProjectionParams::init(cfg.channels, cfg.proj_channels, base)?;
    let frozen = freeze_structure(&params, &raw_visual, &raw_audio, &cfg.localizer())?;
    Ok(SmokeInstance {
        raw_visual,
        raw_audio,
        params,
        frozen,
    })
}

/// Runs the three checks on `instances` seeded instances.
pub fn smoke_checks(
    cfg: &PipelineConfig,
    seed: u64,
    instances: usize,
    gc: &GradCheckConfig,
) -> Result<Vec<SmokeCheck>> {
    cfg.validate()?;
    let per_instance = (0..instances)
        .into_par_iter()
        .map(|index| instance_checks(cfg, seed, index, gc))
        .collect::<Result<Vec<_>>>()?;
    Ok(per_instance.into_iter().flatten().collect())
}

fn instance_checks(
    cfg: &PipelineConfig,
    seed: u64,
    index: usize,
    gc: &GradCheckConfig,
) -> Result<Vec<SmokeCheck>> {
    let loc = cfg.localizer();
    let weights = cfg.weights();
    let mut out = Vec::with_capacity(3);
    let inst = smoke_instance(cfg, seed, index)?;
    let gc = GradCheckConfig {
        seed: scene_seed(gc.seed, index as u64),
        ..*gc
    };

    let visual = inst.params.project_visual(&inst.raw_visual)?;
    let audio = inst.params.project_audio(&inst.raw_audio)?;
    let nv = visual.data().len();
    let x: Vec<f64> = visual.data().iter().chain(audio.data()).copied().collect();
    let avc = avc_loss(&visual, &audio, &loc.sarl)?;
    let analytic: Vec<f64> = avc.gradients[GRAD_VISUAL]
        .iter()
        .chain(&avc.gradients[GRAD_AUDIO])
        .copied()
        .collect();
    let f = |p: &[f64]| -> Result<f64> {
        let v = FeatureGrid::new(
            visual.batch(),
            visual.height(),
            visual.width(),
            visual.channels(),
            p[..nv].to_vec(),
        )?;
        let a = VectorBatch::new(audio.batch(), audio.channels(), p[nv..].to_vec())?;
        Ok(avc_loss(&v, &a, &loc.sarl)?.value)
    };
    out.push(SmokeCheck {
        instance: index,
        name: "avc",
        report: grad_check(f, &x, &analytic, &gc)?,
    });

    // Pool vectors are sound-weighted cells with norms of order 1/(h*w);
    // the loss only sees their directions, so check at unit scale where
    // a fixed finite-difference step is well conditioned.
    let mut structure = inst.frozen.osc.clone();
    for v in structure
        .samples
        .iter_mut()
        .flat_map(|s| s.vectors.iter_mut())
    {
        let n = norm(v);
        if n > 0.0 {
            v.iter_mut().for_each(|x| *x /= n);
        }
    }
    let x: Vec<f64> = structure
        .samples
        .iter()
        .flat_map(|s| s.vectors.iter().flatten().copied())
        .collect();
    let osc = osc_loss(&structure)?;
    let f = |p: &[f64]| -> Result<f64> {
        let mut s = structure.clone();
        for (sample, vectors) in s.samples.iter_mut().zip(structure.split_vector_grad(p)) {
            sample.vectors = vectors;
        }
        Ok(osc_loss(&s)?.value)
    };
    out.push(SmokeCheck {
        instance: index,
        name: "osc",
        report: grad_check(f, &x, &osc.gradients[GRAD_VECTORS], &gc)?,
    });

    let composed = composed_loss(
        &inst.params,
        &inst.raw_visual,
        &inst.raw_audio,
        &inst.frozen,
        &loc,
        weights,
    )?;
    let (raw, c) = (inst.params.raw_channels, inst.params.channels);
    let f = |p: &[f64]| -> Result<f64> {
        let q = ProjectionParams::from_flat(raw, c, p)?;
        Ok(composed_loss(
            &q,
            &inst.raw_visual,
            &inst.raw_audio,
            &inst.frozen,
            &loc,
            weights,
        )?
        .total)
    };
    out.push(SmokeCheck {
        instance: index,
        name: "composed",
        report: grad_check(f, &inst.params.flatten(), &composed.gradient, &gc)?,
    });
    Ok(out)
}
