//! Learning projections of raw features with the combined objective.
//!
//! Raw visual cells and audio vectors are mapped through `W_v` and `W_a`
//! (both `raw_channels x channels`) and rectified, so projected features are
//! non-negative like the post-ReLU maps of a convolutional backbone. That
//! keeps every cosine, and hence every similarity-map denominator,
//! non-negative; with signed features the contrastive loss can be driven
//! down without bound by pushing a denominator towards zero.
//!
//! Each step runs the localizer on the projected batch, freezes the discrete
//! outcome (rectifier gates, identified cells, object groups, background
//! sets) and differentiates the weighted sum of the contrastive and
//! clustering losses with that structure held fixed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::format::CheckpointData;
use crate::grid::{dot, AudioEmbedding, FeatureGrid, VectorBatch};
use crate::metrics::{ciou_at, counting_accuracy, EvalCase, PredictedObject};
use crate::objectives::{
    avc_loss, osc_loss, LossWeights, OscBatchStructure, VectorOrigin, GRAD_AUDIO, GRAD_VECTORS,
    GRAD_VISUAL,
};
use crate::pipeline::{localize, LocalizerConfig};
use crate::sarl::{mean_of_cells, sim_map_backward, CosineTable};
use crate::synth::{scene_seed, Scene, SceneGenerator, SynthConfig};

/// A single update that grows the parameter norm by more than this factor is
/// treated as divergence.
pub const MAX_UPDATE_RATIO: f64 = 100.0;

const HELD_OUT_STREAM: u64 = 0x4E1D_0u64;
const PARAM_STREAM: u64 = 0xA11_CE;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub steps: usize,
    /// Clips per step; at least 2 so the cross-clip term is exercised.
    pub batch: usize,
    pub seed: u64,
    /// Output width of both projections.
    pub proj_channels: usize,
    /// Evaluate every this many steps; 0 evaluates only before and after.
    pub eval_every: usize,
    /// Size of the held-out evaluation set.
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            momentum: 0.9,
            steps: 200,
            batch: 4,
            seed: 0,
            proj_channels: 32,
            eval_every: 0,
            eval_scenes: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Config(format!(
                "lr must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0,1), got {}",
                self.momentum
            )));
        }
        if self.batch < 2 {
            return Err(Error::Config(format!(
                "batch must be >= 2, got {}",
                self.batch
            )));
        }
        if self.proj_channels == 0 {
            return Err(Error::Config("proj_channels must be positive".into()));
        }
        Ok(())
    }
}

/// The two projection matrices, row-major `raw_channels x channels`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionParams {
    pub raw_channels: usize,
    pub channels: usize,
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
}

fn project_linear(x: &[f64], w: &[f64], raw: usize, out: usize) -> Vec<f64> {
    let n = x.len() / raw;
    let mut y = vec![0.0; n * out];
    for (xr, yr) in x.chunks_exact(raw).zip(y.chunks_exact_mut(out)) {
        for (r, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (yo, wv) in yr.iter_mut().zip(&w[r * out..(r + 1) * out]) {
                *yo += xv * wv;
            }
        }
    }
    y
}

fn rectify(mut y: Vec<f64>) -> Vec<f64> {
    y.iter_mut().for_each(|v| *v = v.max(0.0));
    y
}

fn gate_of(y: &[f64]) -> Vec<bool> {
    y.iter().map(|&v| v > 0.0).collect()
}

fn apply_gate(y: &mut [f64], gate: &[bool]) {
    for (v, &open) in y.iter_mut().zip(gate) {
        if !open {
            *v = 0.0;
        }
    }
}

/// `sum_rows x^T g`, the weight gradient of a row-wise projection.
fn outer_accumulate(x: &[f64], g: &[f64], raw: usize, out: usize) -> Vec<f64> {
    let mut acc = vec![0.0; raw * out];
    for (xr, gr) in x.chunks_exact(raw).zip(g.chunks_exact(out)) {
        for (r, &xv) in xr.iter().enumerate() {
            if xv == 0.0 {
                continue;
            }
            for (a, gv) in acc[r * out..(r + 1) * out].iter_mut().zip(gr) {
                *a += xv * gv;
            }
        }
    }
    acc
}

impl ProjectionParams {
    /// Gaussian entries with standard deviation `1/sqrt(raw_channels)`.
    pub fn init(raw_channels: usize, channels: usize, seed: u64) -> Result<Self> {
        if raw_channels == 0 || channels == 0 {
            return Err(Error::Config("projection dims must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (raw_channels as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let n = raw_channels * channels;
        let visual = (0..n).map(|_| normal.sample(&mut rng)).collect();
        let audio = (0..n).map(|_| normal.sample(&mut rng)).collect();
        Ok(Self {
            raw_channels,
            channels,
            visual,
            audio,
        })
    }

    pub fn project_visual(&self, raw: &FeatureGrid) -> Result<FeatureGrid> {
        self.check(raw.channels())?;
        FeatureGrid::new(
            raw.batch(),
            raw.height(),
            raw.width(),
            self.channels,
            rectify(project_linear(
                raw.data(),
                &self.visual,
                self.raw_channels,
                self.channels,
            )),
        )
    }

    pub fn project_audio(&self, raw: &AudioEmbedding) -> Result<AudioEmbedding> {
        self.check(raw.channels())?;
        VectorBatch::new(
            raw.batch(),
            self.channels,
            rectify(project_linear(
                raw.data(),
                &self.audio,
                self.raw_channels,
                self.channels,
            )),
        )
    }

    fn check(&self, raw_channels: usize) -> Result<()> {
        if raw_channels != self.raw_channels {
            return Err(dim_err(format!(
                "input has {raw_channels} channels, projection expects {}",
                self.raw_channels
            )));
        }
        Ok(())
    }

    /// `W_v` followed by `W_a`.
    pub fn flatten(&self) -> Vec<f64> {
        self.visual.iter().chain(&self.audio).copied().collect()
    }

    pub fn from_flat(raw_channels: usize, channels: usize, flat: &[f64]) -> Result<Self> {
        let n = raw_channels * channels;
        if flat.len() != 2 * n {
            return Err(dim_err(format!(
                "expected {} values, got {}",
                2 * n,
                flat.len()
            )));
        }
        Ok(Self {
            raw_channels,
            channels,
            visual: flat[..n].to_vec(),
            audio: flat[n..].to_vec(),
        })
    }

    pub fn norm(&self) -> f64 {
        dot(&self.visual, &self.visual)
            .sqrt()
            .hypot(dot(&self.audio, &self.audio).sqrt())
    }

    pub fn is_finite(&self) -> bool {
        self.visual.iter().chain(&self.audio).all(|v| v.is_finite())
    }

    pub fn to_checkpoint(&self) -> CheckpointData {
        CheckpointData {
            rows: self.raw_channels,
            cols: self.channels,
            visual: self.visual.clone(),
            audio: self.audio.clone(),
        }
    }

    pub fn from_checkpoint(ckpt: CheckpointData) -> Self {
        Self {
            raw_channels: ckpt.rows,
            channels: ckpt.cols,
            visual: ckpt.visual,
            audio: ckpt.audio,
        }
    }
}

/// Discrete decisions of one forward pass, held fixed while differentiating.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenStructure {
    pub osc: OscBatchStructure,
    /// Background cells of each clip.
    pub background: Vec<Vec<usize>>,
    pub object_counts: Vec<usize>,
    /// Open rectifier units of the projected visual features and audio.
    pub visual_gate: Vec<bool>,
    pub audio_gate: Vec<bool>,
}

/// Projects with the rectifier pattern fixed to `gate` instead of
/// recomputed; equal to the rectified projection where the pattern matches.
fn gated_visual(
    params: &ProjectionParams,
    raw: &FeatureGrid,
    gate: &[bool],
) -> Result<FeatureGrid> {
    params.check(raw.channels())?;
    let mut y = project_linear(
        raw.data(),
        &params.visual,
        params.raw_channels,
        params.channels,
    );
    if gate.len() != y.len() {
        return Err(dim_err("rectifier gate does not match the batch"));
    }
    apply_gate(&mut y, gate);
    FeatureGrid::new(raw.batch(), raw.height(), raw.width(), params.channels, y)
}

fn gated_audio(
    params: &ProjectionParams,
    raw: &AudioEmbedding,
    gate: &[bool],
) -> Result<AudioEmbedding> {
    params.check(raw.channels())?;
    let mut y = project_linear(
        raw.data(),
        &params.audio,
        params.raw_channels,
        params.channels,
    );
    if gate.len() != y.len() {
        return Err(dim_err("rectifier gate does not match the batch"));
    }
    apply_gate(&mut y, gate);
    VectorBatch::new(raw.batch(), params.channels, y)
}

/// Runs the localizer on the projected batch and records its decisions.
pub fn freeze_structure(
    params: &ProjectionParams,
    raw_visual: &FeatureGrid,
    raw_audio: &AudioEmbedding,
    loc: &LocalizerConfig,
) -> Result<FrozenStructure> {
    let visual = params.project_visual(raw_visual)?;
    let audio = params.project_audio(raw_audio)?;
    let l = localize(&visual, &audio, loc)?;
    Ok(FrozenStructure {
        osc: l.osc_structure(),
        background: l.negatives.background.clone(),
        object_counts: l.object_counts(),
        visual_gate: gate_of(visual.data()),
        audio_gate: gate_of(audio.data()),
    })
}

/// Value and parameter gradients of the combined loss.
#[derive(Debug, Clone, PartialEq)]
pub struct ComposedLoss {
    pub total: f64,
    pub avc: f64,
    pub osc: f64,
    /// Gradient w.r.t. [`ProjectionParams::flatten`].
    pub gradient: Vec<f64>,
}

/// Combined loss of the projected batch under `frozen`, with its gradient
/// w.r.t. both projections. At the parameters `frozen` was taken from, the
/// value equals the loss of the rectified projection.
pub fn composed_loss(
    params: &ProjectionParams,
    raw_visual: &FeatureGrid,
    raw_audio: &AudioEmbedding,
    frozen: &FrozenStructure,
    loc: &LocalizerConfig,
    weights: LossWeights,
) -> Result<ComposedLoss> {
    let visual = gated_visual(params, raw_visual, &frozen.visual_gate)?;
    let audio = gated_audio(params, raw_audio, &frozen.audio_gate)?;
    let bsz = visual.batch();
    if frozen.osc.samples.len() != bsz || frozen.background.len() != bsz {
        return Err(dim_err("frozen structure does not match the batch"));
    }
    let cells = visual.cells();
    let c = visual.channels();
    let w = visual.width();

    let avc = avc_loss(&visual, &audio, &loc.sarl)?;

    // Rebuild the clustering vectors from the current features.
    let table = CosineTable::build(&visual, &audio)?;
    let maps: Vec<Vec<f64>> = (0..bsz).map(|n| table.map(n, n)).collect();
    let mut structure = frozen.osc.clone();
    for (b, sample) in structure.samples.iter_mut().enumerate() {
        for (v, origin) in sample.vectors.iter_mut().zip(&sample.origins) {
            *v = match *origin {
                VectorOrigin::Cell(cell) => {
                    let k = cell.linear(w);
                    let s = maps[cell.sample][k];
                    visual
                        .cell_linear(cell.sample, k)
                        .iter()
                        .map(|x| s * x)
                        .collect()
                }
                VectorOrigin::Background(n) => mean_of_cells(&visual, n, &frozen.background[n]),
                VectorOrigin::Free => {
                    return Err(Error::Config(format!(
                        "sample {b}: free vectors cannot be traced to features"
                    )))
                }
            };
        }
    }
    let osc = osc_loss(&structure)?;

    let mut grad_visual = vec![0.0; visual.data().len()];
    let mut grad_audio = vec![0.0; audio.data().len()];
    let (l1, l2) = (weights.lambda1, weights.lambda2);
    for (acc, g) in grad_visual
        .iter_mut()
        .zip(avc.gradient(GRAD_VISUAL).unwrap_or_default())
    {
        *acc += l1 * g;
    }
    for (acc, g) in grad_audio
        .iter_mut()
        .zip(avc.gradient(GRAD_AUDIO).unwrap_or_default())
    {
        *acc += l1 * g;
    }

    let vector_grads = structure.split_vector_grad(osc.gradient(GRAD_VECTORS).unwrap_or_default());
    let mut self_grad = vec![vec![0.0; cells]; bsz];
    for (sample, grads) in structure.samples.iter().zip(&vector_grads) {
        for (origin, g) in sample.origins.iter().zip(grads) {
            match *origin {
                VectorOrigin::Cell(cell) => {
                    let k = cell.linear(w);
                    let f = visual.cell_linear(cell.sample, k);
                    let s = maps[cell.sample][k];
                    self_grad[cell.sample][k] += l2 * dot(f, g);
                    let off = (cell.sample * cells + k) * c;
                    for (acc, gv) in grad_visual[off..off + c].iter_mut().zip(g) {
                        *acc += l2 * s * gv;
                    }
                }
                VectorOrigin::Background(n) => {
                    let bg = &frozen.background[n];
                    let scale = l2 / bg.len().max(1) as f64;
                    for &k in bg {
                        let off = (n * cells + k) * c;
                        for (acc, gv) in grad_visual[off..off + c].iter_mut().zip(g) {
                            *acc += scale * gv;
                        }
                    }
                }
                VectorOrigin::Free => {}
            }
        }
    }
    sim_map_backward(
        &visual,
        &audio,
        &table,
        &self_grad,
        None,
        &mut grad_visual,
        &mut grad_audio,
    );

    let (raw, out) = (params.raw_channels, params.channels);
    apply_gate(&mut grad_visual, &frozen.visual_gate);
    apply_gate(&mut grad_audio, &frozen.audio_gate);
    let mut gradient = outer_accumulate(raw_visual.data(), &grad_visual, raw, out);
    gradient.extend(outer_accumulate(raw_audio.data(), &grad_audio, raw, out));
    let total = l1 * avc.value + l2 * osc.value;
    if !total.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NumericalInstability(format!(
            "combined loss or gradient is not finite (loss {total})"
        )));
    }
    Ok(ComposedLoss {
        total,
        avc: avc.value,
        osc: osc.value,
        gradient,
    })
}

/// Parameters plus momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub params: ProjectionParams,
    pub velocity: Vec<f64>,
}

impl TrainState {
    pub fn new(params: ProjectionParams) -> Self {
        let velocity = vec![0.0; params.visual.len() + params.audio.len()];
        Self { params, velocity }
    }
}

/// Losses of one step, measured before the update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLoss {
    pub total: f64,
    pub avc: f64,
    pub osc: f64,
}

/// One momentum-SGD step on a raw batch.
pub fn train_step(
    state: &mut TrainState,
    raw_visual: &FeatureGrid,
    raw_audio: &AudioEmbedding,
    cfg: &TrainConfig,
    loc: &LocalizerConfig,
    weights: LossWeights,
) -> Result<StepLoss> {
    let frozen = freeze_structure(&state.params, raw_visual, raw_audio, loc)?;
    let loss = composed_loss(&state.params, raw_visual, raw_audio, &frozen, loc, weights)?;
    let before = state.params.norm();
    let mut flat = state.params.flatten();
    for ((p, v), g) in flat.iter_mut().zip(&mut state.velocity).zip(&loss.gradient) {
        *v = cfg.momentum * *v + g;
        *p -= cfg.lr * *v;
    }
    let updated =
        ProjectionParams::from_flat(state.params.raw_channels, state.params.channels, &flat)?;
    let after = updated.norm();
    if !updated.is_finite() || !(after <= MAX_UPDATE_RATIO * before) {
        return Err(Error::NumericalInstability(format!(
            "update diverged: parameter norm {before:.3e} -> {after:.3e}"
        )));
    }
    state.params = updated;
    Ok(StepLoss {
        total: loss.total,
        avc: loss.avc,
        osc: loss.osc,
    })
}

/// Held-out metrics at one point of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub step: usize,
    pub counting_accuracy: f64,
    pub ciou_at_03: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub initial: ProjectionParams,
    pub params: ProjectionParams,
    pub losses: Vec<StepLoss>,
    pub curve: Vec<CurvePoint>,
}

/// Seed of the `index`-th training scene of a run.
pub fn train_scene_seed(seed: u64, index: u64) -> u64 {
    scene_seed(seed, index)
}

/// Seed of the `index`-th held-out scene of a run.
pub fn held_out_scene_seed(seed: u64, index: u64) -> u64 {
    scene_seed(seed ^ HELD_OUT_STREAM, index)
}

/// Stacks scenes into one raw batch.
pub fn stack_scenes(scenes: &[Scene]) -> Result<(FeatureGrid, AudioEmbedding)> {
    let grids: Vec<FeatureGrid> = scenes.iter().map(|s| s.visual.clone()).collect();
    let rows: Vec<Vec<f64>> = scenes.iter().map(|s| s.audio.row(0).to_vec()).collect();
    Ok((FeatureGrid::stack(&grids)?, VectorBatch::from_rows(&rows)?))
}

/// Localizes each scene through the projections and scores the result.
/// A scene whose similarity map cannot be normalized counts as predicting
/// no objects.
pub fn evaluate_params(
    params: &ProjectionParams,
    scenes: &[Scene],
    loc: &LocalizerConfig,
    ciou_threshold: f64,
) -> Result<(f64, f64)> {
    let cases = scenes
        .par_iter()
        .map(|scene| {
            let visual = params.project_visual(&scene.visual)?;
            let audio = params.project_audio(&scene.audio)?;
            match localize(&visual, &audio, loc) {
                Ok(l) => Ok(EvalCase::from_grouping(&l.grouping[0], &scene.truth)),
                Err(Error::DegenerateNormalization { .. }) => Ok(EvalCase {
                    predicted: Vec::<PredictedObject>::new(),
                    truth: scene.truth.masks.clone(),
                }),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((counting_accuracy(&cases), ciou_at(&cases, ciou_threshold)?))
}

/// Trains on a seeded stream of synthetic scenes, evaluating on a held-out
/// set before the first step, every `eval_every` steps and after the last.
pub fn train_run(
    cfg: &TrainConfig,
    synth: &SynthConfig,
    loc: &LocalizerConfig,
    weights: LossWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loc.validate()?;
    let generator = SceneGenerator::new(synth.clone())?;
    let held_out = (0..cfg.eval_scenes as u64)
        .into_par_iter()
        .map(|i| generator.generate(held_out_scene_seed(cfg.seed, i)))
        .collect::<Result<Vec<_>>>()?;
    let initial =
        ProjectionParams::init(synth.channels, cfg.proj_channels, cfg.seed ^ PARAM_STREAM)?;
    let mut state = TrainState::new(initial.clone());
    let eval = |params: &ProjectionParams, step: usize| -> Result<CurvePoint> {
        let (counting_accuracy, ciou_at_03) = evaluate_params(params, &held_out, loc, 0.3)?;
        Ok(CurvePoint {
            step,
            counting_accuracy,
            ciou_at_03,
        })
    };
    let mut curve = vec![eval(&state.params, 0)?];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let first = (step * cfg.batch) as u64;
        let scenes = (first..first + cfg.batch as u64)
            .into_par_iter()
            .map(|i| generator.generate(train_scene_seed(cfg.seed, i)))
            .collect::<Result<Vec<_>>>()?;
        let (visual, audio) = stack_scenes(&scenes)?;
        losses.push(train_step(&mut state, &visual, &audio, cfg, loc, weights)?);
        let done = step + 1;
        if cfg.eval_every > 0 && done % cfg.eval_every == 0 && done < cfg.steps {
            curve.push(eval(&state.params, done)?);
        }
    }
    if cfg.steps > 0 {
        curve.push(eval(&state.params, cfg.steps)?);
    }
    Ok(TrainOutcome {
        initial,
        params: state.params,
        losses,
        curve,
    })
}
