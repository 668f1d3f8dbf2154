//! Localization metrics over cell-level maps.
//!
//! Multi-source metrics match predicted objects to ground-truth sources
//! class-agnostically: CIoU and CAP use the assignment maximizing total IoU,
//! PIAP the one maximizing total AP. Unmatched sources count as failures
//! (IoU 0, AP 0). Per-source metrics are pooled over all sources of all
//! cases.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::assignment::{best_assignment, Assignment};
use crate::error::{dim_err, Result};
use crate::grid::BinaryMap;
use crate::grouping::SampleGrouping;
use crate::synth::SceneTruth;

/// A predicted object: its fused map and per-cell relevance scores.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictedObject {
    pub map: BinaryMap,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalCase {
    pub predicted: Vec<PredictedObject>,
    pub truth: Vec<BinaryMap>,
}

impl EvalCase {
    pub fn from_grouping(grouping: &SampleGrouping, truth: &SceneTruth) -> Self {
        Self {
            predicted: grouping
                .objects
                .iter()
                .map(|o| PredictedObject {
                    map: o.fused.clone(),
                    scores: o.scores.clone(),
                })
                .collect(),
            truth: truth.masks.clone(),
        }
    }
}

/// `|a & b| / |a | b|`; 1 when both are empty.
pub fn iou(a: &BinaryMap, b: &BinaryMap) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(dim_err(format!(
            "iou of {}x{} and {}x{} maps",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.cells().iter().zip(b.cells()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// IoU of every predicted object (rows) with every truth (columns).
pub fn iou_matrix(case: &EvalCase) -> Result<Vec<Vec<f64>>> {
    case.predicted
        .iter()
        .map(|p| case.truth.iter().map(|t| iou(&p.map, t)).collect())
        .collect()
}

fn ap_matrix(case: &EvalCase) -> Vec<Vec<f64>> {
    case.predicted
        .iter()
        .map(|p| case.truth.iter().map(|t| ap_map(&p.scores, t)).collect())
        .collect()
}

/// IoU-maximizing matching of predicted objects (rows) to truths (columns).
pub fn match_objects(case: &EvalCase) -> Result<Assignment> {
    Ok(best_assignment(&iou_matrix(case)?, case.truth.len()))
}

/// IoU of each truth with its matched prediction, 0 when unmatched.
pub fn matched_ious(case: &EvalCase) -> Result<Vec<f64>> {
    let m = iou_matrix(case)?;
    let a = best_assignment(&m, case.truth.len());
    Ok((0..case.truth.len())
        .map(|t| a.row_of(t).map_or(0.0, |p| m[p][t]))
        .collect())
}

fn pooled_ious(cases: &[EvalCase]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for c in cases {
        out.extend(matched_ious(c)?);
    }
    Ok(out)
}

fn any_predictions(cases: &[EvalCase]) -> bool {
    cases.iter().any(|c| !c.predicted.is_empty())
}

/// Mean of `values`; with no values, 1 when nothing was predicted either
/// and 0 otherwise.
fn pooled_mean(values: &[f64], cases: &[EvalCase]) -> f64 {
    if values.is_empty() {
        return if any_predictions(cases) { 0.0 } else { 1.0 };
    }
    values.iter().sum::<f64>() / values.len() as f64
}

fn success_rate(ious: &[f64], threshold: f64, cases: &[EvalCase]) -> f64 {
    let hits: Vec<f64> = ious
        .iter()
        .map(|&v| if v >= threshold { 1.0 } else { 0.0 })
        .collect();
    pooled_mean(&hits, cases)
}

/// Fraction of truths whose matched prediction reaches `threshold` IoU.
pub fn ciou_at(cases: &[EvalCase], threshold: f64) -> Result<f64> {
    Ok(success_rate(&pooled_ious(cases)?, threshold, cases))
}

/// Fraction of cases whose union of predicted maps reaches `threshold` IoU
/// with the union of truths (single-source protocol).
pub fn iou_at(cases: &[EvalCase], threshold: f64) -> Result<f64> {
    if cases.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for c in cases {
        let (pred, truth) = union_maps(c)?;
        if iou(&pred, &truth)? >= threshold {
            hits += 1;
        }
    }
    Ok(hits as f64 / cases.len() as f64)
}

fn union_maps(case: &EvalCase) -> Result<(BinaryMap, BinaryMap)> {
    let shape = case
        .truth
        .first()
        .map(|t| (t.height(), t.width()))
        .or_else(|| {
            case.predicted
                .first()
                .map(|p| (p.map.height(), p.map.width()))
        })
        .unwrap_or((0, 0));
    let mut pred = BinaryMap::empty(shape.0, shape.1);
    let mut truth = BinaryMap::empty(shape.0, shape.1);
    for p in &case.predicted {
        if (p.map.height(), p.map.width()) != shape {
            return Err(dim_err("prediction shape differs from truth"));
        }
        pred.union_with(&p.map);
    }
    for t in &case.truth {
        if (t.height(), t.width()) != shape {
            return Err(dim_err("truth masks of differing shapes"));
        }
        truth.union_with(t);
    }
    Ok((pred, truth))
}

/// Default success thresholds 0.05, 0.10, ..., 0.95.
pub fn default_auc_grid() -> Vec<f64> {
    (1..=19).map(|i| i as f64 / 20.0).collect()
}

/// Mean success rate of `ious` over the threshold grid.
pub fn auc(ious: &[f64], grid: &[f64]) -> f64 {
    if ious.is_empty() || grid.is_empty() {
        return 0.0;
    }
    grid.iter()
        .map(|&t| ious.iter().filter(|&&v| v >= t).count() as f64 / ious.len() as f64)
        .sum::<f64>()
        / grid.len() as f64
}

/// Area under the per-truth matched-IoU success curve.
pub fn auc_cases(cases: &[EvalCase], grid: &[f64]) -> Result<f64> {
    let ious = pooled_ious(cases)?;
    if ious.is_empty() {
        return Ok(pooled_mean(&[], cases));
    }
    Ok(auc(&ious, grid))
}

/// All-points average precision of the cells ranked by descending score
/// (ties by row-major index) against `truth`. Zero when `truth` is empty.
pub fn ap_map(scores: &[f64], truth: &BinaryMap) -> f64 {
    let positives = truth.count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, &k) in order.iter().enumerate() {
        if truth.cells()[k] {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    sum / positives as f64
}

/// Single-source AP: each case's max-over-objects score map against the
/// union of its truths, averaged over cases with at least one truth.
pub fn ap_cases(cases: &[EvalCase]) -> Result<f64> {
    let mut aps = Vec::new();
    for c in cases {
        let (_, truth) = union_maps(c)?;
        if truth.is_empty() {
            continue;
        }
        let cells = truth.height() * truth.width();
        let scores: Vec<f64> = (0..cells)
            .map(|k| {
                c.predicted
                    .iter()
                    .map(|p| p.scores[k])
                    .fold(0.0f64, f64::max)
            })
            .collect();
        aps.push(ap_map(&scores, &truth));
    }
    Ok(pooled_mean(&aps, cases))
}

/// `(CAP, PIAP)`: mean per-truth AP under the IoU-optimal and the
/// AP-optimal assignment respectively.
pub fn cap_piap(cases: &[EvalCase]) -> Result<(f64, f64)> {
    let mut cap = Vec::new();
    let mut piap = Vec::new();
    for c in cases {
        let aps = ap_matrix(c);
        let by_iou = match_objects(c)?;
        let by_ap = best_assignment(&aps, c.truth.len());
        for t in 0..c.truth.len() {
            cap.push(by_iou.row_of(t).map_or(0.0, |p| aps[p][t]));
            piap.push(by_ap.row_of(t).map_or(0.0, |p| aps[p][t]));
        }
    }
    Ok((pooled_mean(&cap, cases), pooled_mean(&piap, cases)))
}

/// Fraction of cases whose predicted object count equals the true count.
pub fn counting_accuracy(cases: &[EvalCase]) -> f64 {
    if cases.is_empty() {
        return 0.0;
    }
    cases
        .iter()
        .filter(|c| c.predicted.len() == c.truth.len())
        .count() as f64
        / cases.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub auc_grid: Vec<f64>,
    pub ciou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: vec![0.5],
            auc_grid: default_auc_grid(),
            ciou_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Threshold (formatted) to single-source success rate.
    pub iou_at: BTreeMap<String, f64>,
    pub auc: f64,
    pub ap: f64,
    pub ciou_at_03: f64,
    pub cap: f64,
    pub piap: f64,
    pub counting_accuracy: f64,
}

pub fn evaluate(cases: &[EvalCase], cfg: &EvalConfig) -> Result<EvalReport> {
    let mut iou_map = BTreeMap::new();
    for &t in &cfg.iou_thresholds {
        iou_map.insert(format!("{t}"), iou_at(cases, t)?);
    }
    let (cap, piap) = cap_piap(cases)?;
    Ok(EvalReport {
        iou_at: iou_map,
        auc: auc_cases(cases, &cfg.auc_grid)?,
        ap: ap_cases(cases)?,
        ciou_at_03: ciou_at(cases, cfg.ciou_threshold)?,
        cap,
        piap,
        counting_accuracy: counting_accuracy(cases),
    })
}
