//! Literal reference formulas and random instance builders shared by the
//! integration tests.
#![allow(dead_code)]

use mssl_core::objectives::{OscBatchStructure, OscGroup, OscSample, VectorOrigin};
use mssl_core::{AudioEmbedding, FeatureGrid, VectorBatch};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if got == want {
        return 0.0;
    }
    (got - want).abs() / want.abs().max(f64::MIN_POSITIVE)
}

/// Cosine straight from its definition.
pub fn literal_cos(a: &[f64], b: &[f64]) -> f64 {
    let mut ab = 0.0;
    let mut aa = 0.0;
    let mut bb = 0.0;
    for i in 0..a.len() {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    ab / (aa.sqrt() * bb.sqrt())
}

/// `cells[b][k]` is the feature vector of cell `k` of clip `b`.
pub fn cells_of(v: &FeatureGrid) -> Vec<Vec<Vec<f64>>> {
    (0..v.batch())
        .map(|b| {
            (0..v.cells())
                .map(|k| v.cell_linear(b, k).to_vec())
                .collect()
        })
        .collect()
}

pub fn rows_of(a: &VectorBatch) -> Vec<Vec<f64>> {
    a.rows().map(<[f64]>::to_vec).collect()
}

/// Normalized similarity of image `n` against audio `m`.
pub fn literal_sim(cells: &[Vec<Vec<f64>>], audio: &[Vec<f64>], n: usize, m: usize) -> Vec<f64> {
    let denom: f64 = cells[n].iter().map(|f| literal_cos(f, &audio[n])).sum();
    cells[n]
        .iter()
        .map(|f| literal_cos(f, &audio[m]) / denom)
        .collect()
}

/// The contrastive loss written as the negative log of a two-way softmax.
pub fn literal_avc(visual: &FeatureGrid, audio: &AudioEmbedding, alpha: f64, omega: f64) -> f64 {
    let cells = cells_of(visual);
    let audio = rows_of(audio);
    let bsz = cells.len();
    let hw = cells[0].len() as f64;
    let mut total = 0.0;
    for n in 0..bsz {
        let s = literal_sim(&cells, &audio, n, n);
        let mask: Vec<f64> = s
            .iter()
            .map(|&v| 1.0 / (1.0 + (-(v - alpha) / omega).exp()))
            .collect();
        let mut num_p = 0.0;
        let mut den_p = 0.0;
        let mut num_n = 0.0;
        let mut den_n = 0.0;
        for k in 0..s.len() {
            num_p += mask[k] * s[k];
            den_p += mask[k];
            num_n += (1.0 - mask[k]) * s[k];
            den_n += 1.0 - mask[k];
        }
        let pos = num_p / den_p;
        let mut neg = num_n / den_n;
        for m in 0..bsz {
            if m != n {
                neg += literal_sim(&cells, &audio, n, m).iter().sum::<f64>() / hw;
            }
        }
        total += -(pos.exp() / (pos.exp() + neg.exp())).ln();
    }
    total / bsz as f64
}

/// The clustering loss from explicit sums over groups and clips.
pub fn literal_osc(structure: &OscBatchStructure) -> f64 {
    let mut total = 0.0;
    for s in &structure.samples {
        if s.groups.is_empty() {
            continue;
        }
        let mut clip = 0.0;
        for g in &s.groups {
            let a = &s.vectors[g.anchor];
            let mut cp = 1.0;
            if !g.positives.is_empty() {
                cp = 0.0;
                for &p in &g.positives {
                    cp += literal_cos(a, &s.vectors[p]);
                }
                cp /= g.positives.len() as f64;
            }
            let mut cn = 0.0;
            if !g.negatives.is_empty() {
                for &q in &g.negatives {
                    cn += literal_cos(a, &s.vectors[q]);
                }
                cn /= g.negatives.len() as f64;
            }
            clip += 1.0 - cp + cn;
        }
        total += clip / s.groups.len() as f64;
    }
    total / structure.samples.len() as f64
}

pub fn gaussian_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random visual/audio pair whose self-map denominators stay well away
/// from zero, so both the optimized and the literal formulas are well
/// conditioned. Half the instances use non-negative features.
pub fn random_avc_instance(rng: &mut ChaCha8Rng) -> (FeatureGrid, AudioEmbedding) {
    loop {
        let b = rng.random_range(1..=4);
        let h = rng.random_range(1..=4);
        let w = rng.random_range(1..=4);
        let c = rng.random_range(2..=6);
        let positive = rng.random_bool(0.5);
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|_| {
                    if positive {
                        rng.random_range(0.0..1.0)
                    } else {
                        rng.random_range(-1.0..1.0) + 0.3
                    }
                })
                .collect()
        };
        let visual = FeatureGrid::new(b, h, w, c, draw(b * h * w * c)).unwrap();
        let audio = VectorBatch::new(b, c, draw(b * c)).unwrap();
        let cells = cells_of(&visual);
        let rows = rows_of(&audio);
        let ok = (0..b).all(|n| {
            let d: f64 = cells[n].iter().map(|f| literal_cos(f, &rows[n])).sum();
            d > 0.25 * (h * w) as f64
        });
        if ok {
            return (visual, audio);
        }
    }
}

/// Random clustering structure: per clip a pool of vectors and up to three
/// groups with distinct anchors and disjoint positive/negative sets.
pub fn random_osc_structure(rng: &mut ChaCha8Rng) -> OscBatchStructure {
    let bsz = rng.random_range(1..=4);
    let dim = rng.random_range(2..=6);
    let samples = (0..bsz)
        .map(|_| {
            let n = rng.random_range(1..=8);
            let mut s = OscSample::default();
            for _ in 0..n {
                let mut v = gaussian_vec(rng, dim);
                if v.iter().all(|x| x.abs() < 1e-3) {
                    v[0] = 1.0;
                }
                s.push_vector(v, VectorOrigin::Free);
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(rng);
            let groups = rng.random_range(0..=n.min(3));
            for g in 0..groups {
                let mut rest: Vec<usize> = (0..n).filter(|&i| i != idx[g]).collect();
                rest.shuffle(rng);
                let np = rng.random_range(0..=rest.len());
                let nn = rng.random_range(0..=rest.len() - np);
                s.groups.push(OscGroup {
                    anchor: idx[g],
                    positives: rest[..np].to_vec(),
                    negatives: rest[np..np + nn].to_vec(),
                });
            }
            s
        })
        .collect();
    OscBatchStructure { samples }
}

/// An arbitrary identification-loop input for one sample: sound-weighted
/// features, a similarity plane (not necessarily normalized) and a probe.
pub struct IoiInstance {
    pub f_hat: FeatureGrid,
    pub self_map: Vec<f64>,
    pub e_n: Vec<f64>,
}

pub fn random_ioi_instance(rng: &mut ChaCha8Rng) -> IoiInstance {
    let h = rng.random_range(1..=8);
    let w = rng.random_range(1..=8);
    let c = rng.random_range(1..=6);
    let f_hat = FeatureGrid::new(1, h, w, c, gaussian_vec(rng, h * w * c)).unwrap();
    let scale = [1e-3, 1.0, 1e3][rng.random_range(0..3)];
    let self_map = (0..h * w)
        .map(|_| scale * rng.random_range(-0.5..1.0) / (h * w) as f64)
        .collect();
    let e_n = gaussian_vec(rng, c);
    IoiInstance {
        f_hat,
        self_map,
        e_n,
    }
}

/// Seed, region (row-major flags) and peak of each iteration, computed on
/// explicit 2-D arrays.
pub fn literal_ioi(
    inst: &IoiInstance,
    epsilon: f64,
    t_max: usize,
) -> Vec<((usize, usize), Vec<bool>, f64)> {
    let (h, w) = (inst.f_hat.height(), inst.f_hat.width());
    let inner = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut work = vec![vec![0.0; w]; h];
    let mut claimed = vec![vec![false; w]; h];
    for i in 0..h {
        for j in 0..w {
            work[i][j] = inst.self_map[i * w + j];
        }
    }
    let mut out = Vec::new();
    while out.len() < t_max {
        let mut best = (0, 0);
        for i in 0..h {
            for j in 0..w {
                if work[i][j] > work[best.0][best.1] {
                    best = (i, j);
                }
            }
        }
        let peak = work[best.0][best.1];
        if !(peak > epsilon) {
            break;
        }
        let e_p = inst.f_hat.cell(0, best.0, best.1).to_vec();
        let mut region = vec![false; h * w];
        for i in 0..h {
            for j in 0..w {
                let cell = inst.f_hat.cell(0, i, j);
                let inside = (i, j) == best
                    || (!claimed[i][j] && inner(cell, &e_p) > inner(cell, &inst.e_n));
                if inside {
                    region[i * w + j] = true;
                    claimed[i][j] = true;
                    work[i][j] = 0.0;
                }
            }
        }
        out.push((best, region, peak));
    }
    out
}

/// Best total weight over every injective row-to-column pairing, counting
/// only positive-weight pairs.
pub fn brute_force_assignment_value(weights: &[Vec<f64>], cols: usize) -> f64 {
    fn go(weights: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == weights.len() {
            return 0.0;
        }
        let mut best = go(weights, row + 1, used);
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                let w = weights[row][c].max(0.0);
                best = best.max(w + go(weights, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    go(weights, 0, &mut vec![false; cols])
}

/// All-points average precision computed by sweeping every rank cut.
pub fn literal_ap(scores: &[f64], truth: &[bool]) -> f64 {
    let positives = truth.iter().filter(|&&t| t).count();
    if positives == 0 {
        return 0.0;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for cut in 1..=order.len() {
        let tp = order[..cut].iter().filter(|&&k| truth[k]).count();
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / cut as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}
