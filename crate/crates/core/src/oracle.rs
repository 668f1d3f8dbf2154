//! Naive reference localizer.
//!
//! Written independently of the optimized stages, straight from the
//! formulas: literal similarity normalization and mask, the identification
//! loop on explicit 2-D arrays, and grouping by boolean transitive closure
//! instead of union-find. It shares only the decision rules (tie-breaks,
//! forced seed inclusion, claimed cells, anchor choice, object order) so that
//! both paths must produce identical groupings.

use crate::error::{Error, Result};
use crate::grid::{AudioEmbedding, BinaryMap, FeatureGrid};
use crate::grouping::{GroupedObject, ObjectGrouping, SampleGrouping};
use crate::pipeline::LocalizerConfig;

fn inner(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        s += a[i] * b[i];
    }
    s
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    let na = inner(a, a).sqrt();
    let nb = inner(b, b).sqrt();
    if na < 1e-12 || nb < 1e-12 {
        0.0
    } else {
        (inner(a, b) / (na * nb)).clamp(-1.0, 1.0)
    }
}

struct Record {
    vector: Vec<f64>,
    region: Vec<Vec<bool>>,
    peak: f64,
    response: Vec<Vec<f64>>,
}

/// Localizes every sample with the naive reference path.
pub fn oracle_identify(
    visual: &FeatureGrid,
    audio: &AudioEmbedding,
    cfg: &LocalizerConfig,
) -> Result<ObjectGrouping> {
    let (h, w) = (visual.height(), visual.width());
    if h * w > 256 {
        return Err(Error::Config(
            "reference localizer is limited to 256 cells".into(),
        ));
    }
    if audio.channels() != visual.channels() || audio.batch() != visual.batch() {
        return Err(Error::Dimension("audio does not match visual".into()));
    }
    let ioi = cfg.ioi_for(h, w);
    (0..visual.batch())
        .map(|b| {
            let la = audio.row(b);
            let feat = |i: usize, j: usize| visual.cell(b, i, j);

            // normalized self map
            let mut raw = vec![vec![0.0; w]; h];
            let mut total = 0.0;
            for i in 0..h {
                for j in 0..w {
                    raw[i][j] = cos(feat(i, j), la);
                    total += raw[i][j];
                }
            }
            if total.abs() <= 1e-9 {
                return Err(Error::DegenerateNormalization {
                    sample: b,
                    denominator: total,
                });
            }
            let s: Vec<Vec<f64>> = raw
                .iter()
                .map(|r| r.iter().map(|v| v / total).collect())
                .collect();

            // background probe from the soft mask
            let c = visual.channels();
            let mut e_n = vec![0.0; c];
            let mut n_bg = 0usize;
            for i in 0..h {
                for j in 0..w {
                    let m = 1.0 / (1.0 + (-(s[i][j] - cfg.sarl.alpha) / cfg.sarl.omega).exp());
                    if m < cfg.sarl.background_cut {
                        for ch in 0..c {
                            e_n[ch] += feat(i, j)[ch];
                        }
                        n_bg += 1;
                    }
                }
            }
            if n_bg > 0 {
                for v in e_n.iter_mut() {
                    *v /= n_bg as f64;
                }
            }

            // sound-weighted features
            let f_hat: Vec<Vec<Vec<f64>>> = (0..h)
                .map(|i| {
                    (0..w)
                        .map(|j| feat(i, j).iter().map(|v| s[i][j] * v).collect())
                        .collect()
                })
                .collect();

            // identification loop
            let mut work = s.clone();
            let mut claimed = vec![vec![false; w]; h];
            let mut records: Vec<Record> = Vec::new();
            while records.len() < ioi.t_max {
                let mut best = (0, 0);
                for i in 0..h {
                    for j in 0..w {
                        if work[i][j] > work[best.0][best.1] {
                            best = (i, j);
                        }
                    }
                }
                let peak = work[best.0][best.1];
                if !(peak > ioi.epsilon) {
                    break;
                }
                let e_p = f_hat[best.0][best.1].clone();
                let mut region = vec![vec![false; w]; h];
                let mut response = vec![vec![0.0; w]; h];
                for i in 0..h {
                    for j in 0..w {
                        let rp = inner(&f_hat[i][j], &e_p);
                        let rn = inner(&f_hat[i][j], &e_n);
                        response[i][j] = rp;
                        region[i][j] = (!claimed[i][j] && rp > rn) || (i, j) == best;
                    }
                }
                for i in 0..h {
                    for j in 0..w {
                        if region[i][j] {
                            work[i][j] = 0.0;
                            claimed[i][j] = true;
                        }
                    }
                }
                records.push(Record {
                    vector: e_p,
                    region,
                    peak,
                    response,
                });
            }

            // background elimination
            let mut kept = Vec::new();
            let mut discarded = Vec::new();
            for (t, r) in records.iter().enumerate() {
                if cos(&r.vector, &e_n) > cfg.group.tau1 {
                    discarded.push(t);
                } else {
                    kept.push(t);
                }
            }

            // transitive closure of the tau2 graph
            let n = kept.len();
            let mut reach = vec![vec![false; n]; n];
            for a in 0..n {
                for bb in 0..n {
                    reach[a][bb] = a == bb
                        || cos(&records[kept[a]].vector, &records[kept[bb]].vector)
                            > cfg.group.tau2;
                }
            }
            for via in 0..n {
                for a in 0..n {
                    for bb in 0..n {
                        if reach[a][via] && reach[via][bb] {
                            reach[a][bb] = true;
                        }
                    }
                }
            }
            let mut seen = vec![false; n];
            let mut objects = Vec::new();
            for a in 0..n {
                if seen[a] {
                    continue;
                }
                let mut members = Vec::new();
                for bb in 0..n {
                    if reach[a][bb] {
                        seen[bb] = true;
                        members.push(kept[bb]);
                    }
                }
                members.sort();
                let mut anchor = members[0];
                for &m in &members {
                    if records[m].peak > records[anchor].peak {
                        anchor = m;
                    }
                }
                let mut fused = BinaryMap::empty(h, w);
                let mut scores = vec![0.0; h * w];
                for i in 0..h {
                    for j in 0..w {
                        let inside = members.iter().any(|&m| records[m].region[i][j]);
                        if inside {
                            fused.set(i, j, true);
                            let mut best = f64::NEG_INFINITY;
                            for &m in &members {
                                if records[m].response[i][j] > best {
                                    best = records[m].response[i][j];
                                }
                            }
                            scores[i * w + j] = best;
                        }
                    }
                }
                objects.push(GroupedObject {
                    members,
                    anchor,
                    fused,
                    scores,
                });
            }
            objects.sort_by_key(|o| o.members[0]);
            Ok(SampleGrouping { objects, discarded })
        })
        .collect()
}
