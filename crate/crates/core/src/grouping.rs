//! Turning an object bank into objects: drop background-like entries, join
//! remaining cells whose cosine clears `tau2` with union-find, and fuse each
//! component's regions into one map.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{cosine_unchecked, BinaryMap};
use crate::ioi::ObjectBank;
use crate::objectives::{OscBatchStructure, OscGroup, OscSample, VectorOrigin};
use crate::union_find::UnionFind;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupConfig {
    /// Records whose cosine with the background probe exceeds this are dropped.
    pub tau1: f64,
    /// Records whose pairwise cosine exceeds this belong to the same object.
    pub tau2: f64,
}

impl Default for GroupConfig {
    fn default() -> Self {
        Self {
            tau1: 0.7,
            tau2: 0.6,
        }
    }
}

impl GroupConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("tau1", self.tau1), ("tau2", self.tau2)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0,1), got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupedObject {
    /// Bank record indices, ascending.
    pub members: Vec<usize>,
    /// Member with the highest peak value.
    pub anchor: usize,
    /// Union of the members' regions.
    pub fused: BinaryMap,
    /// Per-cell maximum of the members' foreground responses inside
    /// `fused`, zero elsewhere.
    pub scores: Vec<f64>,
}

/// Objects of one sample. Objects are ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SampleGrouping {
    pub objects: Vec<GroupedObject>,
    /// Record indices judged to be background.
    pub discarded: Vec<usize>,
}

impl SampleGrouping {
    pub fn object_count(&self) -> usize {
        self.objects.len()
    }
}

/// Per-sample grouping of a batch.
pub type ObjectGrouping = Vec<SampleGrouping>;

/// Splits record indices into `(kept, discarded)` by cosine with `e_n`.
pub fn filter_background(
    bank: &ObjectBank,
    e_n: &[f64],
    cfg: &GroupConfig,
) -> (Vec<usize>, Vec<usize>) {
    (0..bank.records.len())
        .partition(|&t| cosine_unchecked(&bank.records[t].cell_vector, e_n) <= cfg.tau1)
}

/// Connected components of the graph joining vectors with cosine above
/// `tau2`. Indices refer to positions in `vectors`.
pub fn cluster_cells<V: AsRef<[f64]>>(vectors: &[V], cfg: &GroupConfig) -> Vec<Vec<usize>> {
    let n = vectors.len();
    let mut uf = UnionFind::new(n);
    for u in 0..n {
        for v in u + 1..n {
            if cosine_unchecked(vectors[u].as_ref(), vectors[v].as_ref()) > cfg.tau2 {
                uf.union(u, v);
            }
        }
    }
    uf.components()
}

/// Builds objects from `components`, whose entries index into `kept`.
pub fn assemble_objects(
    bank: &ObjectBank,
    kept: &[usize],
    components: &[Vec<usize>],
    discarded: &[usize],
) -> SampleGrouping {
    let mut objects: Vec<GroupedObject> = components
        .iter()
        .filter(|c| !c.is_empty())
        .map(|comp| {
            let mut members: Vec<usize> = comp.iter().map(|&i| kept[i]).collect();
            members.sort_unstable();
            let first = &bank.records[members[0]];
            let (h, w) = (first.region.height(), first.region.width());
            let mut fused = BinaryMap::empty(h, w);
            let mut anchor = members[0];
            for &m in &members {
                let r = &bank.records[m];
                fused.union_with(&r.region);
                if r.peak_value > bank.records[anchor].peak_value {
                    anchor = m;
                }
            }
            let scores = (0..h * w)
                .map(|k| {
                    if fused.cells()[k] {
                        members
                            .iter()
                            .map(|&m| bank.records[m].response[k])
                            .fold(f64::NEG_INFINITY, f64::max)
                    } else {
                        0.0
                    }
                })
                .collect();
            GroupedObject {
                members,
                anchor,
                fused,
                scores,
            }
        })
        .collect();
    objects.sort_by_key(|o| o.members[0]);
    let mut discarded = discarded.to_vec();
    discarded.sort_unstable();
    SampleGrouping { objects, discarded }
}

/// Filter, cluster and assemble one sample's bank.
pub fn group_sample(bank: &ObjectBank, e_n: &[f64], cfg: &GroupConfig) -> SampleGrouping {
    let (kept, discarded) = filter_background(bank, e_n, cfg);
    let vectors: Vec<&[f64]> = kept
        .iter()
        .map(|&t| bank.records[t].cell_vector.as_slice())
        .collect();
    let components = cluster_cells(&vectors, cfg);
    assemble_objects(bank, &kept, &components, &discarded)
}

/// Anchor/positive/negative structure for the clustering loss.
///
/// Each sample's pool holds its records' cell vectors (in record order)
/// followed by the background probe unless `background_empty[b]` is set.
/// Positives are the anchor's co-members; negatives are the members of other
/// objects, the discarded records and the probe.
pub fn osc_structure(
    banks: &[ObjectBank],
    groupings: &[SampleGrouping],
    e_n: &[Vec<f64>],
    background_empty: &[bool],
) -> OscBatchStructure {
    let samples = banks
        .iter()
        .zip(groupings)
        .enumerate()
        .map(|(b, (bank, grouping))| {
            let mut s = OscSample::default();
            for r in &bank.records {
                s.push_vector(r.cell_vector.clone(), VectorOrigin::Cell(r.cell));
            }
            let probe = (!background_empty[b])
                .then(|| s.push_vector(e_n[b].clone(), VectorOrigin::Background(b)));
            for (k, obj) in grouping.objects.iter().enumerate() {
                let positives = obj
                    .members
                    .iter()
                    .copied()
                    .filter(|&m| m != obj.anchor)
                    .collect();
                let mut negatives: Vec<usize> = grouping
                    .objects
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != k)
                    .flat_map(|(_, o)| o.members.iter().copied())
                    .chain(grouping.discarded.iter().copied())
                    .collect();
                negatives.sort_unstable();
                negatives.extend(probe);
                s.groups.push(OscGroup {
                    anchor: obj.anchor,
                    positives,
                    negatives,
                });
            }
            s
        })
        .collect();
    OscBatchStructure { samples }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::CellIndex;
    use crate::ioi::IterationRecord;

    fn record(step: usize, v: Vec<f64>, region: &[bool], peak: f64) -> IterationRecord {
        IterationRecord {
            step,
            cell: CellIndex {
                sample: 0,
                row: 0,
                col: step,
            },
            cell_vector: v,
            region: BinaryMap::from_cells(1, region.len(), region.to_vec()).unwrap(),
            peak_value: peak,
            response: region
                .iter()
                .map(|&r| if r { 1.0 + step as f64 } else { 0.0 })
                .collect(),
        }
    }

    #[test]
    fn background_filter() {
        let e_n = vec![1.0, 0.0];
        let bank = ObjectBank {
            records: vec![
                record(0, vec![2.0, 0.0], &[true, false], 0.5),
                record(1, vec![0.0, 1.0], &[false, true], 0.4),
            ],
        };
        let (kept, discarded) = filter_background(&bank, &e_n, &GroupConfig::default());
        assert_eq!(kept, vec![1]);
        assert_eq!(discarded, vec![0]);
    }

    #[test]
    fn chain_links_through_middle() {
        // cos(a,b) = cos(b,c) ~ 0.707 > 0.6, cos(a,c) = 0
        let a = vec![1.0, 0.0];
        let b = vec![1.0, 1.0];
        let c = vec![0.0, 1.0];
        let comps = cluster_cells(&[a, b, c], &GroupConfig::default());
        assert_eq!(comps, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn no_edges_gives_singletons() {
        let vs = vec![
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ];
        assert_eq!(
            cluster_cells(&vs, &GroupConfig::default()),
            vec![vec![0], vec![1], vec![2]]
        );
    }

    #[test]
    fn assemble_singleton_and_union() {
        let bank = ObjectBank {
            records: vec![
                record(0, vec![1.0, 0.0], &[true, false, false], 0.5),
                record(1, vec![1.0, 0.1], &[false, true, false], 0.7),
                record(2, vec![0.0, 1.0], &[false, false, true], 0.2),
            ],
        };
        let g = group_sample(&bank, &[-1.0, -1.0], &GroupConfig::default());
        assert_eq!(g.object_count(), 2);
        assert_eq!(g.objects[0].members, vec![0, 1]);
        assert_eq!(g.objects[0].anchor, 1);
        assert_eq!(g.objects[0].fused.cells(), &[true, true, false]);
        assert_eq!(g.objects[0].scores, vec![1.0, 2.0, 0.0]);
        assert_eq!(g.objects[1].members, vec![2]);
        assert_eq!(g.objects[1].anchor, 2);
        assert_eq!(g.objects[1].fused.cells(), &[false, false, true]);

        let osc = osc_structure(&[bank], &[g], &[vec![-1.0, -1.0]], &[false]);
        osc.validate().unwrap();
        let s = &osc.samples[0];
        assert_eq!(s.vectors.len(), 4);
        assert_eq!(s.groups[0].positives, vec![0]);
        assert_eq!(s.groups[0].negatives, vec![2, 3]);
        assert_eq!(s.groups[1].positives, Vec::<usize>::new());
        assert_eq!(s.groups[1].negatives, vec![0, 1, 3]);
    }

    #[test]
    fn anchor_ties_go_to_earliest() {
        let bank = ObjectBank {
            records: vec![
                record(0, vec![1.0, 0.0], &[true, false], 0.5),
                record(1, vec![1.0, 0.0], &[false, true], 0.5),
            ],
        };
        let g = group_sample(&bank, &[0.0, 1.0], &GroupConfig::default());
        assert_eq!(g.objects[0].anchor, 0);
    }
}
