//! On-disk artifacts of the localizer: per-object PGM heatmaps and the
//! combined `objects.json`.

use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use mssl_core::grouping::SampleGrouping;
use mssl_core::ioi::ObjectBank;
use mssl_core::metrics::PredictedObject;
use mssl_core::{BinaryMap, Localization};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectsFile {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SampleEntry {
    pub sample: usize,
    /// Number of objects found.
    pub k: usize,
    pub iterations: usize,
    pub records: Vec<RecordEntry>,
    /// Record indices dropped as background.
    pub discarded: Vec<usize>,
    pub objects: Vec<ObjectEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RecordEntry {
    pub step: usize,
    pub cell: [usize; 2],
    pub peak: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ObjectEntry {
    pub object: usize,
    /// Record indices grouped into this object.
    pub members: Vec<usize>,
    pub anchor: usize,
    /// Similarity-map value of the anchor when it was selected.
    pub peak: f64,
    /// `[row, col]` of every cell in the fused map.
    pub cells: Vec<[usize; 2]>,
    /// Row-major per-cell confidence, zero outside the fused map.
    pub scores: Vec<f64>,
    pub heatmap: String,
}

pub fn heatmap_name(sample: usize, object: usize) -> String {
    format!("sample{sample:03}_object{object:02}.pgm")
}

fn sample_entry(b: usize, bank: &ObjectBank, grouping: &SampleGrouping) -> SampleEntry {
    SampleEntry {
        sample: b,
        k: grouping.object_count(),
        iterations: bank.iteration_count(),
        records: bank
            .records
            .iter()
            .map(|r| RecordEntry {
                step: r.step,
                cell: [r.cell.row, r.cell.col],
                peak: r.peak_value,
            })
            .collect(),
        discarded: grouping.discarded.clone(),
        objects: grouping
            .objects
            .iter()
            .enumerate()
            .map(|(k, o)| ObjectEntry {
                object: k,
                members: o.members.clone(),
                anchor: o.anchor,
                peak: bank.records[o.anchor].peak_value,
                cells: o
                    .fused
                    .coordinates()
                    .into_iter()
                    .map(|(i, j)| [i, j])
                    .collect(),
                scores: o.scores.clone(),
                heatmap: heatmap_name(b, k),
            })
            .collect(),
    }
}

impl ObjectsFile {
    pub fn from_localization(l: &Localization) -> Self {
        Self {
            height: l.f_hat.height(),
            width: l.f_hat.width(),
            samples: l
                .banks
                .iter()
                .zip(&l.grouping)
                .enumerate()
                .map(|(b, (bank, g))| sample_entry(b, bank, g))
                .collect(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Objects of one sample as scored maps.
    pub fn predictions(&self, sample: usize) -> Result<Vec<PredictedObject>> {
        let Some(entry) = self.samples.get(sample) else {
            bail!(mssl_core::Error::Format(format!(
                "no sample {sample} in objects file"
            )));
        };
        entry
            .objects
            .iter()
            .map(|o| {
                let mut map = BinaryMap::empty(self.height, self.width);
                for &[i, j] in &o.cells {
                    if i >= self.height || j >= self.width {
                        bail!(mssl_core::Error::Format(format!(
                            "cell [{i}, {j}] outside the grid"
                        )));
                    }
                    map.set(i, j, true);
                }
                if o.scores.len() != self.height * self.width {
                    bail!(mssl_core::Error::Format(
                        "score map has the wrong size".into()
                    ));
                }
                Ok(PredictedObject {
                    map,
                    scores: o.scores.clone(),
                })
            })
            .collect()
    }
}

/// Binary 8-bit PGM (P5): 255 inside the map, 0 elsewhere, each cell
/// replicated `scale x scale` times.
pub fn pgm_bytes(map: &BinaryMap, scale: usize) -> Vec<u8> {
    let (h, w) = (map.height() * scale, map.width() * scale);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.reserve(h * w);
    for y in 0..h {
        for x in 0..w {
            out.push(if map.get(y / scale, x / scale) {
                255
            } else {
                0
            });
        }
    }
    out
}

/// Writes every object's heatmap and `objects.json` into `dir`.
pub fn write_localization(dir: &Path, l: &Localization, scale: usize) -> Result<ObjectsFile> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let objects = ObjectsFile::from_localization(l);
    for (b, grouping) in l.grouping.iter().enumerate() {
        for (k, o) in grouping.objects.iter().enumerate() {
            let path = dir.join(heatmap_name(b, k));
            fs::write(&path, pgm_bytes(&o.fused, scale))
                .with_context(|| format!("writing {}", path.display()))?;
        }
    }
    write_json(&dir.join("objects.json"), &objects)?;
    Ok(objects)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file =
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_layout() {
        let mut m = BinaryMap::empty(1, 2);
        m.set(0, 1, true);
        assert_eq!(pgm_bytes(&m, 1), b"P5\n2 1\n255\n\x00\xff".to_vec());
        let up = pgm_bytes(&m, 2);
        assert_eq!(&up[..11], b"P5\n4 2\n255\n");
        assert_eq!(&up[11..], &[0, 0, 255, 255, 0, 0, 255, 255]);
    }
}
