//! Iterative object identification.
//!
//! Per sample, while the working similarity map still has a cell above
//! `epsilon`:
//!
//! 1. take the arg-max cell and read its sound-weighted feature `E_p`;
//! 2. score every cell against `E_p` (foreground) and against the
//!    background probe `E_n` by plain inner products;
//! 3. the region is every unclaimed cell whose foreground score strictly
//!    beats its background score, plus the seed cell itself;
//! 4. zero the region in the working map and record the iteration.
//!
//! The seed is always part of its region, so each pass zeroes at least one
//! positive cell and the loop is bounded by the number of cells above
//! `epsilon` (and by `t_max`).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::grid::{
    argmax_plane, inner_product_plane, BinaryMap, CellIndex, FeatureGrid, SimilarityMap,
    VectorBatch,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IoiConfig {
    pub epsilon: f64,
    pub t_max: usize,
}

impl IoiConfig {
    /// `epsilon = 1/(h*w)` (the mean of a self-normalized map), `t_max = h*w`.
    pub fn for_grid(height: usize, width: usize) -> Self {
        let cells = height * width;
        Self {
            epsilon: 1.0 / cells as f64,
            t_max: cells,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!(
                "epsilon must be finite and >= 0, got {}",
                self.epsilon
            )));
        }
        if self.t_max == 0 {
            return Err(Error::Config("t_max must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub step: usize,
    pub cell: CellIndex,
    /// `E_p`: the sound-weighted feature of the seed cell.
    pub cell_vector: Vec<f64>,
    pub region: BinaryMap,
    /// Working-map value of the seed when it was selected.
    pub peak_value: f64,
    /// Foreground response `<F_hat, E_p>` over the whole plane.
    pub response: Vec<f64>,
}

/// Ordered iteration records of one sample.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ObjectBank {
    pub records: Vec<IterationRecord>,
}

impl ObjectBank {
    pub fn iteration_count(&self) -> usize {
        self.records.len()
    }
}

/// Runs the loop independently on every sample. The caller's map is not
/// modified.
pub fn run_ioi(
    f_hat: &FeatureGrid,
    self_maps: &SimilarityMap,
    e_n: &VectorBatch,
    cfg: &IoiConfig,
) -> Result<Vec<ObjectBank>> {
    cfg.validate()?;
    if (f_hat.batch(), f_hat.height(), f_hat.width())
        != (self_maps.batch(), self_maps.height(), self_maps.width())
    {
        return Err(dim_err("similarity map shape does not match features"));
    }
    if e_n.batch() != f_hat.batch() || e_n.channels() != f_hat.channels() {
        return Err(dim_err("background probe does not match features"));
    }
    Ok((0..f_hat.batch())
        .into_par_iter()
        .map(|b| run_ioi_sample(f_hat, b, self_maps.plane(b), e_n.row(b), cfg))
        .collect())
}

/// The loop for sample `b` of `f_hat`, with its own similarity plane and
/// background probe.
pub fn run_ioi_sample(
    f_hat: &FeatureGrid,
    b: usize,
    self_map: &[f64],
    e_n: &[f64],
    cfg: &IoiConfig,
) -> ObjectBank {
    let (h, w) = (f_hat.height(), f_hat.width());
    let mut working = self_map.to_vec();
    let mut claimed = vec![false; h * w];
    let background = inner_product_plane(f_hat, b, e_n);
    let mut records = Vec::new();

    while records.len() < cfg.t_max {
        let (seed, peak) = argmax_plane(&working);
        if !(peak > cfg.epsilon) {
            break;
        }
        let cell_vector = f_hat.cell_linear(b, seed).to_vec();
        let response = inner_product_plane(f_hat, b, &cell_vector);
        let mut region = BinaryMap::empty(h, w);
        for k in 0..h * w {
            if !claimed[k] && response[k] > background[k] {
                region.set_linear(k, true);
            }
        }
        region.set_linear(seed, true);
        for (k, &inside) in region.cells().iter().enumerate() {
            if inside {
                working[k] = 0.0;
                claimed[k] = true;
            }
        }
        records.push(IterationRecord {
            step: records.len(),
            cell: CellIndex {
                sample: b,
                row: seed / w,
                col: seed % w,
            },
            cell_vector,
            region,
            peak_value: peak,
            response,
        });
    }
    ObjectBank { records }
}
