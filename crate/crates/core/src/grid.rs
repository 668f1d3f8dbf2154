//! Value types shared by every stage of the pipeline, plus the handful of
//! elementary tensor operations the stages need.
//!
//! All tensors are dense, row-major and stored as `f64`. Grids are indexed
//! `(sample, row, col, channel)`; maps drop the channel axis.

use crate::error::{dim_err, Error, Result};

/// Norms below this are treated as zero by [`cosine_sim`].
pub const NORM_EPS: f64 = 1e-12;

/// A `B x h x w x c` visual feature tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrid {
    batch: usize,
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl FeatureGrid {
    pub fn new(
        batch: usize,
        height: usize,
        width: usize,
        channels: usize,
        data: Vec<f64>,
    ) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 || channels == 0 {
            return Err(dim_err(format!(
                "feature grid dims must be positive, got {batch}x{height}x{width}x{channels}"
            )));
        }
        let expected = batch * height * width * channels;
        if data.len() != expected {
            return Err(dim_err(format!(
                "feature grid expects {expected} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalInstability(
                "feature grid contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            channels,
            data,
        })
    }

    pub fn zeros(batch: usize, height: usize, width: usize, channels: usize) -> Result<Self> {
        Self::new(
            batch,
            height,
            width,
            channels,
            vec![0.0; batch * height * width * channels],
        )
    }

    /// Builds a grid from per-sample slices, all of shape `h x w x c`.
    pub fn stack(samples: &[FeatureGrid]) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| dim_err("cannot stack an empty list of grids"))?;
        let mut data = Vec::with_capacity(samples.len() * first.sample_len());
        for s in samples {
            if (s.height, s.width, s.channels) != (first.height, first.width, first.channels) {
                return Err(dim_err("stacked grids disagree on h/w/c"));
            }
            data.extend_from_slice(&s.data);
        }
        Self::new(
            data.len() / first.sample_len(),
            first.height,
            first.width,
            first.channels,
            data,
        )
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    /// Number of spatial cells per sample.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    fn sample_len(&self) -> usize {
        self.height * self.width * self.channels
    }

    /// The `h*w*c` block of one sample.
    pub fn sample(&self, b: usize) -> &[f64] {
        let n = self.sample_len();
        &self.data[b * n..(b + 1) * n]
    }

    /// Copy of one sample as a single-sample grid.
    pub fn sample_grid(&self, b: usize) -> FeatureGrid {
        FeatureGrid {
            batch: 1,
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.sample(b).to_vec(),
        }
    }

    /// Feature vector of cell `(b, i, j)`.
    pub fn cell(&self, b: usize, i: usize, j: usize) -> &[f64] {
        let start = ((b * self.height + i) * self.width + j) * self.channels;
        &self.data[start..start + self.channels]
    }

    /// Feature vector of the cell at row-major linear index `k` in sample `b`.
    pub fn cell_linear(&self, b: usize, k: usize) -> &[f64] {
        let start = (b * self.cells() + k) * self.channels;
        &self.data[start..start + self.channels]
    }
}

/// A batch of `c`-vectors: the pooled audio embedding, or any per-sample probe.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorBatch {
    batch: usize,
    channels: usize,
    data: Vec<f64>,
}

/// Pooled audio embedding `l_a`, one vector per clip.
pub type AudioEmbedding = VectorBatch;

impl VectorBatch {
    pub fn new(batch: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || channels == 0 {
            return Err(dim_err(format!(
                "vector batch dims must be positive, got {batch}x{channels}"
            )));
        }
        if data.len() != batch * channels {
            return Err(dim_err(format!(
                "vector batch expects {} values, got {}",
                batch * channels,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalInstability(
                "vector batch contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            batch,
            channels,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let channels = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != channels) {
            return Err(dim_err("rows of unequal length"));
        }
        Self::new(rows.len(), channels, rows.concat())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn channels(&self) -> usize {
        self.channels
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn row(&self, b: usize) -> &[f64] {
        &self.data[b * self.channels..(b + 1) * self.channels]
    }
    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.channels)
    }
}

/// A `B x h x w` real field, e.g. the normalized similarity map `S_v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    batch: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl SimilarityMap {
    pub fn new(batch: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if batch == 0 || height == 0 || width == 0 {
            return Err(dim_err("similarity map dims must be positive"));
        }
        if data.len() != batch * height * width {
            return Err(dim_err(format!(
                "similarity map expects {} values, got {}",
                batch * height * width,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalInstability(
                "similarity map contains non-finite entries".into(),
            ));
        }
        Ok(Self {
            batch,
            height,
            width,
            data,
        })
    }

    /// Stacks per-sample planes of `h*w` values.
    pub fn from_planes(height: usize, width: usize, planes: &[Vec<f64>]) -> Result<Self> {
        Self::new(planes.len(), height, width, planes.concat())
    }

    pub fn batch(&self) -> usize {
        self.batch
    }
    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn cells(&self) -> usize {
        self.height * self.width
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn plane(&self, b: usize) -> &[f64] {
        let n = self.cells();
        &self.data[b * n..(b + 1) * n]
    }
    pub fn get(&self, b: usize, i: usize, j: usize) -> f64 {
        self.data[(b * self.height + i) * self.width + j]
    }
}

/// Grid coordinates of one cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CellIndex {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
}

impl CellIndex {
    pub fn linear(&self, width: usize) -> usize {
        self.row * width + self.col
    }
}

/// An `h x w` boolean mask: localization regions, fused object maps, truth masks.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    cells: Vec<bool>,
}

impl BinaryMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            cells: vec![false; height * width],
        }
    }

    pub fn from_cells(height: usize, width: usize, cells: Vec<bool>) -> Result<Self> {
        if cells.len() != height * width {
            return Err(dim_err(format!(
                "binary map {height}x{width} given {} cells",
                cells.len()
            )));
        }
        Ok(Self {
            height,
            width,
            cells,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }
    pub fn width(&self) -> usize {
        self.width
    }
    pub fn cells(&self) -> &[bool] {
        &self.cells
    }
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.cells[i * self.width + j]
    }
    pub fn set(&mut self, i: usize, j: usize, value: bool) {
        self.cells[i * self.width + j] = value;
    }
    pub fn set_linear(&mut self, k: usize, value: bool) {
        self.cells[k] = value;
    }
    pub fn count(&self) -> usize {
        self.cells.iter().filter(|&&c| c).count()
    }
    pub fn is_empty(&self) -> bool {
        !self.cells.iter().any(|&c| c)
    }

    /// In-place union with another map of the same shape.
    pub fn union_with(&mut self, other: &BinaryMap) {
        for (a, &b) in self.cells.iter_mut().zip(&other.cells) {
            *a |= b;
        }
    }

    pub fn intersects(&self, other: &BinaryMap) -> bool {
        self.cells.iter().zip(&other.cells).any(|(&a, &b)| a && b)
    }

    /// Row-major `(row, col)` coordinates of the set cells.
    pub fn coordinates(&self) -> Vec<(usize, usize)> {
        self.cells
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(k, _)| (k / self.width, k % self.width))
            .collect()
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity `<a,b> / (|a| |b|)`, zero when either norm vanishes.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(dim_err(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    Ok(cosine_unchecked(a, b))
}

pub(crate) fn cosine_unchecked(a: &[f64], b: &[f64]) -> f64 {
    let na = norm(a);
    let nb = norm(b);
    if na < NORM_EPS || nb < NORM_EPS {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// Gradients of `cos(a, b)` with respect to `a` and `b`, accumulated with
/// weight `scale` into `ga` and `gb`. No-op when either norm vanishes.
pub(crate) fn cosine_backward(a: &[f64], b: &[f64], scale: f64, ga: &mut [f64], gb: &mut [f64]) {
    let na = norm(a);
    let nb = norm(b);
    if na < NORM_EPS || nb < NORM_EPS || scale == 0.0 {
        return;
    }
    let cos = dot(a, b) / (na * nb);
    let inv = 1.0 / (na * nb);
    let ca = cos / (na * na);
    let cb = cos / (nb * nb);
    for k in 0..a.len() {
        ga[k] += scale * (b[k] * inv - ca * a[k]);
        gb[k] += scale * (a[k] * inv - cb * b[k]);
    }
}

/// Global average pooling: per-sample channelwise mean over all cells.
pub fn gap(features: &FeatureGrid) -> AudioEmbedding {
    let c = features.channels;
    let cells = features.cells();
    let mut out = vec![0.0; features.batch * c];
    for b in 0..features.batch {
        let acc = &mut out[b * c..(b + 1) * c];
        for k in 0..cells {
            for (a, v) in acc.iter_mut().zip(features.cell_linear(b, k)) {
                *a += v;
            }
        }
        for a in acc.iter_mut() {
            *a /= cells as f64;
        }
    }
    VectorBatch {
        batch: features.batch,
        channels: c,
        data: out,
    }
}

/// Per-cell inner product `<features[b,i,j,:], probe[b]>`, unnormalized.
pub fn inner_product_map(features: &FeatureGrid, probe: &VectorBatch) -> Result<SimilarityMap> {
    if probe.channels != features.channels || probe.batch != features.batch {
        return Err(dim_err(format!(
            "probe {}x{} does not match grid batch {} with {} channels",
            probe.batch, probe.channels, features.batch, features.channels
        )));
    }
    let cells = features.cells();
    let mut data = Vec::with_capacity(features.batch * cells);
    for b in 0..features.batch {
        data.extend(inner_product_plane(features, b, probe.row(b)));
    }
    SimilarityMap::new(features.batch, features.height, features.width, data)
}

/// Inner product of every cell of sample `b` with `probe`.
pub(crate) fn inner_product_plane(features: &FeatureGrid, b: usize, probe: &[f64]) -> Vec<f64> {
    (0..features.cells())
        .map(|k| dot(features.cell_linear(b, k), probe))
        .collect()
}

/// Largest entry of a sample plane; ties go to the smallest row-major index.
pub fn argmax_cell(map: &SimilarityMap, sample: usize) -> (CellIndex, f64) {
    let (k, v) = argmax_plane(map.plane(sample));
    (
        CellIndex {
            sample,
            row: k / map.width,
            col: k % map.width,
        },
        v,
    )
}

pub(crate) fn argmax_plane(plane: &[f64]) -> (usize, f64) {
    let mut best = 0;
    let mut best_v = plane[0];
    for (k, &v) in plane.iter().enumerate().skip(1) {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    (best, best_v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let v = cosine_sim(&[3.0, 4.0], &[4.0, 3.0]).unwrap();
        assert!((v - 24.0 / 25.0).abs() < 1e-15);
    }

    #[test]
    fn cosine_zero_norm_and_mismatch() {
        assert_eq!(cosine_sim(&[0.0, 0.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert!(matches!(
            cosine_sim(&[1.0], &[1.0, 2.0]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn gap_examples() {
        let g = FeatureGrid::new(1, 1, 2, 2, vec![2.0, 0.0, 0.0, 2.0]).unwrap();
        assert_eq!(gap(&g).data(), &[1.0, 1.0]);
        let u = [0.5, -1.5, 3.0];
        let g = FeatureGrid::new(1, 2, 2, 3, u.repeat(4)).unwrap();
        assert_eq!(gap(&g).data(), &u);
    }

    #[test]
    fn inner_product_examples() {
        let g = FeatureGrid::new(1, 1, 2, 2, vec![1.0, 2.0, 3.0, -1.0]).unwrap();
        let zero = VectorBatch::new(1, 2, vec![0.0, 0.0]).unwrap();
        assert_eq!(inner_product_map(&g, &zero).unwrap().data(), &[0.0, 0.0]);
        let p = VectorBatch::new(1, 2, vec![1.0, 2.0]).unwrap();
        assert_eq!(inner_product_map(&g, &p).unwrap().data(), &[5.0, 1.0]);
        let bad = VectorBatch::new(1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(
            inner_product_map(&g, &bad),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn argmax_examples() {
        let m = SimilarityMap::new(1, 2, 2, vec![1.0, 2.0, 3.0, 0.0]).unwrap();
        let (cell, v) = argmax_cell(&m, 0);
        assert_eq!((cell.row, cell.col, v), (1, 0, 3.0));
        let m = SimilarityMap::new(1, 2, 2, vec![0.5; 4]).unwrap();
        let (cell, _) = argmax_cell(&m, 0);
        assert_eq!((cell.row, cell.col), (0, 0));
    }

    #[test]
    fn grid_rejects_bad_shapes() {
        assert!(FeatureGrid::new(1, 2, 2, 1, vec![0.0; 3]).is_err());
        assert!(FeatureGrid::new(0, 2, 2, 1, vec![]).is_err());
        assert!(FeatureGrid::new(1, 1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn cosine_backward_matches_differences() {
        let a = [0.3, -1.2, 0.8];
        let b = [1.1, 0.4, -0.5];
        let mut ga = [0.0; 3];
        let mut gb = [0.0; 3];
        cosine_backward(&a, &b, 1.0, &mut ga, &mut gb);
        let h = 1e-6;
        for k in 0..3 {
            let mut ap = a;
            let mut am = a;
            ap[k] += h;
            am[k] -= h;
            let fd = (cosine_unchecked(&ap, &b) - cosine_unchecked(&am, &b)) / (2.0 * h);
            assert!((fd - ga[k]).abs() < 1e-8);
            let mut bp = b;
            let mut bm = b;
            bp[k] += h;
            bm[k] -= h;
            let fd = (cosine_unchecked(&a, &bp) - cosine_unchecked(&a, &bm)) / (2.0 * h);
            assert!((fd - gb[k]).abs() < 1e-8);
        }
    }
}
