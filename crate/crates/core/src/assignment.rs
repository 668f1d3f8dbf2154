//! Maximum-weight one-to-one assignment between predictions (rows) and
//! ground-truth items (columns).

/// A partial one-to-one matching.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
    pub total: f64,
}

impl Assignment {
    /// Column matched to `row`, if any.
    pub fn col_of(&self, row: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.0 == row).map(|p| p.1)
    }

    /// Row matched to `col`, if any.
    pub fn row_of(&self, col: usize) -> Option<usize> {
        self.pairs.iter().find(|p| p.1 == col).map(|p| p.0)
    }
}

/// Largest side for which [`best_assignment`] enumerates permutations.
pub const EXHAUSTIVE_LIMIT: usize = 6;

/// Maximizes the summed weight of a `rows x cols` matrix (row-major
/// `weights[r][c]`, entries expected non-negative). Pairs of zero weight are
/// reported as unmatched.
pub fn best_assignment(weights: &[Vec<f64>], cols: usize) -> Assignment {
    if weights.len().max(cols) <= EXHAUSTIVE_LIMIT {
        exhaustive_assignment(weights, cols)
    } else {
        hungarian_assignment(weights, cols)
    }
}

fn finish(weights: &[Vec<f64>], cols: usize, col_of_row: &[Option<usize>]) -> Assignment {
    let rows = weights.len();
    let mut pairs = Vec::new();
    let mut used = vec![false; cols];
    for (r, c) in col_of_row.iter().enumerate() {
        if let Some(c) = *c {
            if c < cols && weights[r][c] > 0.0 {
                pairs.push((r, c));
                used[c] = true;
            }
        }
    }
    let matched_rows: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let total = pairs.iter().map(|&(r, c)| weights[r][c]).sum();
    Assignment {
        unmatched_rows: (0..rows).filter(|r| !matched_rows.contains(r)).collect(),
        unmatched_cols: (0..cols).filter(|&c| !used[c]).collect(),
        pairs,
        total,
    }
}

fn padded(weights: &[Vec<f64>], cols: usize) -> (usize, Vec<Vec<f64>>) {
    let n = weights.len().max(cols);
    let mut m = vec![vec![0.0; n]; n];
    for (r, row) in weights.iter().enumerate() {
        m[r][..cols].copy_from_slice(&row[..cols]);
    }
    (n, m)
}

/// Tries every permutation of the zero-padded square matrix.
pub fn exhaustive_assignment(weights: &[Vec<f64>], cols: usize) -> Assignment {
    let (n, m) = padded(weights, cols);
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best = f64::NEG_INFINITY;
    permute(&m, &mut perm, 0, 0.0, &mut best, &mut best_perm);
    let col_of_row: Vec<Option<usize>> = (0..weights.len()).map(|r| Some(best_perm[r])).collect();
    finish(weights, cols, &col_of_row)
}

fn permute(
    m: &[Vec<f64>],
    perm: &mut [usize],
    depth: usize,
    acc: f64,
    best: &mut f64,
    best_perm: &mut Vec<usize>,
) {
    let n = perm.len();
    if depth == n {
        if acc > *best {
            *best = acc;
            best_perm.copy_from_slice(perm);
        }
        return;
    }
    for i in depth..n {
        perm.swap(depth, i);
        let w = m[depth][perm[depth]];
        permute(m, perm, depth + 1, acc + w, best, best_perm);
        perm.swap(depth, i);
    }
}

/// Kuhn-Munkres with potentials on the zero-padded square matrix, O(n^3).
pub fn hungarian_assignment(weights: &[Vec<f64>], cols: usize) -> Assignment {
    let (n, m) = padded(weights, cols);
    if n == 0 {
        return finish(weights, cols, &[]);
    }
    let max_w = m.iter().flatten().cloned().fold(0.0f64, f64::max);
    // minimize cost = max_w - weight; 1-based arrays, index 0 is a sentinel
    let cost = |i: usize, j: usize| max_w - m[i - 1][j - 1];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![None; weights.len()];
    for j in 1..=n {
        let r = row_of_col[j];
        if r >= 1 && r - 1 < weights.len() {
            col_of_row[r - 1] = Some(j - 1);
        }
    }
    finish(weights, cols, &col_of_row)
}
