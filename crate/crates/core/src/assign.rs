//! Pairings between point sets: optimal (Hungarian) and greedy.

use crate::mesh::Point3;

/// Pairwise Euclidean distances, `rows x cols`.
pub fn distance_matrix(a: &[Point3], b: &[Point3]) -> Vec<Vec<f64>> {
    a.iter()
        .map(|p| b.iter().map(|q| (p - q).norm()).collect())
        .collect()
}

/// Minimum-cost assignment for a rectangular cost matrix. Returns, for each
/// row, its assigned column; when there are more rows than columns some rows
/// get `None`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let rows = cost.len();
    let cols = cost.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    if rows > cols {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        let by_col = hungarian(&t);
        let mut out = vec![None; rows];
        for (c, r) in by_col.into_iter().enumerate() {
            if let Some(r) = r {
                out[r] = Some(c);
            }
        }
        return out;
    }
    // Shortest augmenting path with potentials, rows <= cols, 1-based.
    let n = rows;
    let m = cols;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            out[p[j] - 1] = Some(j - 1);
        }
    }
    out
}

/// Result of a greedy nearest-pair association.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// `(row, col, distance)` in the order the pairs were taken.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Association {
    /// Root mean square of the matched distances; `None` with no pairs.
    pub fn rms(&self) -> Option<f64> {
        if self.pairs.is_empty() {
            None
        } else {
            let s: f64 = self.pairs.iter().map(|p| p.2 * p.2).sum();
            Some((s / self.pairs.len() as f64).sqrt())
        }
    }
}

/// Repeatedly takes the globally closest remaining pair and removes its row
/// and column. Ties go to the lowest `(row, col)`.
pub fn greedy_associate(a: &[Point3], b: &[Point3]) -> Association {
    let d = distance_matrix(a, b);
    let mut order: Vec<(usize, usize)> = (0..a.len())
        .flat_map(|r| (0..b.len()).map(move |c| (r, c)))
        .collect();
    order.sort_by(|x, y| d[x.0][x.1].total_cmp(&d[y.0][y.1]).then(x.cmp(y)));
    let mut row_used = vec![false; a.len()];
    let mut col_used = vec![false; b.len()];
    let mut pairs = Vec::new();
    for (r, c) in order {
        if !row_used[r] && !col_used[c] {
            row_used[r] = true;
            col_used[c] = true;
            pairs.push((r, c, d[r][c]));
        }
    }
    Association {
        pairs,
        unmatched_rows: (0..a.len()).filter(|&r| !row_used[r]).collect(),
        unmatched_cols: (0..b.len()).filter(|&c| !col_used[c]).collect(),
    }
}
