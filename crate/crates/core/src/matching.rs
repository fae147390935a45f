//! One-to-one label assignment between ground-truth lanes and predictions.
//!
//! The pairwise cost is `w_reg * mean|dx| / W + w_cls * -ln(score + eps)`
//! and the assignment is an exact minimum-cost matching (Hungarian method
//! with row/column potentials). Among equal-cost optima the lexicographically
//! smallest prediction sequence (by ground-truth index) is returned.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Lane;

/// Added to scores before taking the log in the classification cost.
pub const CLS_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AssignWeights {
    pub reg: f64,
    pub cls: f64,
}

impl Default for AssignWeights {
    fn default() -> Self {
        Self {
            reg: 10.0,
            cls: 1.0,
        }
    }
}

/// Dense `rows x cols` cost matrix, row-major. Rows are ground truths.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::invalid(format!(
                "cost matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite cost {bad}")));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::invalid("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn transposed(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

/// Matched `(gt_index, pred_index)` pairs, sorted by ground-truth index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

impl Assignment {
    /// Prediction index matched to each ground truth.
    pub fn pred_for_gt(&self) -> Vec<usize> {
        self.pairs.iter().map(|&(_, p)| p).collect()
    }

    /// `Some(gt)` for predictions that received a ground truth.
    pub fn gt_for_pred(&self, num_preds: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; num_preds];
        for &(g, p) in &self.pairs {
            out[p] = Some(g);
        }
        out
    }
}

/// Mean `|pred - gt|` over rows where the ground truth is valid, in pixels.
pub fn masked_mean_abs(pred: &Lane, gt: &Lane) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::invalid(format!(
            "lanes on different grids ({} vs {} points)",
            pred.len(),
            gt.len()
        )));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (i, x) in gt.valid_points() {
        sum += (pred.xs[i] - x).abs();
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid("ground-truth lane has no valid rows"));
    }
    Ok(sum / n as f64)
}

/// Builds the `G x K` assignment cost between ground truths and scored
/// predictions.
pub fn assignment_cost(
    preds: &[Lane],
    gts: &[Lane],
    img_width: f64,
    weights: &AssignWeights,
) -> Result<CostMatrix> {
    if gts.is_empty() || preds.is_empty() {
        return Err(Error::invalid(
            "assignment cost needs at least one lane on each side",
        ));
    }
    let cls: Vec<f64> = preds.iter().map(|p| -(p.score + CLS_EPS).ln()).collect();
    let mut values = Vec::with_capacity(gts.len() * preds.len());
    for gt in gts {
        for (pred, cls) in preds.iter().zip(&cls) {
            let reg = masked_mean_abs(pred, gt)? / img_width;
            values.push(weights.reg * reg + weights.cls * cls);
        }
    }
    CostMatrix::new(gts.len(), preds.len(), values)
}

/// Exact minimum-cost assignment of every row to a distinct column.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (g, k) = (cost.rows(), cost.cols());
    if g > k {
        return Err(Error::Infeasible { gts: g, preds: k });
    }
    if g == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    // Pad to square with zero-cost rows; the real rows come first so the
    // tie-break below orders by them.
    let n = k;
    let square: Vec<f64> = (0..n * n)
        .map(|idx| {
            let (r, c) = (idx / n, idx % n);
            if r < g {
                cost.get(r, c)
            } else {
                0.0
            }
        })
        .collect();
    let solved = solve_square(&square, n);
    let col_of_row = lexicographic_optimum(&square, n, g, solved);

    let pairs: Vec<(usize, usize)> = (0..g).map(|r| (r, col_of_row[r])).collect();
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Minimum-cost matching of a rectangular matrix of either orientation.
/// Returns `min(rows, cols)` `(row, col)` pairs sorted by row.
pub fn min_cost_matching(cost: &CostMatrix) -> Result<Vec<(usize, usize)>> {
    if cost.rows() <= cost.cols() {
        return Ok(hungarian(cost)?.pairs);
    }
    let mut pairs: Vec<(usize, usize)> = hungarian(&cost.transposed())?
        .pairs
        .into_iter()
        .map(|(c, r)| (r, c))
        .collect();
    pairs.sort_unstable();
    Ok(pairs)
}

struct Solved {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest augmenting path Hungarian algorithm, O(n^3).
fn solve_square(c: &[f64], n: usize) -> Solved {
    // 1-based potentials/matching with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of_col = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = c[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
    let mut col_of_row = vec![0usize; n];
    for j in 1..=n {
        col_of_row[row_of_col[j] - 1] = j - 1;
    }
    Solved {
        col_of_row,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

/// Walks rows `0..fixed_rows` in order and pins each to the smallest column
/// that still admits an optimal completion. With optimal potentials, a
/// matching is optimal iff it uses only tight edges, so this reduces to
/// perfect-matching feasibility in the tight-edge graph.
fn lexicographic_optimum(c: &[f64], n: usize, fixed_rows: usize, solved: Solved) -> Vec<usize> {
    let Solved {
        mut col_of_row,
        u,
        v,
    } = solved;
    let scale = c.iter().fold(1.0f64, |m, x| m.max(x.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight = |r: usize, col: usize| c[r * n + col] - u[r] - v[col] <= tol;

    let mut row_of_col = vec![0usize; n];
    for (r, &col) in col_of_row.iter().enumerate() {
        row_of_col[col] = r;
    }
    let mut col_pinned = vec![false; n];

    for r in 0..fixed_rows {
        for col in 0..n {
            if col_pinned[col] || !tight(r, col) {
                continue;
            }
            if col_of_row[r] == col {
                break;
            }
            // Hand `col` to `r`; its previous holder must reach the column
            // `r` releases through an alternating path of tight edges.
            let holder = row_of_col[col];
            let released = col_of_row[r];
            let mut trial_col_of_row = col_of_row.clone();
            let mut trial_row_of_col = row_of_col.clone();
            trial_col_of_row[r] = col;
            trial_row_of_col[col] = r;
            trial_row_of_col[released] = usize::MAX;
            let mut blocked = col_pinned.clone();
            blocked[col] = true;
            let mut seen = vec![false; n];
            if augment(
                holder,
                &tight,
                &blocked,
                &mut seen,
                &mut trial_col_of_row,
                &mut trial_row_of_col,
            ) {
                col_of_row = trial_col_of_row;
                row_of_col = trial_row_of_col;
                break;
            }
        }
        col_pinned[col_of_row[r]] = true;
    }
    col_of_row
}

fn augment(
    row: usize,
    tight: &impl Fn(usize, usize) -> bool,
    blocked: &[bool],
    seen: &mut [bool],
    col_of_row: &mut [usize],
    row_of_col: &mut [usize],
) -> bool {
    for col in 0..blocked.len() {
        if blocked[col] || seen[col] || !tight(row, col) {
            continue;
        }
        seen[col] = true;
        let holder = row_of_col[col];
        if holder == usize::MAX
            || augment(holder, tight, blocked, seen, col_of_row, row_of_col)
        {
            col_of_row[row] = col;
            row_of_col[col] = row;
            return true;
        }
    }
    false
}
