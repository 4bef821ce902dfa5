//! Weight transforms applied to the active masked rows before sampling.
//!
//! Every transform takes the rows it may touch explicitly; other rows are
//! left as they are. Top-k and conv preserve the total weight over those
//! rows; the repetition penalty preserves each row's own weight.

use serde::{Deserialize, Serialize};

use crate::state::{ProbGrid, SequenceState};

/// Sum of weights over `rows`.
pub fn total_mass(grid: &ProbGrid, rows: &[usize]) -> f64 {
    grid.mass(rows)
}

/// Keeps the `k` largest entries of each row (ties to the lower token id),
/// then rescales the survivors by one global factor so the total weight over
/// `rows` is unchanged.
pub fn apply_topk_glob(grid: &ProbGrid, rows: &[usize], k: usize) -> ProbGrid {
    let mut out = grid.clone();
    if k >= grid.cols() {
        return out;
    }
    let before = total_mass(grid, rows);
    let mut order: Vec<usize> = Vec::with_capacity(grid.cols());
    for &i in rows {
        order.clear();
        order.extend(0..grid.cols());
        let row = grid.row(i);
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        let out_row = out.row_mut(i);
        for &j in &order[k..] {
            out_row[j] = 0.0;
        }
    }
    let kept = total_mass(&out, rows);
    if kept > 0.0 {
        let factor = before / kept;
        for &i in rows {
            out.row_mut(i).iter_mut().for_each(|x| *x *= factor);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConvFn {
    #[default]
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvConfig {
    /// Kernel size `K`; positions within `K/2` count as neighbours.
    pub kernel: usize,
    pub g: ConvFn,
    /// Scale `lambda` inside `g`.
    pub scale: f64,
}

impl ConvConfig {
    pub fn new(kernel: usize) -> Self {
        Self {
            kernel,
            g: ConvFn::Tanh,
            scale: 1.0,
        }
    }

    pub fn half(&self) -> usize {
        self.kernel / 2
    }

    pub fn score(&self, u: usize) -> f64 {
        match self.g {
            ConvFn::Tanh => (self.scale * u as f64).tanh(),
        }
    }
}

/// Count of unmasked positions (prompt included) within `half` of `i`.
pub fn neighbour_count(state: &SequenceState, i: usize, half: usize) -> usize {
    let lo = i.saturating_sub(half);
    let hi = (i + half + 1).min(state.len());
    (lo..hi).filter(|&j| j != i && !state.is_masked(j)).count()
}

/// Scales row `i` by `g(lambda * u_i)` and then all rows by one factor that
/// restores the total weight over `rows`. Rows with no unmasked neighbour
/// become zero.
pub fn apply_conv(grid: &ProbGrid, state: &SequenceState, rows: &[usize], cfg: &ConvConfig) -> ProbGrid {
    let mut out = grid.clone();
    let before = total_mass(grid, rows);
    for &i in rows {
        let s = cfg.score(neighbour_count(state, i, cfg.half()));
        out.row_mut(i).iter_mut().for_each(|x| *x *= s);
    }
    let after = total_mass(&out, rows);
    if after > 0.0 {
        let s_norm = before / after;
        for &i in rows {
            out.row_mut(i).iter_mut().for_each(|x| *x *= s_norm);
        }
    }
    out
}

/// Multiplies the weight of every token flagged in `context` by `rho`, then
/// rescales each row back to its own previous weight.
pub fn apply_rep_penalty(grid: &ProbGrid, rows: &[usize], context: &[bool], rho: f64) -> ProbGrid {
    let mut out = grid.clone();
    for &i in rows {
        let row = out.row_mut(i);
        let before: f64 = row.iter().sum();
        for (x, &hit) in row.iter_mut().zip(context) {
            if hit {
                *x *= rho;
            }
        }
        let after: f64 = row.iter().sum();
        if after > 0.0 {
            let f = before / after;
            row.iter_mut().for_each(|x| *x *= f);
        }
    }
    out
}
