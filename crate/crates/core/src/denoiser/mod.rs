//! Per-position predictors `x_theta(x_t)`.
//!
//! [`DenoiserParams`] is a linear association model: the logit of token `v`
//! at position `i` is `bias[v]` plus, for every unmasked neighbour `j` within
//! radius `R`, `assoc[token_j, v] * kappa(|i - j|)` with `kappa(d) = 1/(1+d)`.
//! It has no time input. [`OracleDenoiser`] returns exact posteriors under a
//! corpus model.

mod io;
mod oracle;
mod train;

pub use io::{load_params, read_params, save_params, write_params, PARAMS_VERSION};
pub use oracle::OracleDenoiser;
pub use train::{grad_nelbo, nelbo_loss, train_sft, EosMode, TrainConfig, TrainItem, TrainRecord, TrainReport};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::{ProbGrid, SequenceState, Slot};
use crate::vocab::TokenId;

/// Anything that maps a window to per-position distributions over the
/// prediction support.
pub trait Denoiser: Sync {
    fn support_size(&self) -> usize;

    fn predict(&self, state: &SequenceState) -> Result<ProbGrid>;

    /// Rows at `positions`; other rows may be left at zero.
    fn predict_positions(&self, state: &SequenceState, positions: &[usize]) -> Result<ProbGrid> {
        let _ = positions;
        self.predict(state)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Inverse,
}

impl Kernel {
    pub fn weight(self, d: usize) -> f64 {
        match self {
            Kernel::Inverse => 1.0 / (1.0 + d as f64),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Kernel::Inverse => "inverse",
        }
    }
}

pub const DEFAULT_RADIUS: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    v: usize,
    pub bias: Vec<f64>,
    /// Row-major `V x V`: `assoc[src * V + dst]`.
    pub assoc: Vec<f64>,
    pub kernel: Kernel,
    pub radius: usize,
}

/// A gradient with the same layout as [`DenoiserParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub bias: Vec<f64>,
    pub assoc: Vec<f64>,
}

impl Gradient {
    pub fn zeros(v: usize) -> Self {
        Self {
            bias: vec![0.0; v],
            assoc: vec![0.0; v * v],
        }
    }

    pub fn add_scaled(&mut self, other: &Gradient, s: f64) {
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += s * b;
        }
        for (a, b) in self.assoc.iter_mut().zip(&other.assoc) {
            *a += s * b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.bias.iter_mut().chain(self.assoc.iter_mut()).for_each(|x| *x *= s);
    }

    pub fn dot(&self, other: &Gradient) -> f64 {
        self.bias
            .iter()
            .zip(&other.bias)
            .chain(self.assoc.iter().zip(&other.assoc))
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs_diff(&self, other: &Gradient) -> f64 {
        self.bias
            .iter()
            .zip(&other.bias)
            .chain(self.assoc.iter().zip(&other.assoc))
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Flat view: bias entries, then assoc entries.
    pub fn get(&self, idx: usize) -> f64 {
        if idx < self.bias.len() {
            self.bias[idx]
        } else {
            self.assoc[idx - self.bias.len()]
        }
    }

    pub fn len(&self) -> usize {
        self.bias.len() + self.assoc.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in row.iter_mut() {
        *x /= z;
    }
}

impl DenoiserParams {
    pub fn zeros(v: usize, radius: usize) -> Result<Self> {
        if v == 0 {
            return Err(Error::config("denoiser needs a nonempty support"));
        }
        Ok(Self {
            v,
            bias: vec![0.0; v],
            assoc: vec![0.0; v * v],
            kernel: Kernel::Inverse,
            radius,
        })
    }

    /// Small random parameters, entries uniform in `[-scale, scale]`.
    pub fn random<R: Rng + ?Sized>(v: usize, radius: usize, scale: f64, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(v, radius)?;
        for x in p.bias.iter_mut().chain(p.assoc.iter_mut()) {
            *x = rng.gen_range(-scale..=scale);
        }
        Ok(p)
    }

    pub fn from_parts(bias: Vec<f64>, assoc: Vec<f64>, kernel: Kernel, radius: usize) -> Result<Self> {
        let v = bias.len();
        if v == 0 || assoc.len() != v * v {
            return Err(Error::config(format!(
                "assoc has {} entries, expected {}",
                assoc.len(),
                v * v
            )));
        }
        if bias.iter().chain(&assoc).any(|x| !x.is_finite()) {
            return Err(Error::config("non-finite parameter"));
        }
        Ok(Self {
            v,
            bias,
            assoc,
            kernel,
            radius,
        })
    }

    pub fn v(&self) -> usize {
        self.v
    }

    pub fn assoc_row(&self, src: TokenId) -> &[f64] {
        let s = src as usize * self.v;
        &self.assoc[s..s + self.v]
    }

    pub fn assoc_at(&self, src: TokenId, dst: TokenId) -> f64 {
        self.assoc[src as usize * self.v + dst as usize]
    }

    pub fn apply(&mut self, grad: &Gradient, lr: f64) {
        for (p, g) in self.bias.iter_mut().zip(&grad.bias) {
            *p -= lr * g;
        }
        for (p, g) in self.assoc.iter_mut().zip(&grad.assoc) {
            *p -= lr * g;
        }
    }

    /// Mutable access by flat index (bias entries, then assoc entries).
    pub fn param_mut(&mut self, idx: usize) -> &mut f64 {
        if idx < self.v {
            &mut self.bias[idx]
        } else {
            &mut self.assoc[idx - self.v]
        }
    }

    pub fn num_params(&self) -> usize {
        self.v + self.v * self.v
    }

    fn check_state(&self, state: &SequenceState) -> Result<()> {
        if state.unmasked_count() == 0 {
            return Err(Error::state("every position is masked; no context to predict from"));
        }
        if let Some(t) = state
            .slots()
            .iter()
            .filter_map(|s| s.token())
            .find(|&t| t as usize >= self.v)
        {
            return Err(Error::state(format!("token {t} outside the prediction support")));
        }
        Ok(())
    }

    /// Unmasked neighbours of `i` within the radius, with kernel weights.
    pub(crate) fn neighbours<'a>(
        &'a self,
        state: &'a SequenceState,
        i: usize,
    ) -> impl Iterator<Item = (TokenId, f64)> + 'a {
        let lo = i.saturating_sub(self.radius);
        let hi = (i + self.radius + 1).min(state.len());
        (lo..hi)
            .filter(move |&j| j != i)
            .filter_map(move |j| match state.slot(j) {
                Slot::Token(t) => Some((t, self.kernel.weight(i.abs_diff(j)))),
                Slot::Masked => None,
            })
    }

    /// Distribution at a single position.
    pub fn predict_row(&self, state: &SequenceState, i: usize) -> Vec<f64> {
        let mut row = self.bias.clone();
        for (t, w) in self.neighbours(state, i) {
            for (r, a) in row.iter_mut().zip(self.assoc_row(t)) {
                *r += w * a;
            }
        }
        softmax_in_place(&mut row);
        row
    }

    /// Rows at the given positions only; other rows are left at zero.
    pub fn predict_rows(&self, state: &SequenceState, positions: &[usize]) -> Result<ProbGrid> {
        self.check_state(state)?;
        let mut grid = ProbGrid::zeros(state.len(), self.v);
        for &i in positions {
            let row = self.predict_row(state, i);
            grid.row_mut(i).copy_from_slice(&row);
        }
        Ok(grid)
    }

    /// Adds `scale * d/dtheta sum_k log p_{i_k}[y_k]` to `grad`, given the
    /// rows `grid` predicted for `state`.
    pub fn accumulate_logprob_grad(
        &self,
        state: &SequenceState,
        grid: &ProbGrid,
        targets: &[(usize, TokenId)],
        scale: f64,
        grad: &mut Gradient,
    ) {
        let v = self.v;
        let mut resid = vec![0.0; v];
        for &(i, y) in targets {
            // d log p_i[y] / d logit_i = e_y - p_i
            for (r, p) in resid.iter_mut().zip(grid.row(i)) {
                *r = -scale * p;
            }
            resid[y as usize] += scale;
            for (g, r) in grad.bias.iter_mut().zip(&resid) {
                *g += r;
            }
            for (t, w) in self.neighbours(state, i) {
                let row = &mut grad.assoc[t as usize * v..(t as usize + 1) * v];
                for (g, r) in row.iter_mut().zip(&resid) {
                    *g += w * r;
                }
            }
        }
    }
}

impl Denoiser for DenoiserParams {
    fn support_size(&self) -> usize {
        self.v
    }

    fn predict(&self, state: &SequenceState) -> Result<ProbGrid> {
        let all: Vec<usize> = (0..state.len()).collect();
        self.predict_rows(state, &all)
    }

    fn predict_positions(&self, state: &SequenceState, positions: &[usize]) -> Result<ProbGrid> {
        self.predict_rows(state, positions)
    }
}

/// A denoiser that ignores context and returns the same rows everywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct FixedDenoiser {
    pub row: Vec<f64>,
}

impl Denoiser for FixedDenoiser {
    fn support_size(&self) -> usize {
        self.row.len()
    }

    fn predict(&self, state: &SequenceState) -> Result<ProbGrid> {
        let mut g = ProbGrid::zeros(state.len(), self.row.len());
        for i in 0..state.len() {
            g.row_mut(i).copy_from_slice(&self.row);
        }
        Ok(g)
    }
}
