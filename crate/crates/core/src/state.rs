//! Decoding windows, per-position distributions, and the absorbing
//! forward process.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Slot {
    Masked,
    Token(TokenId),
}

impl Slot {
    pub fn token(self) -> Option<TokenId> {
        match self {
            Slot::Token(t) => Some(t),
            Slot::Masked => None,
        }
    }

    pub fn is_masked(self) -> bool {
        matches!(self, Slot::Masked)
    }
}

/// A fixed-length window of slots. Prompt spans are half-open ranges of
/// given context; a span may sit at the right edge for bidirectional runs.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceState {
    slots: Vec<Slot>,
    prompt_spans: Vec<(usize, usize)>,
    pub step_clock: usize,
}

impl SequenceState {
    pub fn masked(len: usize) -> Self {
        Self {
            slots: vec![Slot::Masked; len],
            prompt_spans: Vec::new(),
            step_clock: 0,
        }
    }

    /// A window of `len` slots with `left` at the start and `right` at the
    /// end, everything in between masked.
    pub fn with_prompts(left: &[TokenId], right: &[TokenId], len: usize) -> Result<Self> {
        if left.len() + right.len() > len {
            return Err(Error::state(format!(
                "prompts of length {} + {} do not fit a window of {len}",
                left.len(),
                right.len()
            )));
        }
        let mut s = Self::masked(len);
        for (i, &t) in left.iter().enumerate() {
            s.slots[i] = Slot::Token(t);
        }
        let start = len - right.len();
        for (i, &t) in right.iter().enumerate() {
            s.slots[start + i] = Slot::Token(t);
        }
        if !left.is_empty() {
            s.prompt_spans.push((0, left.len()));
        }
        if !right.is_empty() {
            s.prompt_spans.push((start, len));
        }
        Ok(s)
    }

    /// A fully tokenized window whose first `prompt_len` slots are prompt.
    pub fn from_tokens(tokens: &[TokenId], prompt_len: usize) -> Result<Self> {
        if prompt_len > tokens.len() {
            return Err(Error::state("prompt longer than window"));
        }
        let mut s = Self {
            slots: tokens.iter().map(|&t| Slot::Token(t)).collect(),
            prompt_spans: Vec::new(),
            step_clock: 0,
        };
        if prompt_len > 0 {
            s.prompt_spans.push((0, prompt_len));
        }
        Ok(s)
    }

    /// Builds a state from raw slots and spans, checking that every prompt
    /// position holds a token.
    pub fn from_parts(slots: Vec<Slot>, prompt_spans: Vec<(usize, usize)>) -> Result<Self> {
        for &(a, b) in &prompt_spans {
            if a >= b || b > slots.len() {
                return Err(Error::state(format!("bad prompt span ({a}, {b})")));
            }
            if slots[a..b].iter().any(|s| s.is_masked()) {
                return Err(Error::state(format!("prompt span ({a}, {b}) contains a mask")));
            }
        }
        Ok(Self {
            slots,
            prompt_spans,
            step_clock: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn slots(&self) -> &[Slot] {
        &self.slots
    }

    pub fn slot(&self, i: usize) -> Slot {
        self.slots[i]
    }

    pub fn prompt_spans(&self) -> &[(usize, usize)] {
        &self.prompt_spans
    }

    pub fn is_prompt(&self, i: usize) -> bool {
        self.prompt_spans.iter().any(|&(a, b)| (a..b).contains(&i))
    }

    /// Tokens of the span starting at position 0, if any.
    pub fn left_prompt(&self) -> &[Slot] {
        match self.prompt_spans.iter().find(|&&(a, _)| a == 0) {
            Some(&(_, b)) => &self.slots[..b],
            None => &[],
        }
    }

    pub fn left_prompt_len(&self) -> usize {
        self.left_prompt().len()
    }

    pub fn prompt_tokens(&self) -> Vec<TokenId> {
        self.prompt_spans
            .iter()
            .flat_map(|&(a, b)| self.slots[a..b].iter().filter_map(|s| s.token()))
            .collect()
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.slots[i].is_masked()
    }

    pub fn masked_positions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_masked(i)).collect()
    }

    pub fn masked_count(&self) -> usize {
        self.slots.iter().filter(|s| s.is_masked()).count()
    }

    pub fn unmasked_count(&self) -> usize {
        self.len() - self.masked_count()
    }

    /// Commits a token into a masked slot. Committed slots are final.
    pub fn unmask(&mut self, i: usize, tok: TokenId) -> Result<()> {
        match self.slots.get(i) {
            Some(Slot::Masked) => {
                self.slots[i] = Slot::Token(tok);
                Ok(())
            }
            Some(Slot::Token(t)) => Err(Error::state(format!("position {i} already holds token {t}"))),
            None => Err(Error::state(format!("position {i} outside window"))),
        }
    }

    /// Masks a non-prompt position. Only the forward process and pair
    /// construction use this; decoding never re-masks.
    pub fn remask(&mut self, i: usize) -> Result<()> {
        if self.is_prompt(i) {
            return Err(Error::state(format!("position {i} is prompt")));
        }
        self.slots[i] = Slot::Masked;
        Ok(())
    }

    /// Truncates the window to its first `len` slots, clipping prompt spans.
    pub fn truncated(&self, len: usize) -> Self {
        let len = len.min(self.len());
        Self {
            slots: self.slots[..len].to_vec(),
            prompt_spans: self
                .prompt_spans
                .iter()
                .filter(|&&(a, _)| a < len)
                .map(|&(a, b)| (a, b.min(len)))
                .collect(),
            step_clock: self.step_clock,
        }
    }

    pub fn tokens(&self) -> Option<Vec<TokenId>> {
        self.slots.iter().map(|s| s.token()).collect()
    }
}

/// An L x V table of per-position weights. Freshly predicted rows are
/// distributions; after reweighting rows need not sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbGrid {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl ProbGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::state("ragged probability grid"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row_sum(&self, i: usize) -> f64 {
        self.row(i).iter().sum()
    }

    /// Sum of row masses over the given positions.
    pub fn mass(&self, positions: &[usize]) -> f64 {
        positions.iter().map(|&i| self.row_sum(i)).sum()
    }
}

/// Absorbing forward process: every non-prompt position of a clean window
/// is independently replaced by MASK with probability `1 - alpha_t`.
pub fn forward_mask<R: Rng + ?Sized>(
    x0: &SequenceState,
    schedule: &NoiseSchedule,
    t: f64,
    rng: &mut R,
) -> Result<SequenceState> {
    if x0.masked_count() > 0 {
        return Err(Error::state("forward process expects a fully tokenized window"));
    }
    let keep = schedule.alpha(t)?;
    let mut out = x0.clone();
    for i in 0..out.len() {
        if out.is_prompt(i) {
            continue;
        }
        if rng.gen::<f64>() >= keep {
            out.slots[i] = Slot::Masked;
        }
    }
    Ok(out)
}
