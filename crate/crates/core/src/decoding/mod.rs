//! Reverse-process decoding as reweight-then-sample.
//!
//! Each step takes a grid from the denoiser (or the cache), restricts it to
//! the masked rows of the active block, applies the enabled modifiers in the
//! fixed order repetition penalty, top-k, conv, samples with the base rule,
//! and finally applies EOS-fill.

mod modifiers;
mod trace;

pub use modifiers::{apply_conv, apply_rep_penalty, apply_topk_glob, neighbour_count, total_mass, ConvConfig, ConvFn};
pub use trace::{EventKind, TraceEvent, TraceLog};

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::schedule::NoiseSchedule;
use crate::state::{ProbGrid, SequenceState, Slot};
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseSampler {
    Categorical,
    TopKGlob { k: usize },
    Llada,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    LeftContext,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePolicy {
    pub base: BaseSampler,
    pub conv: Option<ConvConfig>,
    /// Number of semi-autoregressive blocks.
    pub semi_ar: Option<usize>,
    pub eos_fill: bool,
    pub cache: bool,
    /// Repetition penalty factor `rho`.
    pub rep_penalty: Option<f64>,
    pub direction: Direction,
}

impl Default for DecodePolicy {
    fn default() -> Self {
        Self::categorical()
    }
}

impl DecodePolicy {
    pub fn categorical() -> Self {
        Self {
            base: BaseSampler::Categorical,
            conv: None,
            semi_ar: None,
            eos_fill: false,
            cache: false,
            rep_penalty: None,
            direction: Direction::LeftContext,
        }
    }

    pub fn with_base(mut self, base: BaseSampler) -> Self {
        self.base = base;
        self
    }

    pub fn with_conv(mut self, conv: ConvConfig) -> Self {
        self.conv = Some(conv);
        self
    }

    pub fn with_semi_ar(mut self, blocks: usize) -> Self {
        self.semi_ar = Some(blocks);
        self
    }

    pub fn with_eos_fill(mut self, on: bool) -> Self {
        self.eos_fill = on;
        self
    }

    pub fn with_cache(mut self, on: bool) -> Self {
        self.cache = on;
        self
    }

    pub fn with_rep_penalty(mut self, rho: f64) -> Self {
        self.rep_penalty = Some(rho);
        self
    }

    pub fn with_direction(mut self, d: Direction) -> Self {
        self.direction = d;
        self
    }

    pub fn blocks(&self) -> usize {
        self.semi_ar.unwrap_or(1)
    }

    /// Checks the policy against a window of `len` slots, `steps` steps and
    /// a support of `v` tokens.
    pub fn validate(&self, len: usize, steps: usize, v: usize) -> Result<()> {
        if steps == 0 || len == 0 {
            return Err(Error::config("window length and step count must be positive"));
        }
        if self.conv.is_some() && self.semi_ar.is_some() {
            return Err(Error::config("conv and semi_ar are mutually exclusive"));
        }
        if self.eos_fill && self.direction != Direction::LeftContext {
            return Err(Error::config("eos_fill requires left-context decoding"));
        }
        if let BaseSampler::TopKGlob { k } = self.base {
            if k == 0 || k > v {
                return Err(Error::config(format!("top-k needs 1 <= k <= {v}, got {k}")));
            }
        }
        if let Some(b) = self.semi_ar {
            if b == 0 || len % b != 0 || steps % b != 0 {
                return Err(Error::config(format!(
                    "block count {b} must divide both L = {len} and S = {steps}"
                )));
            }
        }
        if let Some(c) = &self.conv {
            if c.kernel < 2 || c.kernel % 2 != 0 {
                return Err(Error::config(format!("conv kernel {} must be even and >= 2", c.kernel)));
            }
            if !(c.scale > 0.0 && c.scale.is_finite()) {
                return Err(Error::config("conv scale must be positive"));
            }
        }
        if let Some(rho) = self.rep_penalty {
            if !(rho > 0.0 && rho < 1.0) {
                return Err(Error::config(format!("repetition penalty {rho} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Position range and global step range of every block.
    pub fn block_plan(&self, len: usize, steps: usize) -> Vec<(Range<usize>, Range<usize>)> {
        let b = self.blocks();
        let (lb, sb) = (len / b, steps / b);
        (0..b).map(|m| (m * lb..(m + 1) * lb, m * sb..(m + 1) * sb)).collect()
    }
}

/// LLADA per-step quotas for a block holding `masked` masks over `steps`
/// steps: `floor(masked / steps)` each, with the remainder spread one apiece
/// over the first steps.
pub fn llada_quotas(masked: usize, steps: usize) -> Vec<usize> {
    let (base, rem) = (masked / steps, masked % steps);
    (0..steps).map(|k| base + usize::from(k < rem)).collect()
}

/// One step of the categorical rule: every row in `rows` (all masked)
/// unmasks with probability `min(1, mult * row weight)`, drawing its token
/// in proportion to the row. With `mult >= 1` every row of positive weight
/// unmasks. Returns the events and how many rows clamped.
pub fn step_categorical<R: Rng + ?Sized>(
    state: &mut SequenceState,
    weights: &ProbGrid,
    rows: &[usize],
    mult: f64,
    step: usize,
    rng: &mut R,
) -> Result<(Vec<TraceEvent>, usize)> {
    let mut events = Vec::new();
    let mut clamped = 0;
    for &i in rows {
        if !state.is_masked(i) {
            continue;
        }
        let row = weights.row(i);
        let mass: f64 = row.iter().sum();
        let mut p = mult * mass;
        if p > 1.0 {
            p = 1.0;
            clamped += 1;
        }
        // The last step of a schedule (multiplier 1) reaches t = 0: every
        // row that carries weight unmasks, whatever reweighting did to it.
        if mult >= 1.0 && mass > 0.0 {
            p = 1.0;
        }
        if rng.gen::<f64>() >= p || mass <= 0.0 {
            continue;
        }
        let target = rng.gen::<f64>() * mass;
        let mut acc = 0.0;
        let mut tok = None;
        for (j, &w) in row.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            acc += w;
            tok = Some(j);
            if target < acc {
                break;
            }
        }
        let tok = tok.expect("positive row mass") as TokenId;
        state.unmask(i, tok)?;
        events.push(TraceEvent {
            step,
            position: i,
            token: tok,
            kind: EventKind::Sampled,
        });
    }
    Ok((events, clamped))
}

/// Confidence-ordered step: the `s` rows with the highest maximum weight
/// (ties to the lower position) unmask to their argmax token (ties to the
/// lower id). Rows with zero weight are never chosen.
pub fn step_llada(
    state: &mut SequenceState,
    weights: &ProbGrid,
    rows: &[usize],
    s: usize,
    step: usize,
) -> Result<Vec<TraceEvent>> {
    let mut scored: Vec<(usize, f64, usize)> = rows
        .iter()
        .filter(|&&i| state.is_masked(i))
        .filter_map(|&i| {
            let row = weights.row(i);
            let (arg, &best) = row
                .iter()
                .enumerate()
                .fold((0, &row[0]), |acc, (j, w)| if *w > *acc.1 { (j, w) } else { acc });
            (best > 0.0).then_some((i, best, arg))
        })
        .collect();
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut events = Vec::new();
    for &(i, _, tok) in scored.iter().take(s) {
        state.unmask(i, tok as TokenId)?;
        events.push(TraceEvent {
            step,
            position: i,
            token: tok as TokenId,
            kind: EventKind::Sampled,
        });
    }
    events.sort_by_key(|e| e.position);
    Ok(events)
}

/// Fills every masked slot right of the leftmost EOS with EOS and returns
/// the filled positions. Committed tokens are never changed.
pub fn apply_eos_fill(state: &mut SequenceState, eos: TokenId) -> Vec<usize> {
    let Some(first) = state.slots().iter().position(|s| *s == Slot::Token(eos)) else {
        return Vec::new();
    };
    let mut filled = Vec::new();
    for i in first + 1..state.len() {
        if state.is_masked(i) {
            state.unmask(i, eos).expect("masked slot");
            filled.push(i);
        }
    }
    filled
}

/// Prompt spans: `left` sits at the start of the window, `right` at the end.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Prompts {
    pub left: Vec<TokenId>,
    #[serde(default)]
    pub right: Vec<TokenId>,
}

impl Prompts {
    pub fn left(tokens: &[TokenId]) -> Self {
        Self {
            left: tokens.to_vec(),
            right: Vec::new(),
        }
    }
}

/// Decodes a fresh window of `len` slots around `prompts` in `steps` steps.
pub fn decode<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    prompts: &Prompts,
    policy: &DecodePolicy,
    len: usize,
    steps: usize,
    rng: &mut R,
) -> Result<(SequenceState, TraceLog)> {
    policy.validate(len, steps, denoiser.support_size())?;
    if policy.direction == Direction::LeftContext && !prompts.right.is_empty() {
        return Err(Error::config("a right-side prompt needs bidirectional decoding"));
    }
    let state = SequenceState::with_prompts(&prompts.left, &prompts.right, len)?;
    decode_state(denoiser, state, policy, steps, rng)
}

/// Token flags for the repetition penalty: every committed non-EOS token.
fn context_flags(state: &SequenceState, v: usize, eos: TokenId) -> Vec<bool> {
    let mut flags = vec![false; v];
    for t in state.slots().iter().filter_map(|s| s.token()) {
        if t != eos && (t as usize) < v {
            flags[t as usize] = true;
        }
    }
    flags
}

/// Applies the enabled modifiers to the active rows, in the fixed order
/// repetition penalty, top-k, conv.
pub fn reweight(
    policy: &DecodePolicy,
    grid: &ProbGrid,
    state: &SequenceState,
    rows: &[usize],
    eos: TokenId,
) -> ProbGrid {
    let mut w = grid.clone();
    if let Some(rho) = policy.rep_penalty {
        let flags = context_flags(state, grid.cols(), eos);
        w = apply_rep_penalty(&w, rows, &flags, rho);
    }
    if let BaseSampler::TopKGlob { k } = policy.base {
        w = apply_topk_glob(&w, rows, k);
    }
    if let Some(conv) = &policy.conv {
        w = apply_conv(&w, state, rows, conv);
    }
    w
}

/// Decodes starting from an arbitrary window.
pub fn decode_state<D: Denoiser + ?Sized, R: Rng + ?Sized>(
    denoiser: &D,
    mut state: SequenceState,
    policy: &DecodePolicy,
    steps: usize,
    rng: &mut R,
) -> Result<(SequenceState, TraceLog)> {
    let len = state.len();
    let v = denoiser.support_size();
    policy.validate(len, steps, v)?;
    if policy.eos_fill && state.prompt_spans().iter().any(|&(a, _)| a != 0) {
        return Err(Error::config("eos_fill requires a left prompt only"));
    }
    let eos = (v - 1) as TokenId;
    let plan = policy.block_plan(len, steps);
    let sb = steps / policy.blocks();
    let schedule = NoiseSchedule::linear(sb)?;

    let mut events = Vec::new();
    let mut calls = Vec::with_capacity(steps);
    let mut clamped = 0;
    let mut cached: Option<ProbGrid> = None;
    let mut dirty = true;
    for (positions, step_range) in plan {
        let block_masked = positions.clone().filter(|&i| state.is_masked(i)).count();
        let quotas = llada_quotas(block_masked, sb);
        for (k, step) in step_range.enumerate() {
            state.step_clock = step;
            let rows: Vec<usize> = positions.clone().filter(|&i| state.is_masked(i)).collect();
            if rows.is_empty() {
                calls.push(false);
                continue;
            }
            let grid = match (&cached, policy.cache && !dirty) {
                (Some(g), true) => {
                    calls.push(false);
                    g.clone()
                }
                _ => {
                    calls.push(true);
                    let g = denoiser.predict(&state)?;
                    if policy.cache {
                        cached = Some(g.clone());
                    }
                    dirty = false;
                    g
                }
            };
            let weights = reweight(policy, &grid, &state, &rows, eos);
            let mut step_events = match policy.base {
                BaseSampler::Llada => step_llada(&mut state, &weights, &rows, quotas[k], step)?,
                _ => {
                    let mult = schedule.unmask_multiplier(schedule.time_at_step(k))?;
                    let (ev, c) = step_categorical(&mut state, &weights, &rows, mult, step, rng)?;
                    clamped += c;
                    ev
                }
            };
            if policy.eos_fill {
                step_events.extend(apply_eos_fill(&mut state, eos).into_iter().map(|position| TraceEvent {
                    step,
                    position,
                    token: eos,
                    kind: EventKind::Filled,
                }));
            }
            if !step_events.is_empty() {
                dirty = true;
            }
            events.extend(step_events);
        }
    }
    state.step_clock = steps;
    let trace = TraceLog {
        events,
        calls,
        final_state: state.clone(),
        clamped,
    };
    Ok((state, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::FixedDenoiser;
    use crate::rng::rng_from_seed;
    use approx::assert_relative_eq;

    fn uniform(v: usize) -> FixedDenoiser {
        FixedDenoiser {
            row: vec![1.0 / v as f64; v],
        }
    }

    #[test]
    fn final_step_unmasks_everything() {
        let s = NoiseSchedule::linear(8).unwrap();
        let mut state = SequenceState::with_prompts(&[0], &[], 10).unwrap();
        let grid = uniform(3).predict(&state).unwrap();
        let rows = state.masked_positions();
        let mult = s.unmask_multiplier(s.dt()).unwrap();
        let (ev, _) = step_categorical(&mut state, &grid, &rows, mult, 7, &mut rng_from_seed(1)).unwrap();
        assert_eq!(ev.len(), 9);
        assert_eq!(state.masked_count(), 0);
    }

    #[test]
    fn categorical_unmask_frequency() {
        let mult = 0.3;
        let mut rng = rng_from_seed(5);
        let mut hits = 0;
        let trials = 10_000;
        let base = SequenceState::with_prompts(&[0], &[], 2).unwrap();
        let grid = uniform(4).predict(&base).unwrap();
        for _ in 0..trials {
            let mut s = base.clone();
            let (ev, _) = step_categorical(&mut s, &grid, &[1], mult, 0, &mut rng).unwrap();
            hits += ev.len();
        }
        assert!((hits as f64 / trials as f64 - mult).abs() < 0.02);
    }

    #[test]
    fn categorical_carries_unmasked_over() {
        let mut s = SequenceState::with_prompts(&[0, 1], &[], 4).unwrap();
        s.unmask(2, 2).unwrap();
        let grid = uniform(4).predict(&s).unwrap();
        let mut rng = rng_from_seed(2);
        for _ in 0..100 {
            let mut c = s.clone();
            step_categorical(&mut c, &grid, &[3], 1.0, 0, &mut rng).unwrap();
            assert_eq!(c.slot(2), Slot::Token(2));
            assert_eq!(&c.slots()[..2], &s.slots()[..2]);
        }
    }

    #[test]
    fn llada_quota_rule() {
        assert_eq!(llada_quotas(1024, 128), vec![8; 128]);
        assert_eq!(llada_quotas(10, 4), vec![3, 3, 2, 2]);
        assert_eq!(llada_quotas(3, 5), vec![1, 1, 1, 0, 0]);
    }

    #[test]
    fn llada_takes_remaining_when_few() {
        let mut s = SequenceState::with_prompts(&[0], &[], 4).unwrap();
        let grid = uniform(3).predict(&s).unwrap();
        let ev = step_llada(&mut s, &grid, &[1, 2, 3], 8, 0).unwrap();
        assert_eq!(ev.len(), 3);
    }

    #[test]
    fn llada_matches_sort_oracle() {
        let grid = ProbGrid::from_rows(&[
            vec![0.2, 0.5, 0.3],
            vec![0.6, 0.2, 0.2],
            vec![0.1, 0.1, 0.8],
            vec![0.6, 0.3, 0.1],
        ])
        .unwrap();
        let mut s = SequenceState::masked(4);
        let ev = step_llada(&mut s, &grid, &[0, 1, 2, 3], 2, 0).unwrap();
        // confidences 0.5, 0.6, 0.8, 0.6 -> positions 2 then 1 (tie with 3)
        let got: Vec<(usize, TokenId)> = ev.iter().map(|e| (e.position, e.token)).collect();
        assert_eq!(got, vec![(1, 0), (2, 2)]);
    }

    #[test]
    fn eos_fill_cases() {
        let eos = 5;
        let mut s = SequenceState::from_parts(
            vec![
                Slot::Token(0),
                Slot::Token(1),
                Slot::Token(eos),
                Slot::Masked,
                Slot::Masked,
            ],
            vec![],
        )
        .unwrap();
        assert_eq!(apply_eos_fill(&mut s, eos), vec![3, 4]);
        assert!(s.slots().iter().skip(2).all(|&x| x == Slot::Token(eos)));
        assert!(apply_eos_fill(&mut s, eos).is_empty());
        let mut none = SequenceState::with_prompts(&[0], &[], 3).unwrap();
        assert!(apply_eos_fill(&mut none, eos).is_empty());
        let mut last = SequenceState::from_parts(vec![Slot::Token(0), Slot::Token(eos)], vec![]).unwrap();
        assert!(apply_eos_fill(&mut last, eos).is_empty());
    }

    #[test]
    fn policy_validation() {
        let p = DecodePolicy::categorical()
            .with_conv(ConvConfig::new(4))
            .with_semi_ar(2);
        assert!(p.validate(16, 8, 5).is_err());
        let p = DecodePolicy::categorical()
            .with_eos_fill(true)
            .with_direction(Direction::Bidirectional);
        assert!(p.validate(16, 8, 5).is_err());
        assert!(DecodePolicy::categorical().with_semi_ar(3).validate(16, 8, 5).is_err());
        assert!(DecodePolicy::categorical()
            .with_base(BaseSampler::TopKGlob { k: 0 })
            .validate(16, 8, 5)
            .is_err());
        assert!(DecodePolicy::categorical()
            .with_conv(ConvConfig::new(3))
            .validate(16, 8, 5)
            .is_err());
        assert!(DecodePolicy::categorical()
            .with_rep_penalty(1.0)
            .validate(16, 8, 5)
            .is_err());
        assert!(DecodePolicy::categorical()
            .with_base(BaseSampler::Llada)
            .with_semi_ar(4)
            .validate(16, 8, 5)
            .is_ok());
    }

    #[test]
    fn decode_completes_and_replays() {
        let d = uniform(6);
        let mut rng = rng_from_seed(11);
        for policy in [
            DecodePolicy::categorical(),
            DecodePolicy::categorical().with_semi_ar(4),
            DecodePolicy::categorical().with_base(BaseSampler::TopKGlob { k: 2 }),
            DecodePolicy::categorical()
                .with_base(BaseSampler::Llada)
                .with_semi_ar(2),
            DecodePolicy::categorical().with_eos_fill(true).with_cache(true),
        ] {
            let (s, trace) = decode(&d, &Prompts::left(&[0, 1]), &policy, 32, 8, &mut rng).unwrap();
            assert_eq!(s.masked_count(), 0, "{policy:?}");
            let init = trace.initial_state().unwrap();
            assert_eq!(trace.replay(&init).unwrap().slots(), s.slots());
            assert_eq!(trace.steps(), 8);
        }
    }

    #[test]
    fn caching_skips_calls_after_idle_steps() {
        let d = uniform(4);
        let policy = DecodePolicy::categorical().with_cache(true);
        let mut rng = rng_from_seed(4);
        let (_, trace) = decode(&d, &Prompts::left(&[0]), &policy, 4, 64, &mut rng).unwrap();
        let mut masked = 3;
        let mut expected = Vec::new();
        for s in 0..64 {
            let fresh = s == 0 || trace.events_at(s - 1).next().is_some();
            expected.push(masked > 0 && fresh);
            masked -= trace.events_at(s).count();
        }
        assert_eq!(trace.calls, expected);
        assert!(trace.denoiser_calls() < 64);
    }

    #[test]
    fn trace_csv_round_trip() {
        let d = uniform(5);
        let policy = DecodePolicy::categorical().with_eos_fill(true).with_cache(true);
        let (_, trace) = decode(&d, &Prompts::left(&[0]), &policy, 24, 6, &mut rng_from_seed(3)).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let init = trace.initial_state().unwrap();
        let back = TraceLog::read_csv(&buf[..], &init).unwrap();
        assert_eq!(back.events, trace.events);
        assert_eq!(back.calls, trace.calls);
        assert_eq!(back.final_state.slots(), trace.final_state.slots());
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("step,position,token,denoiser_call\n"));
    }

    #[test]
    fn modifier_order_matters() {
        // penalty then top-k keeps token 1; top-k then penalty keeps token 0
        let grid = ProbGrid::from_rows(&[vec![0.5, 0.4, 0.1]]).unwrap();
        let flags = [true, false, false];
        let a = apply_topk_glob(&apply_rep_penalty(&grid, &[0], &flags, 0.5), &[0], 1);
        let b = apply_rep_penalty(&apply_topk_glob(&grid, &[0], 1), &[0], &flags, 0.5);
        assert!(a.get(0, 1) > 0.0 && a.get(0, 0) == 0.0);
        assert!(b.get(0, 0) > 0.0 && b.get(0, 1) == 0.0);
        assert_relative_eq!(a.row_sum(0), 1.0, epsilon = 1e-12);
    }
}
