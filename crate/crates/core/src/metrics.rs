//! Diagnostics: candidate-zone masses, mean log prior, inlier rate, speed
//! accounting and trace auditing.

use std::collections::HashSet;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::corpus::PriorTable;
use crate::decoding::{llada_quotas, neighbour_count, BaseSampler, DecodePolicy, EventKind, TraceLog};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::state::{SequenceState, Slot};
use crate::vocab::{TokenId, VocabSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZoneRecord {
    /// Offset from the end of the prompt; 0 is the first masked slot.
    pub distance: usize,
    pub high_prior_mass: f64,
    pub repetition_mass: f64,
    /// Top candidates, by descending probability.
    pub top: Vec<(TokenId, f64)>,
}

impl ZoneRecord {
    /// High-prior plus repetition mass; tokens in both classes count twice.
    pub fn combined(&self) -> f64 {
        self.high_prior_mass + self.repetition_mass
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CandidateZoneReport {
    pub records: Vec<ZoneRecord>,
}

impl CandidateZoneReport {
    /// Mean combined mass over distances in `range`.
    pub fn mean_combined(&self, range: std::ops::RangeInclusive<usize>) -> f64 {
        let vals: Vec<f64> = self
            .records
            .iter()
            .filter(|r| range.contains(&r.distance))
            .map(ZoneRecord::combined)
            .collect();
        vals.iter().sum::<f64>() / vals.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["distance", "high_prior_mass", "repetition_mass", "top_tokens"])
            .map_err(csv_err)?;
        for r in &self.records {
            let top: Vec<String> = r.top.iter().map(|(t, p)| format!("{t}:{p:.6}")).collect();
            out.write_record([
                r.distance.to_string(),
                r.high_prior_mass.to_string(),
                r.repetition_mass.to_string(),
                top.join(" "),
            ])
            .map_err(csv_err)?;
        }
        out.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

/// One denoiser call on `prompt` followed by `window - |prompt|` masks.
/// Per distance: mass on the top-100 prior tokens, mass on tokens that occur
/// in the prompt, and the `k` most likely tokens.
pub fn candidate_zone(
    denoiser: &dyn Denoiser,
    prompt: &[TokenId],
    window: usize,
    prior: &PriorTable,
    k: usize,
) -> Result<CandidateZoneReport> {
    if prompt.is_empty() {
        return Err(Error::domain("candidate zone needs a nonempty prompt"));
    }
    let state = SequenceState::with_prompts(prompt, &[], window)?;
    let grid = denoiser.predict(&state)?;
    let v = grid.cols();
    let high = prior.high_prior_mask(v);
    let mut rep = vec![false; v];
    for &t in prompt {
        if let Some(f) = rep.get_mut(t as usize) {
            *f = true;
        }
    }
    let mut order: Vec<usize> = Vec::with_capacity(v);
    let records = (prompt.len()..window)
        .map(|i| {
            let row = grid.row(i);
            let sum_if = |mask: &[bool]| -> f64 { row.iter().zip(mask).filter(|(_, &m)| m).map(|(p, _)| p).sum() };
            order.clear();
            order.extend(0..v);
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            ZoneRecord {
                distance: i - prompt.len(),
                high_prior_mass: sum_if(&high).min(1.0),
                repetition_mass: sum_if(&rep).min(1.0),
                top: order.iter().take(k).map(|&j| (j as TokenId, row[j])).collect(),
            }
        })
        .collect();
    Ok(CandidateZoneReport { records })
}

/// Mean log prior over the content before the first EOS; PAD and masks are
/// skipped.
pub fn mean_log_prior(seq: &[TokenId], prior: &PriorTable, vocab: &VocabSpec) -> Result<f64> {
    let content: Vec<TokenId> = seq
        .iter()
        .copied()
        .take_while(|&t| t != vocab.eos())
        .filter(|&t| vocab.is_content(t))
        .collect();
    if content.is_empty() {
        return Err(Error::domain("no content before EOS"));
    }
    Ok(content.iter().map(|&t| prior.log_prior(t)).sum::<f64>() / content.len() as f64)
}

/// Committed tokens after the left prompt, up to the first EOS.
pub fn response_tokens(state: &SequenceState, eos: TokenId) -> Vec<TokenId> {
    state.slots()[state.left_prompt_len()..]
        .iter()
        .filter_map(|s| s.token())
        .take_while(|&t| t != eos)
        .collect()
}

/// A perplexity with the zero-length flag.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PplEntry {
    pub ppl: f64,
    pub zero_len: bool,
}

/// Fraction of entries with `ppl` in `[mu - 2 sigma, mu + 2 sigma]`;
/// zero-length entries are outliers.
pub fn inlier_rate(ppls: &[PplEntry], mu: f64, sigma: f64) -> Result<f64> {
    if ppls.is_empty() {
        return Err(Error::domain("inlier rate of an empty list"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::domain(format!("sigma {sigma} must be >= 0")));
    }
    let (lo, hi) = (mu - 2.0 * sigma, mu + 2.0 * sigma);
    let n = ppls
        .iter()
        .filter(|e| !e.zero_len && e.ppl >= lo && e.ppl <= hi)
        .count();
    Ok(n as f64 / ppls.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeedReport {
    /// Generated content tokens before the first EOS.
    pub l_star: usize,
    /// Denoiser calls actually made.
    pub s_star: usize,
    pub l_star_norm: f64,
    pub tokens_per_step: f64,
    /// Positions unmasked over the run divided by the scheduled steps.
    pub r_star: f64,
}

pub fn tokens_per_step(l_star_norm: f64, s_star: f64) -> f64 {
    l_star_norm / s_star
}

/// Speed figures of a finished decode with `steps` scheduled steps.
pub fn speed_report(trace: &TraceLog, steps: usize, l_star_norm: f64, eos: TokenId) -> Result<SpeedReport> {
    if steps == 0 {
        return Err(Error::domain("speed report needs a positive step count"));
    }
    let state = &trace.final_state;
    let start = state.left_prompt_len();
    let l_star = state.slots()[start..]
        .iter()
        .take_while(|s| **s != Slot::Token(eos))
        .filter(|s| !s.is_masked())
        .count();
    let s_star = trace.denoiser_calls();
    Ok(SpeedReport {
        l_star,
        s_star,
        l_star_norm,
        tokens_per_step: tokens_per_step(l_star_norm, s_star as f64),
        r_star: trace.events.len() as f64 / steps as f64,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    /// An event on a position that was not masked, or a second event on it.
    Absorbing,
    StepOrder,
    SemiArOrder,
    ConvLocality,
    LladaCount,
    EosFill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub step: usize,
    pub position: Option<usize>,
    pub detail: String,
}

/// Replays `trace` from `initial` step by step and checks it against the
/// structural rules of `policy` over `steps` steps. `eos` is the EOS id of
/// the denoiser support.
pub fn validate_trace(
    policy: &DecodePolicy,
    trace: &TraceLog,
    initial: &SequenceState,
    steps: usize,
    eos: TokenId,
) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, step, position, detail: String| {
        out.push(Violation {
            kind,
            step,
            position,
            detail,
        })
    };
    let len = initial.len();
    if steps == 0 || len % policy.blocks() != 0 || steps % policy.blocks() != 0 {
        push(
            ViolationKind::StepOrder,
            0,
            None,
            "schedule does not split into blocks".into(),
        );
        return out;
    }
    let plan = policy.block_plan(len, steps);
    let sb = steps / policy.blocks();
    let block_of_step = |s: usize| (s / sb).min(plan.len() - 1);
    let block_of_pos = |i: usize| plan.iter().position(|(p, _)| p.contains(&i));

    for w in trace.events.windows(2) {
        if w[1].step < w[0].step {
            push(
                ViolationKind::StepOrder,
                w[1].step,
                Some(w[1].position),
                "events out of step order".into(),
            );
        }
    }

    let mut state = initial.clone();
    let mut seen = HashSet::new();
    let mut quotas: Vec<usize> = Vec::new();
    for step in 0..steps {
        let m = block_of_step(step);
        let (positions, steps_range) = &plan[m];
        if step == steps_range.start {
            let masked = positions.clone().filter(|&i| state.is_masked(i)).count();
            quotas = llada_quotas(masked, sb);
        }
        let start = state.clone();
        let mut sampled = 0;
        for e in trace.events_at(step) {
            if e.position >= len || !seen.insert(e.position) || !state.is_masked(e.position) {
                push(
                    ViolationKind::Absorbing,
                    step,
                    Some(e.position),
                    "position unmasked twice".into(),
                );
                continue;
            }
            if e.kind == EventKind::Sampled {
                sampled += 1;
                if block_of_pos(e.position) != Some(m) {
                    push(
                        ViolationKind::SemiArOrder,
                        step,
                        Some(e.position),
                        format!("sampled outside block {m}"),
                    );
                }
                if let Some(conv) = &policy.conv {
                    if neighbour_count(&start, e.position, conv.half()) == 0 {
                        push(
                            ViolationKind::ConvLocality,
                            step,
                            Some(e.position),
                            format!("no unmasked slot within {}", conv.half()),
                        );
                    }
                }
            }
            let _ = state.unmask(e.position, e.token);
        }
        // earlier blocks must be complete before a block samples anything
        if sampled > 0 {
            if let Some(i) = plan[..m]
                .iter()
                .flat_map(|(p, _)| p.clone())
                .find(|&i| start.is_masked(i))
            {
                push(
                    ViolationKind::SemiArOrder,
                    step,
                    Some(i),
                    format!("block {m} sampled while an earlier block is open"),
                );
            }
        }
        if policy.base == BaseSampler::Llada {
            let k = step - steps_range.start;
            let eligible = positions
                .clone()
                .filter(|&i| start.is_masked(i))
                .filter(|&i| {
                    policy
                        .conv
                        .as_ref()
                        .map_or(true, |c| neighbour_count(&start, i, c.half()) > 0)
                })
                .count();
            let want = quotas[k].min(eligible);
            if sampled != want {
                push(
                    ViolationKind::LladaCount,
                    step,
                    None,
                    format!("sampled {sampled}, expected {want}"),
                );
            }
        }
        if policy.eos_fill {
            if let Some(first) = state.slots().iter().position(|s| *s == Slot::Token(eos)) {
                if let Some(i) = (first + 1..len).find(|&i| state.is_masked(i)) {
                    push(ViolationKind::EosFill, step, Some(i), "masked slot right of EOS".into());
                }
            }
        }
    }
    for e in &trace.events {
        if e.step >= steps {
            push(
                ViolationKind::StepOrder,
                e.step,
                Some(e.position),
                "event after the last step".into(),
            );
        }
    }
    out
}
