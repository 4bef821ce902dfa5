//! Unmask traces and their CSV form.
//!
//! The CSV has header `step,position,token,denoiser_call`. Each step writes
//! its sampled events (`step,pos,tok,`), then one summary row
//! (`step,,,0|1`), then the EOS-fill events of that step. Rows after a
//! step's summary are therefore fills.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::state::SequenceState;
use crate::vocab::TokenId;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EventKind {
    Sampled,
    Filled,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub step: usize,
    pub position: usize,
    pub token: TokenId,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceLog {
    pub events: Vec<TraceEvent>,
    /// One flag per step: whether the denoiser was called.
    pub calls: Vec<bool>,
    pub final_state: SequenceState,
    /// Rows whose unmask probability had to be clamped to 1.
    pub clamped: usize,
}

impl TraceLog {
    pub fn steps(&self) -> usize {
        self.calls.len()
    }

    pub fn denoiser_calls(&self) -> usize {
        self.calls.iter().filter(|&&c| c).count()
    }

    /// Masked slots left after the last step.
    pub fn unfinished(&self) -> usize {
        self.final_state.masked_count()
    }

    /// The window before the first step: the final state with every event
    /// position masked again.
    pub fn initial_state(&self) -> Result<SequenceState> {
        let mut s = self.final_state.clone();
        for e in &self.events {
            s.remask(e.position)?;
        }
        s.step_clock = 0;
        Ok(s)
    }

    /// Applies the events to `initial` in order, failing on any event whose
    /// position is not masked at that point.
    pub fn replay(&self, initial: &SequenceState) -> Result<SequenceState> {
        let mut s = initial.clone();
        for e in &self.events {
            s.unmask(e.position, e.token)?;
        }
        Ok(s)
    }

    pub fn events_at(&self, step: usize) -> impl Iterator<Item = &TraceEvent> {
        self.events.iter().filter(move |e| e.step == step)
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record(["step", "position", "token", "denoiser_call"])
            .map_err(csv_err)?;
        let mut idx = 0;
        for (step, &call) in self.calls.iter().enumerate() {
            let s = step.to_string();
            while idx < self.events.len()
                && self.events[idx].step == step
                && self.events[idx].kind == EventKind::Sampled
            {
                let e = &self.events[idx];
                out.write_record([s.as_str(), &e.position.to_string(), &e.token.to_string(), ""])
                    .map_err(csv_err)?;
                idx += 1;
            }
            out.write_record([s.as_str(), "", "", if call { "1" } else { "0" }])
                .map_err(csv_err)?;
            while idx < self.events.len() && self.events[idx].step == step {
                let e = &self.events[idx];
                out.write_record([s.as_str(), &e.position.to_string(), &e.token.to_string(), ""])
                    .map_err(csv_err)?;
                idx += 1;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Reads a trace written by [`TraceLog::write_csv`]; `initial` is the
    /// window the run started from.
    pub fn read_csv<R: Read>(r: R, initial: &SequenceState) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
        let headers = rdr.headers().map_err(|e| Error::parse(1, e.to_string()))?.clone();
        if headers.iter().collect::<Vec<_>>() != ["step", "position", "token", "denoiser_call"] {
            return Err(Error::parse(1, "expected header step,position,token,denoiser_call"));
        }
        let mut events = Vec::new();
        let mut calls: Vec<bool> = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let line = k + 2;
            let rec = rec.map_err(|e| Error::parse(line, e.to_string()))?;
            let field = |n: usize| rec.get(n).unwrap_or("");
            let step: usize = field(0).parse().map_err(|_| Error::parse(line, "bad step"))?;
            if field(1).is_empty() {
                if step != calls.len() {
                    return Err(Error::parse(line, "summary rows out of order"));
                }
                calls.push(match field(3) {
                    "1" => true,
                    "0" => false,
                    other => return Err(Error::parse(line, format!("bad denoiser_call {other:?}"))),
                });
                continue;
            }
            let position = field(1).parse().map_err(|_| Error::parse(line, "bad position"))?;
            let token = field(2).parse().map_err(|_| Error::parse(line, "bad token"))?;
            let kind = if step < calls.len() {
                EventKind::Filled
            } else if step == calls.len() {
                EventKind::Sampled
            } else {
                return Err(Error::parse(line, "event for a step without summary"));
            };
            events.push(TraceEvent {
                step,
                position,
                token,
                kind,
            });
        }
        let log = Self {
            events,
            calls,
            final_state: initial.clone(),
            clamped: 0,
        };
        let final_state = log.replay(initial)?;
        Ok(Self { final_state, ..log })
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}
