//! Exact posteriors under a corpus model.
//!
//! The window is read as `prompt ++ chain`, where the chain continues the
//! response process from the last prompt token (EOS absorbing, forced EOS at
//! the response cap). Every unmasked chain position is evidence. Marginals
//! come from a scaled forward-backward pass per topic, mixed by topic
//! posterior. Gap length is unbounded.

use super::Denoiser;
use crate::corpus::CorpusModel;
use crate::error::{Error, Result};
use crate::state::{ProbGrid, SequenceState, Slot};
use crate::vocab::TokenId;

/// Default weight of the uniform component mixed into every transition so
/// that contradictory evidence (for example content sampled right of an EOS
/// in the same step) still has positive likelihood.
pub const DEFAULT_SMOOTHING: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    pub model: CorpusModel,
    pub smoothing: f64,
}

impl OracleDenoiser {
    pub fn new(model: CorpusModel) -> Self {
        Self {
            model,
            smoothing: DEFAULT_SMOOTHING,
        }
    }

    pub fn exact(model: CorpusModel) -> Self {
        Self { model, smoothing: 0.0 }
    }

    fn v(&self) -> usize {
        self.model.support_size()
    }

    /// `out = alpha * T` for the transition into response index `r`.
    fn forward(&self, topic: usize, alpha: &[f64], r: usize, out: &mut [f64]) {
        let v = self.v();
        let eos = self.model.vocab.eos() as usize;
        let total: f64 = alpha.iter().sum();
        out.iter_mut().for_each(|x| *x = 0.0);
        if r >= self.model.max_response_len {
            out[eos] = total;
        } else {
            let rows = &self.model.topics[topic].rows;
            let mut noise_mass = 0.0;
            for (a, &pa) in alpha.iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let row = &rows[a];
                let keep = pa * (1.0 - row.noise);
                for &(b, p) in &row.sparse {
                    out[b as usize] += keep * p;
                }
                noise_mass += pa * row.noise;
            }
            if noise_mass > 0.0 {
                for (o, u) in out.iter_mut().zip(&self.model.noise) {
                    *o += noise_mass * u;
                }
            }
        }
        if self.smoothing > 0.0 {
            let eps = self.smoothing;
            for o in out.iter_mut() {
                *o = (1.0 - eps) * *o + eps * total / v as f64;
            }
        }
    }

    /// `out[a] = sum_b T[a, b] * eb[b]` for the transition into response
    /// index `r`.
    fn backward(&self, topic: usize, eb: &[f64], r: usize, out: &mut [f64]) {
        let v = self.v();
        let eos = self.model.vocab.eos() as usize;
        let total: f64 = eb.iter().sum();
        if r >= self.model.max_response_len {
            out.iter_mut().for_each(|x| *x = eb[eos]);
        } else {
            let noise_term: f64 = self.model.noise.iter().zip(eb).map(|(u, b)| u * b).sum();
            for (a, row) in self.model.topics[topic].rows.iter().enumerate() {
                let s: f64 = row.sparse.iter().map(|&(b, p)| p * eb[b as usize]).sum();
                out[a] = (1.0 - row.noise) * s + row.noise * noise_term;
            }
        }
        if self.smoothing > 0.0 {
            let eps = self.smoothing;
            for o in out.iter_mut() {
                *o = (1.0 - eps) * *o + eps * total / v as f64;
            }
        }
    }

    /// Posterior marginals over the chain positions and the log evidence.
    fn topic_posterior(&self, topic: usize, start: TokenId, chain: &[Slot]) -> Result<(Vec<Vec<f64>>, f64)> {
        let v = self.v();
        let n = chain.len();
        let evidence = |k: usize, x: &mut [f64]| {
            if let Slot::Token(o) = chain[k] {
                let keep = x[o as usize];
                x.iter_mut().for_each(|e| *e = 0.0);
                x[o as usize] = keep;
            }
        };
        let mut alphas = vec![vec![0.0; v]; n];
        let mut log_z = 0.0;
        let mut prev = vec![0.0; v];
        prev[start as usize] = 1.0;
        for k in 0..n {
            let (head, tail) = alphas.split_at_mut(k);
            let src = if k == 0 { &prev } else { &head[k - 1] };
            self.forward(topic, src, k, &mut tail[0]);
            evidence(k, &mut tail[0]);
            let c: f64 = tail[0].iter().sum();
            if c <= 0.0 || !c.is_finite() {
                return Ok((Vec::new(), f64::NEG_INFINITY));
            }
            tail[0].iter_mut().for_each(|x| *x /= c);
            log_z += c.ln();
        }
        prev.iter_mut().for_each(|x| *x = 0.0);
        let mut beta = vec![1.0; v];
        let mut eb = vec![0.0; v];
        let mut post = vec![vec![0.0; v]; n];
        for k in (0..n).rev() {
            let p = &mut post[k];
            let mut z = 0.0;
            for x in 0..v {
                p[x] = alphas[k][x] * beta[x];
                z += p[x];
            }
            p.iter_mut().for_each(|x| *x /= z);
            if k > 0 {
                eb.copy_from_slice(&beta);
                evidence(k, &mut eb);
                self.backward(topic, &eb, k, &mut prev);
                let s: f64 = prev.iter().sum();
                beta.iter_mut().zip(&prev).for_each(|(b, p)| *b = p / s);
            }
        }
        Ok((post, log_z))
    }
}

impl Denoiser for OracleDenoiser {
    fn support_size(&self) -> usize {
        self.v()
    }

    fn predict(&self, state: &SequenceState) -> Result<ProbGrid> {
        let p = state.left_prompt_len();
        if p == 0 {
            return Err(Error::state("the corpus oracle needs a left prompt"));
        }
        let prompt: Vec<TokenId> = state.left_prompt().iter().filter_map(|s| s.token()).collect();
        if let Some(&bad) = prompt.iter().find(|&&t| !self.model.vocab.is_content(t)) {
            return Err(Error::state(format!("prompt token {bad} is not content")));
        }
        if let Some(t) = state.slots()[p..]
            .iter()
            .filter_map(|s| s.token())
            .find(|&t| !self.model.vocab.in_support(t))
        {
            return Err(Error::state(format!("token {t} outside the prediction support")));
        }
        let chain = &state.slots()[p..];
        let start = *prompt.last().unwrap();
        let mut parts = Vec::new();
        for (k, w) in self.model.topic_weights(&prompt).into_iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (post, log_z) = self.topic_posterior(k, start, chain)?;
            if log_z.is_finite() {
                parts.push((w.ln() + log_z, post));
            }
        }
        if parts.is_empty() {
            return Err(Error::domain("evidence has zero likelihood under every topic"));
        }
        let m = parts.iter().map(|(l, _)| *l).fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = parts.iter().map(|(l, _)| (l - m).exp()).collect();
        let total: f64 = weights.iter().sum();

        let v = self.v();
        let mut grid = ProbGrid::zeros(state.len(), v);
        for (i, &t) in prompt.iter().enumerate() {
            grid.set(i, t as usize, 1.0);
        }
        for k in 0..chain.len() {
            let row = grid.row_mut(p + k);
            for ((_, post), w) in parts.iter().zip(&weights) {
                for (r, x) in row.iter_mut().zip(&post[k]) {
                    *r += w / total * x;
                }
            }
        }
        Ok(grid)
    }
}
