//! Synthetic instruction/response corpus with an exact likelihood.
//!
//! A [`CorpusModel`] draws a prompt uniformly from its templates; each
//! template belongs to a topic, and the response continues a topic-specific
//! first-order chain starting from the prompt's last token. The chain lives
//! on content tokens plus EOS, with EOS absorbing. Responses are cut by a
//! forced EOS once they reach `max_response_len`.
//!
//! Every chain row is a sparse distribution blended with a shared noise
//! vector, `T[a, .] = (1 - noise_a) * sparse_a + noise_a * u`, which keeps
//! exact posterior computation linear in the number of stored entries.

mod design;
mod io;
mod prior;

pub use design::{designed_model, DesignSpec};
pub use io::{load_corpus, read_corpus, save_corpus, write_corpus, CorpusHeader, CORPUS_VERSION};
pub use prior::{compute_prior, PriorTable, TOP_N};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed};
use crate::state::SequenceState;
use crate::vocab::{TokenId, VocabSpec};

/// Log-probability charged per token whose exact probability is zero.
pub const ZERO_PROB_LOG_FLOOR: f64 = -27.631021115928547; // ln(1e-12)

const ROW_TOL: f64 = 1e-12;
const SHARD: usize = 4096;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub prompt: Vec<TokenId>,
    pub response: Vec<TokenId>,
}

impl Example {
    /// `prompt ++ response ++ EOS`, then EOS-filled up to `len` if given.
    pub fn window(&self, vocab: &VocabSpec, len: Option<usize>) -> Result<SequenceState> {
        let mut toks = self.prompt.clone();
        toks.extend_from_slice(&self.response);
        toks.push(vocab.eos());
        if let Some(len) = len {
            if toks.len() > len {
                return Err(Error::state(format!(
                    "example of length {} does not fit window {len}",
                    toks.len()
                )));
            }
            toks.resize(len, vocab.eos());
        }
        SequenceState::from_tokens(&toks, self.prompt.len())
    }

    pub fn len(&self) -> usize {
        self.prompt.len() + self.response.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainRow {
    pub sparse: Vec<(TokenId, f64)>,
    pub noise: f64,
}

impl ChainRow {
    fn sparse_prob(&self, to: TokenId) -> f64 {
        self.sparse.iter().filter(|&&(t, _)| t == to).map(|&(_, p)| p).sum()
    }
}

/// One topic's transition table over the prediction support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopicChain {
    pub rows: Vec<ChainRow>,
}

impl TopicChain {
    /// Builds a chain from dense row-stochastic rows (no noise component).
    pub fn from_dense(rows: &[Vec<f64>]) -> Self {
        Self {
            rows: rows
                .iter()
                .map(|r| ChainRow {
                    sparse: r
                        .iter()
                        .enumerate()
                        .filter(|(_, &p)| p > 0.0)
                        .map(|(j, &p)| (j as TokenId, p))
                        .collect(),
                    noise: 0.0,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub tokens: Vec<TokenId>,
    pub topic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusModel {
    pub vocab: VocabSpec,
    pub templates: Vec<Template>,
    pub topics: Vec<TopicChain>,
    /// Shared noise distribution `u` over the prediction support.
    pub noise: Vec<f64>,
    pub max_response_len: usize,
    pub seed: u64,
}

/// Result of exact scoring: the log-likelihood, and whether any token had
/// zero probability (each such token is charged [`ZERO_PROB_LOG_FLOOR`]).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleScore {
    pub logprob: f64,
    pub len: usize,
    pub flagged: bool,
}

impl OracleScore {
    /// `exp(-logprob / len)`; infinite for an empty response.
    pub fn ppl(&self) -> f64 {
        if self.len == 0 {
            f64::INFINITY
        } else {
            (-self.logprob / self.len as f64).exp()
        }
    }
}

impl CorpusModel {
    pub fn new(
        vocab: VocabSpec,
        templates: Vec<Template>,
        topics: Vec<TopicChain>,
        noise: Vec<f64>,
        max_response_len: usize,
        seed: u64,
    ) -> Result<Self> {
        let m = Self {
            vocab,
            templates,
            topics,
            noise,
            max_response_len,
            seed,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.vocab.support_size();
        let eos = self.vocab.eos();
        if self.templates.is_empty() || self.topics.is_empty() {
            return Err(Error::config("corpus model needs templates and topics"));
        }
        if self.max_response_len == 0 {
            return Err(Error::config("max_response_len must be positive"));
        }
        if self.noise.len() != v {
            return Err(Error::config("noise vector length must equal support size"));
        }
        let any_noise = self.topics.iter().flat_map(|c| &c.rows).any(|r| r.noise > 0.0);
        if any_noise {
            let s: f64 = self.noise.iter().sum();
            if (s - 1.0).abs() > ROW_TOL || self.noise.iter().any(|&p| p < 0.0) {
                return Err(Error::config(format!("noise vector sums to {s}")));
            }
        }
        for (k, chain) in self.topics.iter().enumerate() {
            if chain.rows.len() != v {
                return Err(Error::config(format!(
                    "topic {k} has {} rows, expected {v}",
                    chain.rows.len()
                )));
            }
            for (a, row) in chain.rows.iter().enumerate() {
                if !(0.0..=1.0).contains(&row.noise) {
                    return Err(Error::config(format!("topic {k} row {a}: noise {}", row.noise)));
                }
                if row.sparse.iter().any(|&(t, p)| (t as usize) >= v || p < 0.0) {
                    return Err(Error::config(format!("topic {k} row {a}: bad entry")));
                }
                let s: f64 = row.sparse.iter().map(|&(_, p)| p).sum();
                let total = (1.0 - row.noise) * s + if row.noise > 0.0 { row.noise } else { 0.0 };
                if (total - 1.0).abs() > ROW_TOL {
                    return Err(Error::config(format!("topic {k} row {a} sums to {total}")));
                }
            }
            let eos_row = &chain.rows[eos as usize];
            if eos_row.noise != 0.0 || (eos_row.sparse_prob(eos) - 1.0).abs() > ROW_TOL {
                return Err(Error::config(format!("topic {k}: EOS must be absorbing")));
            }
        }
        for (j, t) in self.templates.iter().enumerate() {
            if t.tokens.is_empty() || t.topic >= self.topics.len() {
                return Err(Error::config(format!("template {j} is empty or has no topic")));
            }
            if let Some(&bad) = t.tokens.iter().find(|&&x| !self.vocab.is_content(x)) {
                return Err(Error::config(format!("template {j} holds non-content id {bad}")));
            }
            let last = *t.tokens.last().unwrap();
            if self.prob(t.topic, last, eos) > 0.0 {
                return Err(Error::config(format!("template {j} may produce an empty response")));
            }
        }
        Ok(())
    }

    pub fn support_size(&self) -> usize {
        self.vocab.support_size()
    }

    /// Exact transition probability `T_topic[from, to]`.
    pub fn prob(&self, topic: usize, from: TokenId, to: TokenId) -> f64 {
        let row = &self.topics[topic].rows[from as usize];
        (1.0 - row.noise) * row.sparse_prob(to) + row.noise * self.noise[to as usize]
    }

    /// Posterior over topics given a prompt: template counts per topic among
    /// templates equal to the prompt, uniform if none matches.
    pub fn topic_weights(&self, prompt: &[TokenId]) -> Vec<f64> {
        let mut w = vec![0.0; self.topics.len()];
        for t in self.templates.iter().filter(|t| t.tokens == prompt) {
            w[t.topic] += 1.0;
        }
        let total: f64 = w.iter().sum();
        if total == 0.0 {
            return vec![1.0 / self.topics.len() as f64; self.topics.len()];
        }
        w.iter().map(|x| x / total).collect()
    }

    fn sample_row<R: Rng + ?Sized>(&self, topic: usize, from: TokenId, rng: &mut R) -> TokenId {
        let row = &self.topics[topic].rows[from as usize];
        let dist: Box<dyn Iterator<Item = (TokenId, f64)>> = if rng.gen::<f64>() < row.noise {
            Box::new(self.noise.iter().enumerate().map(|(j, &p)| (j as TokenId, p)))
        } else {
            Box::new(row.sparse.iter().copied())
        };
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut last = from;
        for (tok, p) in dist {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = tok;
            if u < acc {
                return tok;
            }
        }
        last
    }

    pub fn sample_example<R: Rng + ?Sized>(&self, rng: &mut R) -> Example {
        self.sample_example_capped(rng, self.max_response_len)
    }

    /// Draws a prompt only; consumes the same first draw as
    /// [`CorpusModel::sample_example`].
    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<TokenId> {
        self.templates[rng.gen_range(0..self.templates.len())].tokens.clone()
    }

    /// Like [`CorpusModel::sample_example`] but stops after `cap` response
    /// tokens (or the model's own cap, whichever is smaller).
    pub fn sample_example_capped<R: Rng + ?Sized>(&self, rng: &mut R, cap: usize) -> Example {
        let template = &self.templates[rng.gen_range(0..self.templates.len())];
        let eos = self.vocab.eos();
        let mut prev = *template.tokens.last().unwrap();
        let mut response = Vec::new();
        let cap = cap.min(self.max_response_len);
        while response.len() < cap {
            let next = self.sample_row(template.topic, prev, rng);
            if next == eos {
                break;
            }
            response.push(next);
            prev = next;
        }
        Example {
            prompt: template.tokens.clone(),
            response,
        }
    }

    /// Log-likelihood of `response` (excluding the terminating EOS) given the
    /// prompt, mixed over the topics consistent with the prompt.
    pub fn oracle_logprob(&self, response: &[TokenId], prompt: &[TokenId]) -> Result<OracleScore> {
        let Some(&last) = prompt.last() else {
            return Err(Error::domain("oracle scoring needs a nonempty prompt"));
        };
        if let Some(&bad) = prompt.iter().chain(response).find(|&&t| !self.vocab.is_content(t)) {
            return Err(Error::domain(format!("token {bad} is not a content token")));
        }
        let weights = self.topic_weights(prompt);
        let mut per_topic = Vec::with_capacity(weights.len());
        for (k, &w) in weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let mut lp = w.ln();
            let mut zeros = 0usize;
            if response.len() > self.max_response_len {
                zeros += 1;
            }
            let mut prev = last;
            for &tok in response {
                let p = self.prob(k, prev, tok);
                if p > 0.0 {
                    lp += p.ln();
                } else {
                    zeros += 1;
                }
                prev = tok;
            }
            per_topic.push((lp, zeros));
        }
        // Prefer the topics with the fewest impossible transitions.
        let min_zeros = per_topic.iter().map(|&(_, z)| z).min().unwrap_or(0);
        let lps: Vec<f64> = per_topic
            .iter()
            .filter(|&&(_, z)| z == min_zeros)
            .map(|&(lp, _)| lp)
            .collect();
        let logprob = log_sum_exp(&lps) + min_zeros as f64 * ZERO_PROB_LOG_FLOOR;
        Ok(OracleScore {
            logprob,
            len: response.len(),
            flagged: min_zeros > 0,
        })
    }

    pub fn score_example(&self, ex: &Example) -> Result<OracleScore> {
        self.oracle_logprob(&ex.response, &ex.prompt)
    }
}

pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Draws `n` i.i.d. examples. A base seed is taken from `rng` and split over
/// fixed-size shards with derived seeds, so output depends only on that seed
/// and `n`.
pub fn generate_corpus<R: Rng + ?Sized>(model: &CorpusModel, n: usize, rng: &mut R) -> Vec<Example> {
    generate_corpus_seeded(model, n, rng.gen())
}

pub fn generate_corpus_seeded(model: &CorpusModel, n: usize, seed: u64) -> Vec<Example> {
    generate_corpus_capped(model, n, seed, model.max_response_len)
}

/// [`generate_corpus_seeded`] with responses cut after `cap` tokens; needed
/// for models whose responses never stop on their own.
pub fn generate_corpus_capped(model: &CorpusModel, n: usize, seed: u64, cap: usize) -> Vec<Example> {
    let shards = n.div_ceil(SHARD);
    (0..shards)
        .into_par_iter()
        .map(|s| {
            let mut rng = rng_from_seed(derive_seed(seed, s as u64));
            let count = SHARD.min(n - s * SHARD);
            (0..count)
                .map(|_| model.sample_example_capped(&mut rng, cap))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .concat()
}

/// Mean and standard deviation of oracle perplexity over a corpus.
pub fn ppl_stats(model: &CorpusModel, corpus: &[Example]) -> Result<(f64, f64)> {
    let ppls = corpus
        .iter()
        .map(|ex| model.score_example(ex).map(|s| s.ppl()))
        .collect::<Result<Vec<_>>>()?;
    let finite: Vec<f64> = ppls.into_iter().filter(|p| p.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::domain("no finite perplexities in corpus"));
    }
    let n = finite.len() as f64;
    let mu = finite.iter().sum::<f64>() / n;
    let var = finite.iter().map(|p| (p - mu).powi(2)).sum::<f64>() / n;
    Ok((mu, var.sqrt()))
}
