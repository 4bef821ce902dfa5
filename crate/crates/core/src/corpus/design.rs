//! The designed toy corpus.
//!
//! Token classes, in id order:
//!
//! ```text
//! 0                question marker Q   (first prompt token)
//! 1                answer marker A     (last prompt token)
//! function words   shared across topics, Zipf-weighted, high marginal mass
//! per topic        keywords (appear in prompts, recur in responses)
//!                  meaning words (carry the answer, dominate right after A)
//! ```
//!
//! Prompts are `[Q, kw, kw, kw, A]`. After `A` the chain strongly prefers the
//! topic's meaning words; deeper into the response the class mix drifts to
//! function words and prompt keywords, so a context-poor predictor far from
//! the prompt falls back on frequent and repeated tokens.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ChainRow, CorpusModel, Template, TopicChain};
use crate::error::Result;
use crate::rng::{derive_seed, rng_from_seed};
use crate::vocab::{TokenId, VocabSpec};

/// Class mix `[function, keyword, meaning]` of one source class's
/// non-EOS transitions.
pub type ClassMix = [f64; 3];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    pub function_words: usize,
    pub topics: usize,
    pub keywords_per_topic: usize,
    pub meaning_per_topic: usize,
    pub templates_per_topic: usize,
    /// Candidate successors drawn per (source, target class).
    pub fanout: usize,
    /// Function-word successors drawn per source.
    pub function_fanout: usize,
    /// Zipf exponent of function-word popularity.
    pub zipf: f64,
    pub after_answer: ClassMix,
    pub after_function: ClassMix,
    pub after_keyword: ClassMix,
    pub after_meaning: ClassMix,
    /// Per-token stop probability once the response has started.
    pub eos_rate: f64,
    /// Weight of the uniform noise component in every content row.
    pub noise: f64,
    pub max_response_len: usize,
    pub seed: u64,
}

impl DesignSpec {
    /// Instruction-style corpus: EOS-terminated responses of mean length
    /// about 30, capped at 100.
    pub fn instruct() -> Self {
        Self {
            function_words: 90,
            topics: 16,
            keywords_per_topic: 6,
            meaning_per_topic: 16,
            templates_per_topic: 4,
            fanout: 4,
            function_fanout: 12,
            zipf: 0.7,
            after_answer: [0.1, 0.05, 0.85],
            after_function: [0.3, 0.25, 0.45],
            after_keyword: [0.5, 0.05, 0.45],
            after_meaning: [0.5, 0.25, 0.25],
            eos_rate: 1.0 / 30.0,
            noise: 0.02,
            max_response_len: 100,
            seed: 0x5eed,
        }
    }

    /// Same token classes without EOS: responses fill any window.
    pub fn continuous() -> Self {
        Self {
            eos_rate: 0.0,
            max_response_len: 1 << 20,
            ..Self::instruct()
        }
    }

    pub const QUESTION: TokenId = 0;
    pub const ANSWER: TokenId = 1;

    pub fn content_size(&self) -> usize {
        2 + self.function_words + self.topics * (self.keywords_per_topic + self.meaning_per_topic)
    }

    pub fn function_range(&self) -> std::ops::Range<TokenId> {
        2..(2 + self.function_words) as TokenId
    }

    pub fn keyword_range(&self, topic: usize) -> std::ops::Range<TokenId> {
        let start = 2 + self.function_words + topic * (self.keywords_per_topic + self.meaning_per_topic);
        start as TokenId..(start + self.keywords_per_topic) as TokenId
    }

    pub fn meaning_range(&self, topic: usize) -> std::ops::Range<TokenId> {
        let start = self.keyword_range(topic).end as usize;
        start as TokenId..(start + self.meaning_per_topic) as TokenId
    }

    pub fn names(&self) -> Vec<String> {
        let mut names = vec!["Q".to_string(), "A".to_string()];
        names.extend((0..self.function_words).map(|i| format!("f{i}")));
        for k in 0..self.topics {
            names.extend((0..self.keywords_per_topic).map(|i| format!("k{k}_{i}")));
            names.extend((0..self.meaning_per_topic).map(|i| format!("m{k}_{i}")));
        }
        names
    }
}

/// Draws `n` distinct items from `pool` with inclusion weights `select`, then
/// gives them harmonic in-row weights in draw order, so each row is peaked
/// while class members stay comparably frequent overall.
fn pick<R: Rng>(pool: &[TokenId], select: impl Fn(usize) -> f64, n: usize, rng: &mut R) -> Vec<(TokenId, f64)> {
    let idx: Vec<usize> = (0..pool.len()).collect();
    let mut chosen: Vec<usize> = idx
        .choose_multiple_weighted(rng, n.min(pool.len()), |&i| select(i))
        .expect("positive weights")
        .copied()
        .collect();
    chosen.shuffle(rng);
    chosen
        .into_iter()
        .enumerate()
        .map(|(rank, i)| (pool[i], 1.0 / (rank + 1) as f64))
        .collect()
}

/// Builds the designed corpus model.
pub fn designed_model(spec: &DesignSpec) -> Result<CorpusModel> {
    let content = spec.content_size();
    let vocab = VocabSpec::new(content)?.with_names(spec.names())?;
    let v = vocab.support_size();
    let eos = vocab.eos();

    let function: Vec<TokenId> = spec.function_range().collect();
    let zipf = |i: usize| 1.0 / ((i + 1) as f64).powf(spec.zipf);
    let uniform = |_: usize| 1.0;

    let mut topics = Vec::with_capacity(spec.topics);
    for k in 0..spec.topics {
        let keywords: Vec<TokenId> = spec.keyword_range(k).collect();
        let meaning: Vec<TokenId> = spec.meaning_range(k).collect();
        let mut rows = Vec::with_capacity(v);
        for a in 0..v as TokenId {
            if a == eos {
                rows.push(ChainRow {
                    sparse: vec![(eos, 1.0)],
                    noise: 0.0,
                });
                continue;
            }
            let mut rng = rng_from_seed(derive_seed(spec.seed, (k * v + a as usize) as u64));
            let (mix, stop) = if a == DesignSpec::ANSWER {
                (spec.after_answer, 0.0)
            } else if a == DesignSpec::QUESTION {
                ([0.0, 1.0, 0.0], 0.0)
            } else if function.contains(&a) {
                (spec.after_function, spec.eos_rate)
            } else if is_keyword(spec, a) {
                (spec.after_keyword, spec.eos_rate)
            } else {
                (spec.after_meaning, spec.eos_rate)
            };
            let mix_total: f64 = mix.iter().sum();
            let mut sparse = Vec::new();
            for (class, &share) in mix.iter().enumerate() {
                if share <= 0.0 {
                    continue;
                }
                let chosen = match class {
                    0 => pick(&function, zipf, spec.function_fanout, &mut rng),
                    1 => pick(&keywords, uniform, spec.fanout, &mut rng),
                    _ => pick(&meaning, uniform, spec.fanout, &mut rng),
                };
                let w: f64 = chosen.iter().map(|&(_, p)| p).sum();
                for (t, p) in chosen {
                    sparse.push((t, (1.0 - stop) * share / mix_total * p / w));
                }
            }
            if stop > 0.0 {
                sparse.push((eos, stop));
            }
            sparse.sort_by_key(|&(t, _)| t);
            rows.push(ChainRow {
                sparse,
                noise: spec.noise,
            });
        }
        topics.push(TopicChain { rows });
    }

    // Noise never emits EOS, so the A row cannot stop the response early.
    let mut noise = vec![1.0 / content as f64; v];
    noise[eos as usize] = 0.0;

    let mut templates = Vec::new();
    for k in 0..spec.topics {
        let kw: Vec<TokenId> = spec.keyword_range(k).collect();
        for j in 0..spec.templates_per_topic {
            let mut tokens = vec![DesignSpec::QUESTION];
            tokens.extend((0..3).map(|o| kw[(j + o) % kw.len()]));
            tokens.push(DesignSpec::ANSWER);
            templates.push(Template { tokens, topic: k });
        }
    }

    CorpusModel::new(vocab, templates, topics, noise, spec.max_response_len, spec.seed)
}

fn is_keyword(spec: &DesignSpec, tok: TokenId) -> bool {
    (0..spec.topics).any(|k| spec.keyword_range(k).contains(&tok))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{compute_prior, generate_corpus_seeded};

    #[test]
    fn instruct_model_is_valid_and_reproducible() {
        let spec = DesignSpec::instruct();
        let a = designed_model(&spec).unwrap();
        let b = designed_model(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vocab.content_size(), spec.content_size());
        let corpus = generate_corpus_seeded(&a, 2000, 1);
        let mean = corpus.iter().map(|e| e.response.len()).sum::<usize>() as f64 / 2000.0;
        assert!(corpus.iter().all(|e| !e.response.is_empty()));
        assert!((20.0..40.0).contains(&mean), "mean response length {mean}");
    }

    #[test]
    fn function_words_and_markers_lead_the_prior() {
        let spec = DesignSpec::instruct();
        let m = designed_model(&spec).unwrap();
        let corpus = generate_corpus_seeded(&m, 2000, 2);
        let prior = compute_prior(&corpus, m.support_size()).unwrap();
        assert!(prior.is_high_prior(DesignSpec::QUESTION) && prior.is_high_prior(DesignSpec::ANSWER));
        let f = spec.function_range();
        let top_function = prior.top100.iter().filter(|t| f.contains(t)).count();
        let top_meaning = (0..spec.topics)
            .map(|k| {
                prior
                    .top100
                    .iter()
                    .filter(|t| spec.meaning_range(k).contains(t))
                    .count()
            })
            .sum::<usize>();
        assert!(top_function > 40, "{top_function}");
        assert!(top_meaning <= 5, "{top_meaning}");
    }

    #[test]
    fn continuous_model_never_stops() {
        let m = designed_model(&DesignSpec::continuous()).unwrap();
        let eos = m.vocab.eos();
        for k in 0..m.topics.len() {
            for a in 0..m.vocab.content_size() as TokenId {
                assert_eq!(m.prob(k, a, eos), 0.0);
            }
        }
    }
}
