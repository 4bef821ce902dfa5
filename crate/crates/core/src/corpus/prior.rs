//! Term-frequency priors over a corpus.

use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Size of the high-prior token set.
pub const TOP_N: usize = 100;

/// Empirical token frequencies over prompt and response tokens.
///
/// A token never seen in the corpus gets the log-prior floor
/// `ln(1 / (10 * N))`, with `N` the corpus token count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriorTable {
    pub freq: Vec<f64>,
    /// Most frequent tokens, by descending frequency then ascending id.
    pub top100: Vec<TokenId>,
    pub floor: f64,
    pub total_tokens: u64,
}

impl PriorTable {
    pub fn compute(corpus: &[Example], support_size: usize) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::domain("cannot compute a prior from an empty corpus"));
        }
        let mut counts = vec![0u64; support_size];
        for ex in corpus {
            for &t in ex.prompt.iter().chain(&ex.response) {
                let slot = counts
                    .get_mut(t as usize)
                    .ok_or_else(|| Error::domain(format!("token {t} outside support")))?;
                *slot += 1;
            }
        }
        Self::from_counts(&counts)
    }

    pub fn from_counts(counts: &[u64]) -> Result<Self> {
        let total: u64 = counts.iter().sum();
        if total == 0 {
            return Err(Error::domain("prior over zero tokens"));
        }
        let freq: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
        let mut order: Vec<TokenId> = (0..counts.len() as TokenId).collect();
        order.sort_by(|&a, &b| counts[b as usize].cmp(&counts[a as usize]).then(a.cmp(&b)));
        order.retain(|&t| counts[t as usize] > 0);
        order.truncate(TOP_N);
        Ok(Self {
            freq,
            top100: order,
            floor: (1.0 / (10.0 * total as f64)).ln(),
            total_tokens: total,
        })
    }

    pub fn log_prior(&self, tok: TokenId) -> f64 {
        match self.freq.get(tok as usize) {
            Some(&f) if f > 0.0 => f.ln(),
            _ => self.floor,
        }
    }

    pub fn is_high_prior(&self, tok: TokenId) -> bool {
        self.top100.contains(&tok)
    }

    /// Membership mask of the top set over `width` ids.
    pub fn high_prior_mask(&self, width: usize) -> Vec<bool> {
        let mut m = vec![false; width];
        for &t in &self.top100 {
            if let Some(slot) = m.get_mut(t as usize) {
                *slot = true;
            }
        }
        m
    }
}

/// Convenience wrapper over [`PriorTable::compute`].
pub fn compute_prior(corpus: &[Example], support_size: usize) -> Result<PriorTable> {
    PriorTable::compute(corpus, support_size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::generate_corpus_seeded;
    use crate::corpus::tests::three_state;
    use crate::corpus::{CorpusModel, Template, TopicChain};
    use crate::vocab::VocabSpec;
    use approx::assert_relative_eq;

    #[test]
    fn single_example_frequencies() {
        let ex = Example {
            prompt: vec![0, 0],
            response: vec![1],
        };
        let p = PriorTable::compute(&[ex], 3).unwrap();
        assert_relative_eq!(p.freq[0], 2.0 / 3.0);
        assert_relative_eq!(p.freq[1], 1.0 / 3.0);
        assert_eq!(p.top100, vec![0, 1]);
        assert_relative_eq!(p.log_prior(2), (1.0f64 / 30.0).ln());
    }

    #[test]
    fn ties_rank_lower_id_first() {
        let ex = Example {
            prompt: vec![5, 2],
            response: vec![5, 2, 7],
        };
        let p = PriorTable::compute(&[ex], 8).unwrap();
        assert_eq!(p.top100, vec![2, 5, 7]);
    }

    #[test]
    fn empty_corpus_rejected() {
        assert!(PriorTable::compute(&[], 3).is_err());
    }

    #[test]
    fn matches_brute_force_count() {
        let m = three_state();
        let corpus = generate_corpus_seeded(&m, 10_000, 8);
        let p = PriorTable::compute(&corpus, m.support_size()).unwrap();
        let mut all = Vec::new();
        for ex in &corpus {
            all.extend(ex.prompt.iter().copied());
            all.extend(ex.response.iter().copied());
        }
        for tok in 0..m.support_size() as TokenId {
            let c = all.iter().filter(|&&t| t == tok).count();
            assert_eq!(p.freq[tok as usize], c as f64 / all.len() as f64);
        }
        assert!((p.freq.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn converges_to_stationary_marginal() {
        // Fast-mixing 3-state chain without EOS; long responses wash out the
        // prompt and the start-up transient.
        let t = [[0.5, 0.3, 0.2], [0.2, 0.5, 0.3], [0.3, 0.2, 0.5]];
        let mut rows: Vec<Vec<f64>> = t.iter().map(|r| [&r[..], &[0.0]].concat()).collect();
        rows.push(vec![0.0, 0.0, 0.0, 1.0]);
        let m = CorpusModel::new(
            VocabSpec::new(3).unwrap(),
            vec![
                Template {
                    tokens: vec![0],
                    topic: 0,
                },
                Template {
                    tokens: vec![1],
                    topic: 0,
                },
                Template {
                    tokens: vec![2],
                    topic: 0,
                },
            ],
            vec![TopicChain::from_dense(&rows)],
            vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0],
            50,
            0,
        )
        .unwrap();
        // stationary distribution by power iteration
        let mut pi = [1.0 / 3.0; 3];
        for _ in 0..500 {
            let mut next = [0.0; 3];
            for a in 0..3 {
                for b in 0..3 {
                    next[b] += pi[a] * t[a][b];
                }
            }
            pi = next;
        }
        let corpus = generate_corpus_seeded(&m, 100_000, 21);
        let p = PriorTable::compute(&corpus, 4).unwrap();
        for s in 0..3 {
            let rel = (p.freq[s] - pi[s]).abs() / pi[s];
            assert!(rel < 0.05, "state {s}: {} vs {}", p.freq[s], pi[s]);
        }
    }
}
