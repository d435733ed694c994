//! BLEU, chrF++ and reward normalization.
//!
//! Sentence BLEU uses exp smoothing with effective order; corpus BLEU pools
//! n-gram statistics and applies no smoothing. chrF++ uses character
//! 6-grams (whitespace removed), word bigrams and beta = 2. Everything here
//! is pure and safe to call from any thread.

mod bleu;
mod chrf;
mod tokenize;

use serde::{Deserialize, Serialize};

pub use bleu::{bleu_from_stats, bleu_stats, corpus_bleu, sentence_bleu, BleuStats, Smoothing, MAX_ORDER};
pub use chrf::{chrf_from_stats, chrf_pp, chrf_stats, chrf_with, corpus_chrf_pp, ChrfParams, ChrfStats};
pub use tokenize::{is_separated_punct, tokenize, TOKENIZER_VERSION};

/// Ordered whitespace-free tokens.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence(Vec<String>);

impl TokenSequence {
    /// Panics if a token is empty or contains whitespace.
    pub fn new(tokens: Vec<String>) -> Self {
        assert!(
            tokens.iter().all(|t| !t.is_empty() && !t.chars().any(char::is_whitespace)),
            "tokens must be non-empty and free of whitespace"
        );
        TokenSequence(tokens)
    }

    /// Whitespace split without punctuation handling, for text that is
    /// already tokenized.
    pub fn from_pretokenized(text: &str) -> Self {
        TokenSequence(text.split_whitespace().map(str::to_owned).collect())
    }

    pub fn tokens(&self) -> &[String] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<String> {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "metric", rename_all = "snake_case")]
pub enum ScoreDetail {
    Bleu {
        /// Precisions in `[0, 1]` as they entered the geometric mean.
        precisions: [f64; MAX_ORDER],
        brevity_penalty: f64,
        hyp_len: u64,
        ref_len: u64,
    },
    Chrf {
        precision: f64,
        recall: f64,
        char_f: f64,
        word_f: f64,
    },
}

/// A score on the 0..=100 scale plus the components it was built from.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricScore {
    pub value: f64,
    pub detail: ScoreDetail,
}

impl MetricScore {
    pub(crate) fn new(value: f64, detail: ScoreDetail) -> Self {
        debug_assert!((0.0..=100.0 + 1e-9).contains(&value), "score {value} out of range");
        MetricScore {
            value: value.clamp(0.0, 100.0),
            detail,
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        match self.detail {
            ScoreDetail::Bleu { brevity_penalty, .. } => brevity_penalty,
            ScoreDetail::Chrf { .. } => 1.0,
        }
    }
}

/// Map a 0..=100 score onto the `[0, 1]` reward scale.
pub fn normalize_reward(score: &MetricScore) -> f64 {
    (score.value / 100.0).clamp(0.0, 1.0)
}

/// Smoothed sentence BLEU of raw strings under the crate tokenizer, as a
/// `[0, 1]` reward.
pub fn sentence_reward(hyp: &str, reference: &str) -> f64 {
    let score = sentence_bleu(&tokenize(hyp), &[tokenize(reference)], Smoothing::ExpFloor)
        .expect("one reference is always supplied");
    normalize_reward(&score)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn score(v: f64) -> MetricScore {
        MetricScore::new(v, ScoreDetail::Chrf { precision: 0.0, recall: 0.0, char_f: 0.0, word_f: 0.0 })
    }

    #[test]
    fn normalization() {
        assert_eq!(normalize_reward(&score(100.0)), 1.0);
        assert_eq!(normalize_reward(&score(0.0)), 0.0);
        assert!((normalize_reward(&score(68.38)) - 0.6838).abs() < 1e-12);
    }

    #[test]
    fn reward_of_exact_match() {
        assert_eq!(sentence_reward("मैं घर जा रहा हूँ।", "मैं घर जा रहा हूँ।"), 1.0);
        assert_eq!(sentence_reward("abc def", "xyz"), 0.0);
    }
}
