use std::collections::HashMap;
use std::hash::Hash;

use super::{MetricScore, ScoreDetail};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChrfParams {
    pub char_order: usize,
    pub word_order: usize,
    pub beta: f64,
}

impl ChrfParams {
    /// chrF++: character 6-grams, word bigrams, recall weighted by beta = 2.
    pub const PLUS_PLUS: ChrfParams = ChrfParams {
        char_order: 6,
        word_order: 2,
        beta: 2.0,
    };

    fn orders(&self) -> usize {
        self.char_order + self.word_order
    }
}

impl Default for ChrfParams {
    fn default() -> Self {
        Self::PLUS_PLUS
    }
}

/// Per-order `(hyp n-grams, ref n-grams, matches)`; character orders first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChrfStats(pub Vec<[u64; 3]>);

impl ChrfStats {
    fn zeros(orders: usize) -> Self {
        ChrfStats(vec![[0; 3]; orders])
    }

    fn add(&mut self, other: &ChrfStats) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for i in 0..3 {
                a[i] += b[i];
            }
        }
    }
}

const WORD_PUNCT: &str = "!\"#$%&'()*+,-./:;<=>?@[\\]^_`{|}~";

/// Whitespace split, then peel one ASCII punctuation mark off the end of a
/// word, or else off its start.
fn words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for w in text.split_whitespace() {
        let mut chars = w.chars();
        let first = chars.next().expect("split_whitespace yields non-empty words");
        if w.chars().count() == 1 {
            out.push(w.to_string());
            continue;
        }
        let last = w.chars().next_back().unwrap();
        if WORD_PUNCT.contains(last) {
            out.push(w[..w.len() - last.len_utf8()].to_string());
            out.push(last.to_string());
        } else if WORD_PUNCT.contains(first) {
            out.push(first.to_string());
            out.push(chars.as_str().to_string());
        } else {
            out.push(w.to_string());
        }
    }
    out
}

fn counts<T: Hash + Eq>(items: &[T], n: usize) -> HashMap<&[T], u64> {
    let mut m = HashMap::new();
    if items.len() >= n {
        for g in items.windows(n) {
            *m.entry(g).or_insert(0) += 1;
        }
    }
    m
}

fn match_stats<T: Hash + Eq>(hyp: &[T], reference: &[T], n: usize) -> [u64; 3] {
    let h = counts(hyp, n);
    let r = counts(reference, n);
    let matches = h
        .iter()
        .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    [h.values().sum(), r.values().sum(), matches]
}

pub fn chrf_stats(hyp: &str, reference: &str, params: ChrfParams) -> ChrfStats {
    let hc: Vec<char> = hyp.chars().filter(|c| !c.is_whitespace()).collect();
    let rc: Vec<char> = reference.chars().filter(|c| !c.is_whitespace()).collect();
    let mut stats = Vec::with_capacity(params.orders());
    for n in 1..=params.char_order {
        stats.push(match_stats(&hc, &rc, n));
    }
    let hw = words(hyp);
    let rw = words(reference);
    for n in 1..=params.word_order {
        stats.push(match_stats(&hw, &rw, n));
    }
    ChrfStats(stats)
}

fn f_beta(precision: f64, recall: f64, beta: f64) -> f64 {
    let b2 = beta * beta;
    if precision + recall == 0.0 {
        0.0
    } else {
        (1.0 + b2) * precision * recall / (b2 * precision + recall)
    }
}

/// Average precision and recall over the orders both sides have n-grams
/// for, then F-beta of the averages.
fn averaged_pr(stats: &[[u64; 3]]) -> (f64, f64) {
    let mut p = 0.0;
    let mut r = 0.0;
    let mut eff = 0;
    for &[n_hyp, n_ref, n_match] in stats {
        if n_hyp > 0 && n_ref > 0 {
            p += n_match as f64 / n_hyp as f64;
            r += n_match as f64 / n_ref as f64;
            eff += 1;
        }
    }
    if eff == 0 {
        (0.0, 0.0)
    } else {
        (p / eff as f64, r / eff as f64)
    }
}

pub fn chrf_from_stats(stats: &ChrfStats, params: ChrfParams) -> MetricScore {
    let (p, r) = averaged_pr(&stats.0);
    let value = 100.0 * f_beta(p, r, params.beta);
    let (cp, cr) = averaged_pr(&stats.0[..params.char_order]);
    let (wp, wr) = averaged_pr(&stats.0[params.char_order..]);
    MetricScore::new(
        value,
        ScoreDetail::Chrf {
            precision: p,
            recall: r,
            char_f: f_beta(cp, cr, params.beta),
            word_f: f_beta(wp, wr, params.beta),
        },
    )
}

pub fn chrf_with(hyp: &str, reference: &str, params: ChrfParams) -> MetricScore {
    chrf_from_stats(&chrf_stats(hyp, reference, params), params)
}

/// Sentence-level chrF++ (character 6-grams + word bigrams, beta 2).
pub fn chrf_pp(hyp: &str, reference: &str) -> MetricScore {
    chrf_with(hyp, reference, ChrfParams::PLUS_PLUS)
}

/// Corpus chrF++ from statistics summed over sentences.
pub fn corpus_chrf_pp(hyps: &[String], refs: &[String]) -> Result<MetricScore> {
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "corpus chrF++: {} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    let params = ChrfParams::PLUS_PLUS;
    let mut pooled = ChrfStats::zeros(params.orders());
    for (h, r) in hyps.iter().zip(refs) {
        pooled.add(&chrf_stats(h, r, params));
    }
    Ok(chrf_from_stats(&pooled, params))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn word_punctuation_split() {
        assert_eq!(words("(hi) there"), ["(hi", ")", "there"]);
        assert_eq!(words("Hello, world!"), ["Hello", ",", "world", "!"]);
        assert_eq!(words("\"quoted"), ["\"", "quoted"]);
        assert_eq!(words("."), ["."]);
    }

    #[test]
    fn identity_and_disjoint() {
        assert_eq!(chrf_pp("the cat", "the cat").value, 100.0);
        assert_eq!(chrf_pp("abc", "xyz").value, 0.0);
        assert_eq!(chrf_pp("", "").value, 0.0);
    }

    #[test]
    fn beta_one_is_symmetric() {
        let p = ChrfParams { beta: 1.0, ..ChrfParams::PLUS_PLUS };
        let a = chrf_with("the quick brown fox", "a quick brown dog jumps", p).value;
        let b = chrf_with("a quick brown dog jumps", "the quick brown fox", p).value;
        assert!((a - b).abs() < 1e-12);
    }
}
