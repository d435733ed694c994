use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::{MetricScore, ScoreDetail, TokenSequence};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// Each zero-match order `n` gets precision `1 / (2^k * total_n)`, where
    /// `k` counts the zero orders seen so far (mteval "exp" smoothing).
    #[default]
    ExpFloor,
    None,
}

/// Sufficient statistics for BLEU. Corpus scores sum these over sentences.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BleuStats {
    pub matches: [u64; MAX_ORDER],
    pub totals: [u64; MAX_ORDER],
    pub hyp_len: u64,
    pub ref_len: u64,
}

impl std::ops::AddAssign for BleuStats {
    fn add_assign(&mut self, rhs: Self) {
        for n in 0..MAX_ORDER {
            self.matches[n] += rhs.matches[n];
            self.totals[n] += rhs.totals[n];
        }
        self.hyp_len += rhs.hyp_len;
        self.ref_len += rhs.ref_len;
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Closest reference length; ties go to the shorter reference.
fn closest_ref_len(hyp_len: usize, refs: &[TokenSequence]) -> usize {
    let mut best: Option<(usize, usize)> = None;
    for r in refs {
        let len = r.len();
        let diff = hyp_len.abs_diff(len);
        best = match best {
            None => Some((diff, len)),
            Some((d, l)) if diff < d || (diff == d && len < l) => Some((diff, len)),
            keep => keep,
        };
    }
    best.map(|(_, l)| l).unwrap_or(0)
}

pub fn bleu_stats(hyp: &TokenSequence, refs: &[TokenSequence]) -> Result<BleuStats> {
    if refs.is_empty() {
        return Err(Error::invalid("BLEU needs at least one reference"));
    }
    let h = hyp.tokens();
    let mut stats = BleuStats {
        hyp_len: h.len() as u64,
        ref_len: closest_ref_len(h.len(), refs) as u64,
        ..Default::default()
    };
    for n in 1..=MAX_ORDER {
        let hyp_counts = ngram_counts(h, n);
        let mut max_ref: HashMap<&[String], u64> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r.tokens(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let mut matched = 0;
        let mut total = 0;
        for (g, c) in hyp_counts {
            total += c;
            matched += c.min(max_ref.get(g).copied().unwrap_or(0));
        }
        stats.matches[n - 1] = matched;
        stats.totals[n - 1] = total;
    }
    Ok(stats)
}

/// BLEU from sufficient statistics.
///
/// `effective_order` truncates the geometric mean at the highest order the
/// hypothesis actually has n-grams for (used for single sentences).
pub fn bleu_from_stats(stats: &BleuStats, smoothing: Smoothing, effective_order: bool) -> MetricScore {
    let (sys, reference) = (stats.hyp_len as f64, stats.ref_len as f64);
    let bp = if sys < reference {
        if sys > 0.0 {
            (1.0 - reference / sys).exp()
        } else {
            0.0
        }
    } else {
        1.0
    };

    let mut precisions = [0.0; MAX_ORDER];
    let detail = |precisions: [f64; MAX_ORDER]| ScoreDetail::Bleu {
        precisions,
        brevity_penalty: bp,
        hyp_len: stats.hyp_len,
        ref_len: stats.ref_len,
    };
    if stats.matches.iter().all(|&m| m == 0) {
        return MetricScore::new(0.0, detail(precisions));
    }

    let mut smooth = 1.0;
    let mut eff = MAX_ORDER;
    for n in 0..MAX_ORDER {
        let total = stats.totals[n];
        if total == 0 {
            break;
        }
        if effective_order {
            eff = n + 1;
        }
        if stats.matches[n] == 0 {
            if smoothing == Smoothing::ExpFloor {
                smooth *= 2.0;
                precisions[n] = 1.0 / (smooth * total as f64);
            }
        } else {
            precisions[n] = stats.matches[n] as f64 / total as f64;
        }
    }

    let used = &precisions[..eff];
    let value = if used.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let mean_log = used.iter().map(|p| p.ln()).sum::<f64>() / eff as f64;
        100.0 * bp * mean_log.exp()
    };
    MetricScore::new(value, detail(precisions))
}

pub fn sentence_bleu(hyp: &TokenSequence, refs: &[TokenSequence], smoothing: Smoothing) -> Result<MetricScore> {
    let stats = bleu_stats(hyp, refs)?;
    Ok(bleu_from_stats(&stats, smoothing, true))
}

/// Corpus BLEU over pooled statistics, unsmoothed.
pub fn corpus_bleu(hyps: &[TokenSequence], refs: &[Vec<TokenSequence>]) -> Result<MetricScore> {
    if hyps.is_empty() {
        return Err(Error::invalid("corpus BLEU over an empty corpus"));
    }
    if hyps.len() != refs.len() {
        return Err(Error::invalid(format!(
            "corpus BLEU: {} hypotheses but {} reference sets",
            hyps.len(),
            refs.len()
        )));
    }
    let mut pooled = BleuStats::default();
    for (h, r) in hyps.iter().zip(refs) {
        pooled += bleu_stats(h, r)?;
    }
    Ok(bleu_from_stats(&pooled, Smoothing::None, false))
}
