//! End-to-end translation strategies, oracle analyses and evaluation.
//!
//! Candidates always reach the fuser in ascending system order, so the
//! fused output depends only on which systems were chosen, never on how
//! they were ranked.

mod evaluate;
mod oracle;

use crate::backends::{CostLedger, Pool, Role};
use crate::ccb::{apply_ccb, CcbAuditRecord, CcbConfig, CcbEnv, RejectedSet, ScoredCandidate, SelectedSet};
use crate::corpus::{CandidateCache, CorpusEntry, ParallelCorpus};
use crate::dqn::greedy_select;
use crate::embedder::StateEncoder;
use crate::error::{Error, Result};
use crate::qnet::QNetwork;
use crate::reward_model::{rm_score, RmParams};
use crate::scalar::Scalar;

pub use evaluate::{
    evaluate, write_reports, EvalContext, EvalReport, EvalTimings, Method, SentenceRecord, ALL_METHOD_NAMES,
};
pub use oracle::{
    binomial, brute_force_oracle, degradation_probe, triplet_histogram, write_histogram_tsv, write_probe_tsv, Histogram,
    OracleResult, ProbeReport, ProbeRow, Selector, MAX_ORACLE_SUBSETS,
};

/// What one sentence cost and how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub sentence_id: usize,
    /// Selected systems, best first by Q-value.
    pub selected: Vec<usize>,
    pub translator_calls: u64,
    pub fuser_calls: u64,
    pub enhancer_calls: u64,
    pub ccb: Vec<CcbAuditRecord>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Translation {
    pub text: String,
    pub audit: Audit,
}

/// Where candidate rewards for the correction block come from.
#[derive(Debug, Clone, Copy)]
pub enum Scorer<'a, T> {
    /// The local linear reward model.
    Linear(&'a RmParams<T>),
    /// The pool's `/score` backend.
    Backend,
}

impl<T: Scalar> Scorer<'_, T> {
    pub fn score(&self, pool: &Pool, id: usize, source: &str, candidate: &str, ledger: &CostLedger) -> Result<f64> {
        match self {
            Scorer::Linear(p) => Ok(rm_score(*p, source, candidate)?.to_f64_lossy()),
            Scorer::Backend => pool.score(id, source, candidate, ledger),
        }
    }
}

fn fuse_ascending(pool: &Pool, entry: &CorpusEntry, mut cands: Vec<(usize, String)>, ledger: &CostLedger) -> Result<String> {
    cands.sort_by_key(|c| c.0);
    let texts: Vec<String> = cands.into_iter().map(|c| c.1).collect();
    pool.fuse(entry.id, &entry.source, &texts, ledger)
}

fn audit_from(sentence_id: usize, selected: Vec<usize>, ledger: &CostLedger, ccb: Vec<CcbAuditRecord>) -> Audit {
    Audit {
        sentence_id,
        selected,
        translator_calls: ledger.sentence_calls(sentence_id, Role::Translator),
        fuser_calls: ledger.sentence_calls(sentence_id, Role::Fuser),
        enhancer_calls: ledger.sentence_calls(sentence_id, Role::Enhancer),
        ccb,
    }
}

/// Greedy top-K by Q, K translations, one fusion. Costs are recorded in
/// `ledger`; the audit holds this sentence's share.
pub fn smartgen_translate<T: Scalar>(
    entry: &CorpusEntry,
    qnet: &QNetwork<T>,
    pool: &Pool,
    encoder: &StateEncoder,
    k: usize,
    ledger: &CostLedger,
) -> Result<Translation> {
    let local = CostLedger::new();
    let run = || -> Result<Translation> {
        let state = encoder.encode(entry.id, &entry.source, &local)?;
        let selected = greedy_select(qnet, &state, k)?;
        let mut systems = selected.clone();
        systems.sort_unstable();
        let texts = pool.translate_many(&systems, entry.id, &entry.source, &local)?;
        let text = fuse_ascending(pool, entry, systems.into_iter().zip(texts).collect(), &local)?;
        Ok(Translation {
            text,
            audit: audit_from(entry.id, selected, &local, Vec::new()),
        })
    };
    let out = run();
    ledger.merge(&local);
    out.map_err(|e| e.in_sentence(entry.id))
}

struct PipelineCcbEnv<'a, T> {
    entry: &'a CorpusEntry,
    pool: &'a Pool,
    scorer: Scorer<'a, T>,
    selected: &'a [usize],
    ledger: &'a CostLedger,
}

impl<T: Scalar> CcbEnv for PipelineCcbEnv<'_, T> {
    fn rejected(&mut self) -> Result<RejectedSet> {
        let others: Vec<usize> = (0..self.pool.size()).filter(|s| !self.selected.contains(s)).collect();
        let texts = self.pool.translate_many(&others, self.entry.id, &self.entry.source, self.ledger)?;
        others
            .into_iter()
            .zip(texts)
            .map(|(system_id, text)| {
                let reward = self.scorer.score(self.pool, self.entry.id, &self.entry.source, &text, self.ledger)?;
                Ok(ScoredCandidate { system_id, text, reward })
            })
            .collect()
    }

    fn enhance(&mut self, prompt: &str) -> Result<String> {
        self.pool.enhance(self.entry.id, prompt, self.ledger)
    }

    fn rescore(&mut self, text: &str) -> Result<f64> {
        self.scorer.score(self.pool, self.entry.id, &self.entry.source, text, self.ledger)
    }
}

/// SmartGen followed by the correction block: the K candidates are scored,
/// sorted by reward, corrected, and fused. Rejected candidates are only
/// translated once a gate fires (when `ccb.lazy_rejected` is set).
pub fn smartgen_pp_translate<T: Scalar>(
    entry: &CorpusEntry,
    qnet: &QNetwork<T>,
    scorer: Scorer<'_, T>,
    pool: &Pool,
    encoder: &StateEncoder,
    k: usize,
    ccb: &CcbConfig,
    ledger: &CostLedger,
) -> Result<Translation> {
    let local = CostLedger::new();
    let run = || -> Result<Translation> {
        let state = encoder.encode(entry.id, &entry.source, &local)?;
        let selected = greedy_select(qnet, &state, k)?;
        let mut systems = selected.clone();
        systems.sort_unstable();
        let texts = pool.translate_many(&systems, entry.id, &entry.source, &local)?;
        let scored = systems
            .iter()
            .zip(texts)
            .map(|(&system_id, text)| {
                let reward = scorer.score(pool, entry.id, &entry.source, &text, &local)?;
                Ok(ScoredCandidate { system_id, text, reward })
            })
            .collect::<Result<Vec<_>>>()?;
        let sel = SelectedSet::from_unsorted(scored)?;
        let mut env = PipelineCcbEnv {
            entry,
            pool,
            scorer,
            selected: &selected,
            ledger: &local,
        };
        let outcome = apply_ccb(entry.id, &entry.source, &sel, ccb, pool.langs(), &mut env)?;
        let cands = outcome.candidates.into_iter().map(|c| (c.system_id, c.text)).collect();
        let text = fuse_ascending(pool, entry, cands, &local)?;
        Ok(Translation {
            text,
            audit: audit_from(entry.id, selected, &local, outcome.audit),
        })
    };
    let out = run();
    ledger.merge(&local);
    out.map_err(|e| e.in_sentence(entry.id))
}

/// Translate every sentence with every system.
pub fn generate_candidates(corpus: &ParallelCorpus, pool: &Pool, ledger: &CostLedger) -> Result<CandidateCache> {
    use rayon::prelude::*;
    let all: Vec<usize> = (0..pool.size()).collect();
    let rows = corpus
        .entries
        .par_iter()
        .map(|e| {
            pool.translate_many(&all, e.id, &e.source, ledger)
                .map_err(|err| err.in_sentence(e.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cache = CandidateCache::new(pool.size());
    for (e, texts) in corpus.entries.iter().zip(rows) {
        for (sys, t) in texts.into_iter().enumerate() {
            cache.insert(e.id, sys, t)?;
        }
    }
    Ok(cache)
}

pub(crate) fn check_k(k: usize, pool: &Pool) -> Result<()> {
    if k == 0 || k > pool.size() {
        return Err(Error::invalid(format!("K = {k} must lie in 1..={}", pool.size())));
    }
    Ok(())
}
