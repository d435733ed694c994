use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::Serialize;

use super::check_k;
use crate::backends::{combinations, CostLedger, Pool};
use crate::corpus::{CandidateCache, CorpusEntry, ParallelCorpus};
use crate::dqn::greedy_select;
use crate::embedder::StateEncoder;
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, sentence_bleu, sentence_reward, tokenize, Smoothing};
use crate::qnet::QNetwork;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

/// Largest number of subsets the brute-force oracle will enumerate.
pub const MAX_ORACLE_SUBSETS: u128 = 10_000;

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut c: u128 = 1;
    for i in 0..k {
        c = match c.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    c
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    /// Best subset, ascending system ids.
    pub best: Vec<usize>,
    pub best_score: f64,
    /// Every subset in lexicographic order with its fused reward.
    pub scores: Vec<(Vec<usize>, f64)>,
}

/// Translate once with every system, then fuse and score every K-subset.
/// Ties go to the lexicographically first subset.
pub fn brute_force_oracle(entry: &CorpusEntry, pool: &Pool, k: usize, ledger: &CostLedger) -> Result<OracleResult> {
    check_k(k, pool)?;
    let count = binomial(pool.size(), k);
    if count > MAX_ORACLE_SUBSETS {
        return Err(Error::invalid(format!(
            "C({}, {k}) = {count} subsets exceeds the oracle limit of {MAX_ORACLE_SUBSETS}",
            pool.size()
        )));
    }
    let run = || -> Result<OracleResult> {
        let all: Vec<usize> = (0..pool.size()).collect();
        let outs = pool.translate_many(&all, entry.id, &entry.source, ledger)?;
        let mut scores = Vec::with_capacity(count as usize);
        let mut best = 0;
        for (i, subset) in combinations(pool.size(), k).into_iter().enumerate() {
            let cands: Vec<String> = subset.iter().map(|&s| outs[s].clone()).collect();
            let fused = pool.fuse(entry.id, &entry.source, &cands, ledger)?;
            let r = sentence_reward(&fused, &entry.reference);
            if r > scores.get(best).map_or(f64::NEG_INFINITY, |s: &(Vec<usize>, f64)| s.1) {
                best = i;
            }
            scores.push((subset, r));
        }
        Ok(OracleResult {
            best: scores[best].0.clone(),
            best_score: scores[best].1,
            scores,
        })
    };
    run().map_err(|e| e.in_sentence(entry.id))
}

/// How subsets are chosen for a histogram.
#[derive(Debug, Clone)]
pub enum Selector<'a, T> {
    Oracle,
    Dqn { qnet: &'a QNetwork<T>, encoder: &'a StateEncoder },
    /// Uniform K-subset per sentence from `SeededRng::stream(seed, id)`.
    Random { seed: u64 },
    /// Always the first K systems of a fixed ranking.
    FixedRank(Vec<usize>),
}

/// Counts per K-subset, subsets in lexicographic order.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub subsets: Vec<Vec<usize>>,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Number of subsets chosen at least once.
    pub fn support(&self) -> usize {
        self.counts.iter().filter(|&&c| c > 0).count()
    }

    pub fn max_count(&self) -> usize {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    /// Pearson χ² statistic against the uniform distribution.
    pub fn chi_square_uniform(&self) -> f64 {
        let expected = self.total() as f64 / self.counts.len() as f64;
        self.counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum()
    }
}

pub fn subset_label(s: &[usize]) -> String {
    s.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// Which K-subset `selector` picks for each sentence, tallied.
pub fn triplet_histogram<T: Scalar>(
    corpus: &ParallelCorpus,
    selector: &Selector<'_, T>,
    pool: &Pool,
    k: usize,
    ledger: &CostLedger,
) -> Result<Histogram> {
    check_k(k, pool)?;
    let l = pool.size();
    if let Selector::FixedRank(r) = selector {
        let mut sorted = r.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if r.len() != sorted.len() || r.len() < k || r.iter().any(|&s| s >= l) {
            return Err(Error::invalid(format!("fixed ranking {r:?} is not a ranking of at least {k} of {l} systems")));
        }
    }
    let subsets = combinations(l, k);
    let chosen = corpus
        .entries
        .par_iter()
        .map(|e| -> Result<Vec<usize>> {
            let mut s = match selector {
                Selector::Oracle => brute_force_oracle(e, pool, k, ledger)?.best,
                Selector::Dqn { qnet, encoder } => {
                    let state = encoder.encode(e.id, &e.source, ledger).map_err(|err| err.in_sentence(e.id))?;
                    greedy_select(*qnet, &state, k)?
                }
                Selector::Random { seed } => SeededRng::stream(*seed, e.id as u64).choose_distinct(l, k),
                Selector::FixedRank(r) => r[..k].to_vec(),
            };
            s.sort_unstable();
            Ok(s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0; subsets.len()];
    for s in chosen {
        let i = subsets.binary_search(&s).expect("chosen subset is a K-subset");
        counts[i] += 1;
    }
    Ok(Histogram { subsets, counts })
}

/// Two columns, `subset` (ids joined by `-`) and `count`, with a header.
pub fn write_histogram_tsv(path: &Path, h: &Histogram) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(w, "subset\tcount").map_err(io)?;
    for (s, c) in h.subsets.iter().zip(&h.counts) {
        writeln!(w, "{}\t{c}", subset_label(s)).map_err(io)?;
    }
    w.flush().map_err(io)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeRow {
    pub condition: String,
    pub corpus_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProbeReport {
    pub k: usize,
    pub rows: Vec<ProbeRow>,
}

pub const PROBE_REFERENCE_X_K: &str = "reference_x_k";
pub const PROBE_REFERENCE_PLUS_TOP: &str = "reference_plus_top_k_minus_1";

/// Fuse K copies of the reference, and the reference with the K−1 cached
/// candidates of highest sentence BLEU (ties to the lower system id), then
/// report the corpus BLEU of both conditions. The reference is fused as if
/// it were system L, after the candidates in ascending system order.
pub fn degradation_probe(
    corpus: &ParallelCorpus,
    cache: &CandidateCache,
    pool: &Pool,
    k: usize,
    ledger: &CostLedger,
) -> Result<ProbeReport> {
    if k == 0 {
        return Err(Error::invalid("K must be positive"));
    }
    if corpus.is_empty() {
        return Err(Error::invalid("probe corpus is empty"));
    }
    let pairs = corpus
        .entries
        .par_iter()
        .map(|e| -> Result<(String, String)> {
            let run = || -> Result<(String, String)> {
                let copies = vec![e.reference.clone(); k];
                let a = pool.fuse(e.id, &e.source, &copies, ledger)?;
                let refs = [tokenize(&e.reference)];
                let mut scored = cache
                    .candidates(e.id)
                    .into_iter()
                    .map(|c| Ok((sentence_bleu(&tokenize(&c.text), &refs, Smoothing::ExpFloor)?.value, c.system_id, c.text)))
                    .collect::<Result<Vec<_>>>()?;
                if scored.len() < k - 1 {
                    return Err(Error::invalid(format!("{} cached candidates, need {}", scored.len(), k - 1)));
                }
                scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
                scored.truncate(k - 1);
                scored.sort_by_key(|c| c.1);
                let mut cands: Vec<String> = scored.into_iter().map(|c| c.2).collect();
                cands.push(e.reference.clone());
                let b = pool.fuse(e.id, &e.source, &cands, ledger)?;
                Ok((a, b))
            };
            run().map_err(|err| err.in_sentence(e.id))
        })
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<_> = corpus.entries.iter().map(|e| vec![tokenize(&e.reference)]).collect();
    let a: Vec<_> = pairs.iter().map(|p| tokenize(&p.0)).collect();
    let b: Vec<_> = pairs.iter().map(|p| tokenize(&p.1)).collect();
    Ok(ProbeReport {
        k,
        rows: vec![
            ProbeRow {
                condition: PROBE_REFERENCE_X_K.into(),
                corpus_bleu: corpus_bleu(&a, &refs)?.value,
            },
            ProbeRow {
                condition: PROBE_REFERENCE_PLUS_TOP.into(),
                corpus_bleu: corpus_bleu(&b, &refs)?.value,
            },
        ],
    })
}

pub fn write_probe_tsv(path: &Path, report: &ProbeReport) -> Result<()> {
    let mut body = String::from("condition\tcorpus_bleu\n");
    for r in &report.rows {
        body.push_str(&format!("{}\t{:.4}\n", r.condition, r.corpus_bleu));
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}
