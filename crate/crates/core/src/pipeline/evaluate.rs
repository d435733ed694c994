use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::Serialize;

use super::oracle::{write_histogram_tsv, Histogram};
use super::{check_k, fuse_ascending, smartgen_pp_translate, smartgen_translate, Scorer};
use crate::backends::{combinations, ledger_report, CostLedger, LedgerSummary, Pool, Role};
use crate::ccb::{write_audit_jsonl, CcbAuditRecord, CcbConfig};
use crate::corpus::{CorpusEntry, ParallelCorpus};
use crate::dqn::greedy_select;
use crate::embedder::StateEncoder;
use crate::error::{Error, Result};
use crate::metrics::{corpus_bleu, corpus_chrf_pp, sentence_bleu, tokenize, Smoothing};
use crate::qnet::QNetwork;
use crate::rng::SeededRng;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    /// One system, no fusion.
    Single(usize),
    /// K uniformly random systems, fused.
    RandomK,
    /// The K candidates with the best sentence BLEU against the reference,
    /// fused. Needs every translation and the reference.
    OracleTopKBleu,
    /// The single system with the highest Q-value, no fusion.
    DqnBestSingle,
    SmartGen,
    SmartGenPlusPlus,
    /// All L candidates fused.
    FullPoolFusion,
    /// Cost stand-in for a trained reranker: all L translations, a fixed
    /// ranking latency, and the candidate with the best reward score.
    Ranker,
}

pub const ALL_METHOD_NAMES: &[&str] = &[
    "single-N",
    "random-k",
    "oracle-topk-bleu",
    "dqn-best-single",
    "smartgen",
    "smartgen++",
    "full-pool-fusion",
    "ranker",
];

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "random-k" => Method::RandomK,
            "oracle-topk-bleu" => Method::OracleTopKBleu,
            "dqn-best-single" => Method::DqnBestSingle,
            "smartgen" => Method::SmartGen,
            "smartgen++" => Method::SmartGenPlusPlus,
            "full-pool-fusion" => Method::FullPoolFusion,
            "ranker" => Method::Ranker,
            other => match other.strip_prefix("single-").map(str::parse) {
                Some(Ok(n)) => Method::Single(n),
                _ => {
                    return Err(Error::invalid(format!(
                        "unknown method `{other}`; expected one of {}",
                        ALL_METHOD_NAMES.join(", ")
                    )))
                }
            },
        })
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Single(n) => write!(f, "single-{n}"),
            Method::RandomK => f.write_str("random-k"),
            Method::OracleTopKBleu => f.write_str("oracle-topk-bleu"),
            Method::DqnBestSingle => f.write_str("dqn-best-single"),
            Method::SmartGen => f.write_str("smartgen"),
            Method::SmartGenPlusPlus => f.write_str("smartgen++"),
            Method::FullPoolFusion => f.write_str("full-pool-fusion"),
            Method::Ranker => f.write_str("ranker"),
        }
    }
}

impl Method {
    fn selects_subsets(self) -> bool {
        matches!(
            self,
            Method::RandomK | Method::OracleTopKBleu | Method::SmartGen | Method::SmartGenPlusPlus
        )
    }
}

/// Everything the methods may need.
pub struct EvalContext<'a, T> {
    pub pool: &'a Pool,
    pub encoder: &'a StateEncoder,
    pub qnet: Option<&'a QNetwork<T>>,
    pub scorer: Option<Scorer<'a, T>>,
    pub k: usize,
    pub ccb: CcbConfig,
    pub seed: u64,
    pub ranker_latency_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SentenceRecord {
    pub id: usize,
    pub hypothesis: String,
    /// Smoothed sentence BLEU, 0..100.
    pub sentence_bleu: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub selected: Option<Vec<usize>>,
    pub translator_calls: u64,
    pub fuser_calls: u64,
    pub enhancer_calls: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub method: String,
    pub corpus_bleu: f64,
    pub chrf_pp: f64,
    /// Slot for a metric computed outside this crate; always empty here.
    pub external_metric: Option<f64>,
    pub cost: LedgerSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub triplet_histogram: Option<Histogram>,
    pub sentences: Vec<SentenceRecord>,
    /// Carries latencies, so it is written to its own file.
    #[serde(skip)]
    pub ccb_audit: Vec<CcbAuditRecord>,
}

/// Wall-clock costs, kept apart from the reproducible reports.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EvalTimings {
    pub elapsed_ms: BTreeMap<String, f64>,
    pub backend_wall_ms: BTreeMap<String, BTreeMap<Role, f64>>,
}

struct Produced {
    text: String,
    selected: Option<Vec<usize>>,
    ccb: Vec<CcbAuditRecord>,
}

fn need<'b, X>(x: Option<&'b X>, what: &str, m: Method) -> Result<&'b X> {
    x.ok_or_else(|| Error::invalid(format!("method {m} needs {what}")))
}

fn run_one<T: Scalar>(m: Method, e: &CorpusEntry, ctx: &EvalContext<'_, T>, ledger: &CostLedger) -> Result<Produced> {
    let pool = ctx.pool;
    let l = pool.size();
    let all: Vec<usize> = (0..l).collect();
    let fused = |systems: Vec<usize>| -> Result<Produced> {
        let texts = pool.translate_many(&systems, e.id, &e.source, ledger)?;
        let text = fuse_ascending(pool, e, systems.iter().copied().zip(texts).collect(), ledger)?;
        Ok(Produced {
            text,
            selected: Some(systems),
            ccb: Vec::new(),
        })
    };
    let out = match m {
        Method::Single(n) => Produced {
            text: pool.translate(n, e.id, &e.source, ledger)?,
            selected: Some(vec![n]),
            ccb: Vec::new(),
        },
        Method::RandomK => {
            let mut s = SeededRng::stream(ctx.seed, e.id as u64).choose_distinct(l, ctx.k);
            s.sort_unstable();
            fused(s)?
        }
        Method::OracleTopKBleu => {
            let texts = pool.translate_many(&all, e.id, &e.source, ledger)?;
            let refs = [tokenize(&e.reference)];
            let mut scored = texts
                .iter()
                .enumerate()
                .map(|(i, t)| Ok((sentence_bleu(&tokenize(t), &refs, Smoothing::ExpFloor)?.value, i)))
                .collect::<Result<Vec<_>>>()?;
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let mut s: Vec<usize> = scored[..ctx.k].iter().map(|x| x.1).collect();
            s.sort_unstable();
            let cands = s.iter().map(|&i| (i, texts[i].clone())).collect();
            Produced {
                text: fuse_ascending(pool, e, cands, ledger)?,
                selected: Some(s),
                ccb: Vec::new(),
            }
        }
        Method::DqnBestSingle => {
            let q = need(ctx.qnet, "a Q-network", m)?;
            let state = ctx.encoder.encode(e.id, &e.source, ledger)?;
            let best = greedy_select(q, &state, 1)?[0];
            Produced {
                text: pool.translate(best, e.id, &e.source, ledger)?,
                selected: Some(vec![best]),
                ccb: Vec::new(),
            }
        }
        Method::SmartGen => {
            let q = need(ctx.qnet, "a Q-network", m)?;
            let t = smartgen_translate(e, q, pool, ctx.encoder, ctx.k, ledger)?;
            let mut s = t.audit.selected;
            s.sort_unstable();
            Produced {
                text: t.text,
                selected: Some(s),
                ccb: Vec::new(),
            }
        }
        Method::SmartGenPlusPlus => {
            let q = need(ctx.qnet, "a Q-network", m)?;
            let scorer = *need(ctx.scorer.as_ref(), "a reward scorer", m)?;
            let t = smartgen_pp_translate(e, q, scorer, pool, ctx.encoder, ctx.k, &ctx.ccb, ledger)?;
            let mut s = t.audit.selected;
            s.sort_unstable();
            Produced {
                text: t.text,
                selected: Some(s),
                ccb: t.audit.ccb,
            }
        }
        Method::FullPoolFusion => fused(all)?,
        Method::Ranker => {
            let scorer = *need(ctx.scorer.as_ref(), "a reward scorer", m)?;
            let texts = pool.translate_many(&all, e.id, &e.source, ledger)?;
            ledger.record(
                "ranker-stand-in",
                Role::Ranker,
                Duration::from_secs_f64(ctx.ranker_latency_ms.max(0.0) / 1e3),
                Some(e.id),
            );
            let mut best = (f64::NEG_INFINITY, 0);
            for (i, t) in texts.iter().enumerate() {
                let s = scorer.score(pool, e.id, &e.source, t, ledger)?;
                if s > best.0 {
                    best = (s, i);
                }
            }
            Produced {
                text: texts[best.1].clone(),
                selected: Some(vec![best.1]),
                ccb: Vec::new(),
            }
        }
    };
    Ok(out)
}

/// Run every method over the corpus. Sentences are processed in parallel,
/// each with its own ledger; reports are assembled in corpus order.
pub fn evaluate<T: Scalar>(
    corpus: &ParallelCorpus,
    methods: &[Method],
    ctx: &EvalContext<'_, T>,
) -> Result<(Vec<EvalReport>, EvalTimings)> {
    if corpus.is_empty() {
        return Err(Error::invalid("evaluation corpus is empty"));
    }
    let l = ctx.pool.size();
    let mut reports = Vec::with_capacity(methods.len());
    let mut timings = EvalTimings::default();
    for &m in methods {
        if let Method::Single(n) = m {
            if n >= l {
                return Err(Error::invalid(format!("method {m}: pool has only {l} systems")));
            }
        }
        if m.selects_subsets() {
            check_k(ctx.k, ctx.pool)?;
        }
        let started = Instant::now();
        let rows = corpus
            .entries
            .par_iter()
            .map(|e| {
                let local = CostLedger::new();
                let p = run_one(m, e, ctx, &local).map_err(|err| err.in_sentence(e.id))?;
                Ok((p, local))
            })
            .collect::<Result<Vec<_>>>()?;
        let ledger = CostLedger::new();
        let mut sentences = Vec::with_capacity(rows.len());
        let mut audit = Vec::new();
        for (e, (p, local)) in corpus.entries.iter().zip(rows) {
            ledger.merge(&local);
            let bleu = sentence_bleu(&tokenize(&p.text), &[tokenize(&e.reference)], Smoothing::ExpFloor)?.value;
            sentences.push(SentenceRecord {
                id: e.id,
                hypothesis: p.text,
                sentence_bleu: bleu,
                selected: p.selected,
                translator_calls: local.sentence_calls(e.id, Role::Translator),
                fuser_calls: local.sentence_calls(e.id, Role::Fuser),
                enhancer_calls: local.sentence_calls(e.id, Role::Enhancer),
            });
            audit.extend(p.ccb);
        }
        let hyps: Vec<_> = sentences.iter().map(|s| tokenize(&s.hypothesis)).collect();
        let refs: Vec<_> = corpus.entries.iter().map(|e| vec![tokenize(&e.reference)]).collect();
        let hyp_text: Vec<String> = sentences.iter().map(|s| s.hypothesis.clone()).collect();
        let ref_text: Vec<String> = corpus.entries.iter().map(|e| e.reference.clone()).collect();
        let histogram = if m.selects_subsets() {
            let subsets = combinations(l, ctx.k);
            let mut counts = vec![0; subsets.len()];
            for s in &sentences {
                if let Some(i) = s.selected.as_ref().and_then(|sel| subsets.binary_search(sel).ok()) {
                    counts[i] += 1;
                }
            }
            Some(Histogram { subsets, counts })
        } else {
            None
        };
        let name = m.to_string();
        timings
            .elapsed_ms
            .insert(name.clone(), started.elapsed().as_secs_f64() * 1e3);
        let summary = ledger_report(&ledger, l);
        timings.backend_wall_ms.insert(
            name.clone(),
            summary
                .per_role
                .iter()
                .map(|(r, t)| (*r, t.wall.as_secs_f64() * 1e3))
                .collect(),
        );
        reports.push(EvalReport {
            method: name,
            corpus_bleu: corpus_bleu(&hyps, &refs)?.value,
            chrf_pp: corpus_chrf_pp(&hyp_text, &ref_text)?.value,
            external_metric: None,
            cost: summary,
            triplet_histogram: histogram,
            sentences,
            ccb_audit: audit,
        });
    }
    Ok((reports, timings))
}

fn file_safe(name: &str) -> String {
    name.replace('+', "p")
}

/// Write `report.json`, `summary.csv`, `scatter.tsv`, one
/// `histogram_<method>.tsv` per selecting method, `ccb_audit.jsonl` and
/// `timings.json` into `dir`. Everything except the last two is
/// byte-reproducible for deterministic backends.
pub fn write_reports(dir: &Path, reports: &[EvalReport], timings: &EvalTimings) -> Result<()> {
    let write = |name: &str, body: String| {
        let p = dir.join(name);
        std::fs::write(&p, body).map_err(|e| Error::io(&p, e))
    };
    write("report.json", to_pretty(&reports)?)?;
    let mut csv = String::from("method,corpus_bleu,chrf_pp,translator_calls,translator_calls_per_sentence,call_ratio_vs_full_pool\n");
    let mut scatter = String::from("method\tcorpus_bleu\ttranslator_calls_per_sentence\n");
    for r in reports {
        let calls = r.cost.per_role.get(&Role::Translator).map_or(0, |t| t.calls);
        csv.push_str(&format!(
            "{},{:.4},{:.4},{},{:.4},{:.4}\n",
            r.method, r.corpus_bleu, r.chrf_pp, calls, r.cost.translator_calls_per_sentence, r.cost.call_ratio_vs_full_pool
        ));
        scatter.push_str(&format!(
            "{}\t{:.4}\t{:.4}\n",
            r.method, r.corpus_bleu, r.cost.translator_calls_per_sentence
        ));
        if let Some(h) = &r.triplet_histogram {
            write_histogram_tsv(&dir.join(format!("histogram_{}.tsv", file_safe(&r.method))), h)?;
        }
    }
    write("summary.csv", csv)?;
    write("scatter.tsv", scatter)?;
    let audit: Vec<CcbAuditRecord> = reports.iter().flat_map(|r| r.ccb_audit.clone()).collect();
    write_audit_jsonl(&dir.join("ccb_audit.jsonl"), &audit)?;
    write("timings.json", to_pretty(timings)?)
}

fn to_pretty<V: Serialize + ?Sized>(v: &V) -> Result<String> {
    serde_json::to_string_pretty(v).map_err(|e| Error::Format(e.to_string()))
}
