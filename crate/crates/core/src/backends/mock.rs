use std::collections::HashMap;
use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;

use super::planted::{PlantedTranslator, PlantedWorld};
use super::{Backend, Pool, Request, Response, Role};
use crate::ccb::parse_enhancer_prompt;
use crate::corpus::ParallelCorpus;
use crate::embedder::hash_embed;
use crate::error::{Error, Result};
use crate::metrics::sentence_reward;
use crate::rng::{mix64, SeededRng};

/// In-process backend. Returning `Err` maps to a rejected request.
pub trait MockHandler: Send + Sync {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String>;
}

impl<F> MockHandler for F
where
    F: Fn(&Request) -> std::result::Result<Response, String> + Send + Sync,
{
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        self(req)
    }
}

pub(crate) fn text_hash(s: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(s.as_bytes());
    h.finish()
}

fn translate_source(req: &Request) -> std::result::Result<&str, String> {
    match req {
        Request::Translate { source, .. } => Ok(source),
        other => Err(format!("translator cannot serve {} requests", other.role())),
    }
}

/// Looks up references by source text.
pub type ReferenceLookup = Arc<dyn Fn(&str) -> Option<String> + Send + Sync>;

fn corpus_lookup(corpus: &ParallelCorpus) -> ReferenceLookup {
    let map: HashMap<String, String> = corpus
        .entries
        .iter()
        .map(|e| (e.source.clone(), e.reference.clone()))
        .collect();
    Arc::new(move |s: &str| map.get(s).cloned())
}

/// Exact table lookup; unknown sources are copied through.
pub struct FixedTableTranslator {
    table: HashMap<String, String>,
}

impl FixedTableTranslator {
    pub fn new(table: HashMap<String, String>) -> Self {
        Self { table }
    }
}

impl MockHandler for FixedTableTranslator {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        let src = translate_source(req)?;
        Ok(Response::Translation(self.table.get(src).cloned().unwrap_or_else(|| src.to_owned())))
    }
}

/// The reference with each token dropped independently with probability
/// `dropout`. Draws depend only on (seed, system, source).
pub struct NoisyReferenceTranslator {
    lookup: ReferenceLookup,
    dropout: f64,
    seed: u64,
    system: usize,
}

impl NoisyReferenceTranslator {
    pub fn new(lookup: ReferenceLookup, dropout: f64, seed: u64, system: usize) -> Self {
        Self {
            lookup,
            dropout,
            seed,
            system,
        }
    }
}

impl MockHandler for NoisyReferenceTranslator {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        let src = translate_source(req)?;
        let Some(reference) = (self.lookup)(src) else {
            return Ok(Response::Translation(src.to_owned()));
        };
        let mut rng = SeededRng::stream(self.seed ^ mix64(self.system as u64 + 1), text_hash(src));
        let kept: Vec<&str> = reference
            .split_whitespace()
            .filter(|_| rng.unit() >= self.dropout)
            .collect();
        Ok(Response::Translation(kept.join(" ")))
    }
}

/// Index of the candidate the overlap fuser returns.
///
/// Over whitespace tokens, the majority bag holds each token with the
/// largest count that a strict majority of candidates reach. The winner is
/// the candidate with the largest clipped overlap with that bag; ties go to
/// the earliest candidate. `None` for an empty list.
pub fn overlap_fuse(candidates: &[String]) -> Option<usize> {
    if candidates.is_empty() {
        return None;
    }
    let counts: Vec<HashMap<&str, usize>> = candidates
        .iter()
        .map(|c| {
            let mut m = HashMap::new();
            for t in c.split_whitespace() {
                *m.entry(t).or_insert(0) += 1;
            }
            m
        })
        .collect();
    let need = candidates.len() / 2 + 1;
    let mut majority: HashMap<&str, usize> = HashMap::new();
    for m in &counts {
        for &tok in m.keys() {
            if majority.contains_key(tok) {
                continue;
            }
            let mut cs: Vec<usize> = counts.iter().map(|o| o.get(tok).copied().unwrap_or(0)).collect();
            cs.sort_unstable_by(|a, b| b.cmp(a));
            if cs[need - 1] > 0 {
                majority.insert(tok, cs[need - 1]);
            }
        }
    }
    let overlap = |m: &HashMap<&str, usize>| -> usize {
        m.iter()
            .map(|(t, &c)| c.min(majority.get(t).copied().unwrap_or(0)))
            .sum()
    };
    let mut best = 0;
    let mut best_score = overlap(&counts[0]);
    for (i, m) in counts.iter().enumerate().skip(1) {
        let s = overlap(m);
        if s > best_score {
            best = i;
            best_score = s;
        }
    }
    Some(best)
}

/// Fuser that returns one of its inputs; see [`overlap_fuse`].
pub struct OverlapFuser;

impl MockHandler for OverlapFuser {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        match req {
            Request::Fuse { candidates, .. } => overlap_fuse(candidates)
                .map(|i| Response::Translation(candidates[i].clone()))
                .ok_or_else(|| "no candidates to fuse".to_owned()),
            other => Err(format!("fuser cannot serve {} requests", other.role())),
        }
    }
}

/// Returns the prompt's current candidate unchanged.
pub struct EchoEnhancer;

impl MockHandler for EchoEnhancer {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        match req {
            Request::Enhance { prompt } => parse_enhancer_prompt(prompt)
                .map(|p| Response::Translation(p.candidate))
                .ok_or_else(|| "prompt does not follow the enhancer template".to_owned()),
            other => Err(format!("enhancer cannot serve {} requests", other.role())),
        }
    }
}

/// Returns the reference for the prompt's source sentence: an upper-bound
/// enhancer. Unknown sources fall back to echoing the candidate.
pub struct ReferenceEnhancer {
    lookup: ReferenceLookup,
}

impl ReferenceEnhancer {
    pub fn new(lookup: ReferenceLookup) -> Self {
        Self { lookup }
    }
}

impl MockHandler for ReferenceEnhancer {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        match req {
            Request::Enhance { prompt } => {
                let p = parse_enhancer_prompt(prompt).ok_or("prompt does not follow the enhancer template")?;
                Ok(Response::Translation((self.lookup)(&p.source).unwrap_or(p.candidate)))
            }
            other => Err(format!("enhancer cannot serve {} requests", other.role())),
        }
    }
}

/// Smoothed sentence BLEU against the known reference, in [0, 1]; 0 for
/// unknown sources.
pub struct ReferenceScorer {
    lookup: ReferenceLookup,
}

impl ReferenceScorer {
    pub fn new(lookup: ReferenceLookup) -> Self {
        Self { lookup }
    }
}

impl MockHandler for ReferenceScorer {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        match req {
            Request::Score { source, candidate } => Ok(Response::Score(
                (self.lookup)(source).map_or(0.0, |r| sentence_reward(candidate, &r)),
            )),
            other => Err(format!("reward backend cannot serve {} requests", other.role())),
        }
    }
}

/// Serves hashed character n-gram embeddings.
pub struct HashEmbedBackend;

impl MockHandler for HashEmbedBackend {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        match req {
            Request::Embed { text } => Ok(Response::Vector(hash_embed(text).as_slice().to_vec())),
            other => Err(format!("embedder cannot serve {} requests", other.role())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum MockPoolKind {
    /// Per-domain planted optimal K-subsets; see [`PlantedWorld`].
    Planted { k: usize },
    /// Reference with per-system token dropout. `None` spaces the rates
    /// evenly from 0.05 to 0.45.
    NoisyReference { dropout: Option<Vec<f64>> },
    /// System `i` emits the first `ceil(n·(L−i)/L)` reference tokens.
    FixedTable,
}

fn default_dropout(l: usize) -> Vec<f64> {
    (0..l).map(|i| 0.05 + 0.4 * i as f64 / (l - 1) as f64).collect()
}

/// Build an in-process pool of `num_systems` translators with the overlap
/// fuser, a reference enhancer, a reference scorer and the hashed embedder.
///
/// `corpus` supplies references for the noisy and table pools; the planted
/// pool derives everything from its own world (built from `num_systems`,
/// `k` and `seed`) and ignores it.
pub fn make_mock_pool(kind: &MockPoolKind, num_systems: usize, seed: u64, corpus: &ParallelCorpus) -> Result<Pool> {
    if num_systems < 2 {
        return Err(Error::invalid(format!("mock pool needs L >= 2, got {num_systems}")));
    }
    let (translators, lookup): (Vec<Backend>, ReferenceLookup) = match kind {
        MockPoolKind::Planted { k } => {
            let world = Arc::new(PlantedWorld::new(num_systems, *k, seed)?);
            let w = world.clone();
            let lookup: ReferenceLookup = Arc::new(move |s: &str| w.reference_for(s));
            let ts = (0..num_systems)
                .map(|i| {
                    Backend::mock(
                        format!("planted-{i}"),
                        Role::Translator,
                        Arc::new(PlantedTranslator::new(world.clone(), i)),
                    )
                })
                .collect();
            (ts, lookup)
        }
        MockPoolKind::NoisyReference { dropout } => {
            let rates = dropout.clone().unwrap_or_else(|| default_dropout(num_systems));
            if rates.len() != num_systems || rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
                return Err(Error::invalid(format!("need {num_systems} dropout rates in [0, 1], got {rates:?}")));
            }
            let lookup = corpus_lookup(corpus);
            let ts = rates
                .iter()
                .enumerate()
                .map(|(i, &p)| {
                    Backend::mock(
                        format!("noisy-{i}"),
                        Role::Translator,
                        Arc::new(NoisyReferenceTranslator::new(lookup.clone(), p, seed, i)),
                    )
                })
                .collect();
            (ts, lookup)
        }
        MockPoolKind::FixedTable => {
            let ts = (0..num_systems)
                .map(|i| {
                    let table = corpus
                        .entries
                        .iter()
                        .map(|e| {
                            let toks: Vec<&str> = e.reference.split_whitespace().collect();
                            let keep = (toks.len() * (num_systems - i)).div_ceil(num_systems);
                            (e.source.clone(), toks[..keep].join(" "))
                        })
                        .collect();
                    Backend::mock(
                        format!("table-{i}"),
                        Role::Translator,
                        Arc::new(FixedTableTranslator::new(table)),
                    )
                })
                .collect();
            (ts, corpus_lookup(corpus))
        }
    };
    Pool::new(translators, Backend::mock("overlap-fuser", Role::Fuser, Arc::new(OverlapFuser)))?
        .with_enhancer(Backend::mock(
            "reference-enhancer",
            Role::Enhancer,
            Arc::new(ReferenceEnhancer::new(lookup.clone())),
        ))?
        .with_scorer(Backend::mock("reference-scorer", Role::Reward, Arc::new(ReferenceScorer::new(lookup))))?
        .with_embedder(Backend::mock("hash-embedder", Role::Embedder, Arc::new(HashEmbedBackend)))
        .map(|p| p.with_langs(corpus.src_lang.clone(), corpus.tgt_lang.clone()))
}
