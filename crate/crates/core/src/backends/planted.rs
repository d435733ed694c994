//! A synthetic translation world where the best K-subset of systems is a
//! known function of the source sentence.
//!
//! Sentences come from `D` domains, each with its own source vocabulary
//! whose words share a leading syllable, so the domain is recoverable from
//! any one word. Every domain is assigned a distinct planted K-subset of
//! systems (all `C(L, K)` subsets in lexicographic order when there are at
//! most [`MAX_DOMAINS`] of them, otherwise a seeded sample). A planted system corrupts each reference
//! token with probability `good_rate`, every other system with probability
//! `bad_rate`. A corrupted token is replaced by a confusion token shared by
//! all systems for that (sentence, position), so unreliable systems tend to
//! agree on the same wrong words and can outvote a reliable one.

use std::collections::HashMap;
use std::sync::Arc;

use super::mock::{text_hash, MockHandler};
use super::{Request, Response};
use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::rng::{mix64, SeededRng};

pub const MAX_DOMAINS: usize = 64;
const VOCAB_PER_DOMAIN: usize = 12;
const MIN_LEN: usize = 8;
const MAX_LEN: usize = 14;

#[derive(Debug, Clone)]
struct Domain {
    vocab: Vec<String>,
    planted: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct PlantedWorld {
    num_systems: usize,
    k: usize,
    seed: u64,
    good_rate: f64,
    bad_rate: f64,
    domains: Vec<Domain>,
    word_domain: HashMap<String, usize>,
}

/// All k-subsets of 0..n in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";

/// A word of the domain whose leading syllable is `stem`, followed by one
/// or two random syllables.
fn make_word(stem: usize, rng: &mut SeededRng) -> String {
    let syllable = |i: usize| [CONSONANTS[i / VOWELS.len()] as char, VOWELS[i % VOWELS.len()] as char];
    let mut w: String = syllable(stem).iter().collect();
    for _ in 0..1 + rng.below(2) {
        w.extend(syllable(rng.below(CONSONANTS.len() * VOWELS.len())));
    }
    w
}

/// Target-side rendering of a source word: reversed, with a suffix.
fn target_word(w: &str) -> String {
    let mut t: String = w.chars().rev().collect();
    t.push('n');
    t
}

impl PlantedWorld {
    pub const GOOD_RATE: f64 = 0.05;
    pub const BAD_RATE: f64 = 0.5;

    pub fn new(num_systems: usize, k: usize, seed: u64) -> Result<Self> {
        Self::with_rates(num_systems, k, seed, Self::GOOD_RATE, Self::BAD_RATE)
    }

    pub fn with_rates(num_systems: usize, k: usize, seed: u64, good_rate: f64, bad_rate: f64) -> Result<Self> {
        if num_systems < 2 || k == 0 || k >= num_systems {
            return Err(Error::invalid(format!("planted world needs 0 < K < L and L >= 2, got K={k}, L={num_systems}")));
        }
        if !(0.0..=1.0).contains(&good_rate) || !(0.0..=1.0).contains(&bad_rate) {
            return Err(Error::invalid("corruption rates must lie in [0, 1]"));
        }
        let mut rng = SeededRng::new(seed ^ 0x706c_616e_7465_64);
        let mut subsets = combinations(num_systems, k);
        if subsets.len() > MAX_DOMAINS {
            let mut picked = rng.choose_distinct(subsets.len(), MAX_DOMAINS);
            picked.sort_unstable();
            subsets = picked.into_iter().map(|i| subsets[i].clone()).collect();
        }
        let stems = rng.choose_distinct(CONSONANTS.len() * VOWELS.len(), subsets.len());
        let mut word_domain = HashMap::new();
        let mut domains = Vec::with_capacity(subsets.len());
        for (d, planted) in subsets.into_iter().enumerate() {
            let mut vocab = Vec::with_capacity(VOCAB_PER_DOMAIN);
            while vocab.len() < VOCAB_PER_DOMAIN {
                let w = make_word(stems[d], &mut rng);
                if !word_domain.contains_key(&w) {
                    word_domain.insert(w.clone(), d);
                    vocab.push(w);
                }
            }
            domains.push(Domain { vocab, planted });
        }
        Ok(Self {
            num_systems,
            k,
            seed,
            good_rate,
            bad_rate,
            domains,
            word_domain,
        })
    }

    pub fn num_systems(&self) -> usize {
        self.num_systems
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn num_domains(&self) -> usize {
        self.domains.len()
    }

    /// `n` sentences with ids `0..n`, drawn from stream `stream`.
    pub fn corpus(&self, n: usize, stream: u64) -> ParallelCorpus {
        let mut rng = SeededRng::stream(self.seed, stream);
        let pairs: Vec<(String, String)> = (0..n)
            .map(|_| {
                let d = &self.domains[rng.below(self.domains.len())];
                let len = MIN_LEN + rng.below(MAX_LEN - MIN_LEN + 1);
                let words: Vec<&str> = (0..len).map(|_| d.vocab[rng.below(d.vocab.len())].as_str()).collect();
                let source = words.join(" ");
                let reference = words.iter().map(|w| target_word(w)).collect::<Vec<_>>().join(" ");
                (source, reference)
            })
            .collect();
        ParallelCorpus::from_pairs(pairs)
    }

    pub fn domain_of(&self, source: &str) -> Option<usize> {
        self.word_domain.get(source.split_whitespace().next()?).copied()
    }

    /// The planted subset for the sentence's domain, ascending.
    pub fn planted_subset(&self, source: &str) -> Option<&[usize]> {
        self.domain_of(source).map(|d| self.domains[d].planted.as_slice())
    }

    /// `None` when any word is outside the world's vocabulary.
    pub fn reference_for(&self, source: &str) -> Option<String> {
        let words: Option<Vec<String>> = source
            .split_whitespace()
            .map(|w| self.word_domain.contains_key(w).then(|| target_word(w)))
            .collect();
        words.map(|w| w.join(" "))
    }

    fn confusion(source_hash: u64, pos: usize) -> String {
        format!("q{:06x}", mix64(source_hash ^ mix64(pos as u64 + 1)) & 0xff_ffff)
    }

    /// Output of `system` for `source`; unknown sentences are copied.
    pub fn translate(&self, system: usize, source: &str) -> String {
        let (Some(reference), Some(planted)) = (self.reference_for(source), self.planted_subset(source)) else {
            return source.to_owned();
        };
        let rate = if planted.contains(&system) {
            self.good_rate
        } else {
            self.bad_rate
        };
        let h = text_hash(source);
        let mut rng = SeededRng::stream(self.seed ^ mix64(system as u64 + 1), h);
        reference
            .split_whitespace()
            .enumerate()
            .map(|(j, t)| {
                if rng.unit() < rate {
                    Self::confusion(h, j)
                } else {
                    t.to_owned()
                }
            })
            .collect::<Vec<_>>()
            .join(" ")
    }
}

pub struct PlantedTranslator {
    world: Arc<PlantedWorld>,
    system: usize,
}

impl PlantedTranslator {
    pub fn new(world: Arc<PlantedWorld>, system: usize) -> Self {
        Self { world, system }
    }
}

impl MockHandler for PlantedTranslator {
    fn handle(&self, req: &Request) -> std::result::Result<Response, String> {
        match req {
            Request::Translate { source, .. } => Ok(Response::Translation(self.world.translate(self.system, source))),
            other => Err(format!("translator cannot serve {} requests", other.role())),
        }
    }
}
