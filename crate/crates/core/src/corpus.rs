//! Parallel data, cached candidate translations and training subsets.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SeededRng;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: usize,
    pub source: String,
    pub reference: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParallelCorpus {
    pub entries: Vec<CorpusEntry>,
    pub src_lang: String,
    pub tgt_lang: String,
}

impl ParallelCorpus {
    pub fn new(src_lang: impl Into<String>, tgt_lang: impl Into<String>) -> Self {
        Self {
            entries: Vec::new(),
            src_lang: src_lang.into(),
            tgt_lang: tgt_lang.into(),
        }
    }

    /// Build from `(source, reference)` pairs with ids `0..n`.
    pub fn from_pairs<S: Into<String>, R: Into<String>>(pairs: impl IntoIterator<Item = (S, R)>) -> Self {
        let mut c = Self::new("en", "hi");
        for (source, reference) in pairs {
            c.entries.push(CorpusEntry {
                id: c.entries.len(),
                source: source.into(),
                reference: reference.into(),
            });
        }
        c
    }

    pub fn with_langs(mut self, src: impl Into<String>, tgt: impl Into<String>) -> Self {
        self.src_lang = src.into();
        self.tgt_lang = tgt.into();
        self
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&CorpusEntry> {
        // ids are dense for loaded corpora; subsets keep their original ids
        match self.entries.get(id) {
            Some(e) if e.id == id => Some(e),
            _ => self.entries.iter().find(|e| e.id == id),
        }
    }

    /// Write as `source\treference\n`. Tabs and newlines inside fields are
    /// not representable and are rejected.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        for e in &self.entries {
            if [&e.source, &e.reference].iter().any(|s| s.contains(['\t', '\n', '\r'])) {
                return Err(Error::invalid(format!("entry {} contains a tab or newline", e.id)));
            }
            writeln!(w, "{}\t{}", e.source, e.reference).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// Read a two-column TSV (`source\treference`). Blank lines are skipped;
/// ids follow file order from 0.
pub fn load_parallel(path: &Path) -> Result<ParallelCorpus> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut corpus = ParallelCorpus::new("en", "hi");
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |message: &str| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let mut cols = line.split('\t');
        let (Some(source), Some(reference), None) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err("expected exactly two tab-separated columns"));
        };
        if source.trim().is_empty() {
            return Err(parse_err("empty source"));
        }
        corpus.entries.push(CorpusEntry {
            id: corpus.entries.len(),
            source: source.to_string(),
            reference: reference.to_string(),
        });
    }
    Ok(corpus)
}

/// `⌈fraction · N⌉` entries drawn uniformly without replacement, returned in
/// corpus order with their original ids.
pub fn sample_subset(corpus: &ParallelCorpus, fraction: f64, seed: u64) -> Result<ParallelCorpus> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::invalid(format!("sample fraction {fraction} not in (0, 1]")));
    }
    let n = corpus.len();
    let k = ((fraction * n as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut picked = SeededRng::new(seed).choose_distinct(n, k.min(n));
    picked.sort_unstable();
    Ok(ParallelCorpus {
        entries: picked.into_iter().map(|i| corpus.entries[i].clone()).collect(),
        src_lang: corpus.src_lang.clone(),
        tgt_lang: corpus.tgt_lang.clone(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranslationCandidate {
    #[serde(rename = "system")]
    pub system_id: usize,
    pub text: String,
}

pub const CACHE_FORMAT: &str = "ensemble-forge-candidates";
pub const CACHE_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheHeader {
    format: String,
    version: u32,
    systems: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheLine {
    id: usize,
    candidates: Vec<TranslationCandidate>,
}

/// Candidate translations per sentence id, at most one per system.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateCache {
    num_systems: usize,
    entries: BTreeMap<usize, BTreeMap<usize, String>>,
}

impl CandidateCache {
    pub fn new(num_systems: usize) -> Self {
        Self {
            num_systems,
            entries: BTreeMap::new(),
        }
    }

    pub fn num_systems(&self) -> usize {
        self.num_systems
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn insert(&mut self, id: usize, system_id: usize, text: impl Into<String>) -> Result<()> {
        if system_id >= self.num_systems {
            return Err(Error::invalid(format!(
                "system {system_id} out of range for a pool of {}",
                self.num_systems
            )));
        }
        let slot = self.entries.entry(id).or_default();
        if slot.contains_key(&system_id) {
            return Err(Error::invalid(format!("duplicate candidate for sentence {id}, system {system_id}")));
        }
        slot.insert(system_id, text.into());
        Ok(())
    }

    pub fn get(&self, id: usize, system_id: usize) -> Option<&str> {
        self.entries.get(&id)?.get(&system_id).map(String::as_str)
    }

    /// Candidates for a sentence ordered by system id.
    pub fn candidates(&self, id: usize) -> Vec<TranslationCandidate> {
        self.entries
            .get(&id)
            .map(|m| {
                m.iter()
                    .map(|(&system_id, text)| TranslationCandidate {
                        system_id,
                        text: text.clone(),
                    })
                    .collect()
            })
            .unwrap_or_default()
    }

    pub fn ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.entries.keys().copied()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let header = CacheHeader {
            format: CACHE_FORMAT.into(),
            version: CACHE_VERSION,
            systems: self.num_systems,
        };
        let io = |e| Error::io(path, e);
        writeln!(w, "{}", serde_json::to_string(&header).expect("serializable")).map_err(io)?;
        for id in self.ids() {
            let line = CacheLine {
                id,
                candidates: self.candidates(id),
            };
            writeln!(w, "{}", serde_json::to_string(&line).expect("serializable")).map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(file).lines().enumerate();
        let parse_err = |line: usize, message: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        };
        let header: CacheHeader = match lines.next() {
            Some((_, l)) => {
                let l = l.map_err(|e| Error::io(path, e))?;
                serde_json::from_str(&l).map_err(|e| parse_err(1, format!("bad header: {e}")))?
            }
            None => return Err(parse_err(1, "missing header".into())),
        };
        if header.format != CACHE_FORMAT || header.version != CACHE_VERSION {
            return Err(parse_err(
                1,
                format!(
                    "unsupported cache {} v{} (expected {CACHE_FORMAT} v{CACHE_VERSION})",
                    header.format, header.version
                ),
            ));
        }
        let mut cache = CandidateCache::new(header.systems);
        for (i, l) in lines {
            let l = l.map_err(|e| Error::io(path, e))?;
            if l.trim().is_empty() {
                continue;
            }
            let rec: CacheLine = serde_json::from_str(&l).map_err(|e| parse_err(i + 1, e.to_string()))?;
            if cache.entries.contains_key(&rec.id) {
                return Err(parse_err(i + 1, format!("duplicate sentence id {}", rec.id)));
            }
            cache.entries.insert(rec.id, BTreeMap::new());
            for c in rec.candidates {
                cache.insert(rec.id, c.system_id, c.text).map_err(|e| parse_err(i + 1, e.to_string()))?;
            }
        }
        Ok(cache)
    }
}

/// Save then load; the result equals the input for any valid cache.
pub fn cache_roundtrip(cache: &CandidateCache, path: &Path) -> Result<CandidateCache> {
    cache.save(path)?;
    CandidateCache::load(path)
}
