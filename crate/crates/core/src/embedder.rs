//! DQN state vectors for source sentences.

use std::collections::HashMap;
use std::fs;
use std::hash::Hasher;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::Arc;

use fnv::FnvHasher;

use crate::backends::{Backend, CostLedger, Request};
use crate::error::{Error, Result};

pub const STATE_DIM: usize = 768;

/// Unit-norm embedding of a source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct StateVector(Vec<f64>);

impl StateVector {
    /// Normalizes `values` to unit L2 norm. Fails on the wrong length, on a
    /// non-finite entry, or on the zero vector.
    pub fn from_values(mut values: Vec<f64>) -> Result<Self> {
        if values.len() != STATE_DIM {
            return Err(Error::Shape(format!("state vector has {} values, expected {STATE_DIM}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("state vector".into()));
        }
        let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid("cannot normalize a zero state vector"));
        }
        values.iter_mut().for_each(|v| *v /= norm);
        Ok(StateVector(values))
    }

    fn basis(i: usize) -> Self {
        let mut v = vec![0.0; STATE_DIM];
        v[i] = 1.0;
        StateVector(v)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

fn ngram_hash(n: usize, gram: &str) -> u64 {
    let mut h = FnvHasher::default();
    h.write(&[n as u8]);
    h.write(gram.as_bytes());
    h.finish()
}

/// Signed hashed character 1..3-grams.
///
/// Whitespace runs collapse to one space. Each n-gram is hashed with 64-bit
/// FNV-1a over `[n] ++ utf8(gram)`; the bucket is `hash mod 768` and bit 63
/// picks the sign. Counts are L2-normalized. Empty text (or a count vector
/// that cancels to zero) maps to the first basis vector.
pub fn hash_embed(text: &str) -> StateVector {
    let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
    let chars: Vec<(usize, char)> = normalized.char_indices().collect();
    let mut counts = vec![0.0f64; STATE_DIM];
    for n in 1..=3 {
        if chars.len() < n {
            break;
        }
        for start in 0..=chars.len() - n {
            let from = chars[start].0;
            let to = chars.get(start + n).map_or(normalized.len(), |c| c.0);
            let h = ngram_hash(n, &normalized[from..to]);
            let bucket = (h % STATE_DIM as u64) as usize;
            counts[bucket] += if h >> 63 == 1 { -1.0 } else { 1.0 };
        }
    }
    StateVector::from_values(counts).unwrap_or_else(|_| StateVector::basis(0))
}

pub const EMBEDDING_HEADER: &str = "# ensemble-forge embeddings v1 dim=768";

/// Text table: the header line, then `id f0 … f767` per line.
pub fn load_embedding_table(path: &Path) -> Result<HashMap<usize, StateVector>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    match lines.next() {
        Some(Ok(h)) if h.trim_end() == EMBEDDING_HEADER => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(err(1, format!("expected header `{EMBEDDING_HEADER}`"))),
    }
    let mut table = HashMap::new();
    for (i, line) in lines.enumerate() {
        let lineno = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let id: usize = fields
            .next()
            .and_then(|f| f.parse().ok())
            .ok_or_else(|| err(lineno, "missing or malformed id".into()))?;
        let values = fields
            .map(|f| f.parse::<f64>().map_err(|e| err(lineno, format!("bad float {f:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        let v = StateVector::from_values(values).map_err(|e| err(lineno, e.to_string()))?;
        if table.insert(id, v).is_some() {
            return Err(err(lineno, format!("duplicate id {id}")));
        }
    }
    Ok(table)
}

pub fn save_embedding_table(path: &Path, table: &HashMap<usize, StateVector>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    writeln!(w, "{EMBEDDING_HEADER}").map_err(io)?;
    let mut ids: Vec<_> = table.keys().copied().collect();
    ids.sort_unstable();
    for id in ids {
        write!(w, "{id}").map_err(io)?;
        for v in table[&id].as_slice() {
            write!(w, " {v:?}").map_err(io)?;
        }
        writeln!(w).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Where states come from: hashed features, a precomputed table keyed by
/// sentence id, or an `/embed` backend.
#[derive(Clone)]
pub enum StateEncoder {
    Hashed,
    Table(Arc<HashMap<usize, StateVector>>),
    Backend(Arc<Backend>),
}

impl StateEncoder {
    pub fn encode(&self, id: usize, source: &str, ledger: &CostLedger) -> Result<StateVector> {
        match self {
            StateEncoder::Hashed => Ok(hash_embed(source)),
            StateEncoder::Table(t) => t
                .get(&id)
                .cloned()
                .ok_or_else(|| Error::invalid(format!("no embedding for sentence {id}"))),
            StateEncoder::Backend(b) => {
                let resp = b.call(&Request::Embed { text: source.into() }, ledger, Some(id))?;
                StateVector::from_values(resp.into_vector()?)
            }
        }
    }
}

impl std::fmt::Debug for StateEncoder {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateEncoder::Hashed => write!(f, "Hashed"),
            StateEncoder::Table(t) => write!(f, "Table({} entries)", t.len()),
            StateEncoder::Backend(b) => write!(f, "Backend({})", b.name()),
        }
    }
}
