use std::collections::BTreeMap;
use std::sync::Mutex;
use std::time::Duration;

use serde::Serialize;

use super::Role;

#[derive(Debug, Clone, PartialEq)]
pub struct BackendCost {
    pub role: Role,
    pub calls: u64,
    pub wall: Duration,
}

#[derive(Debug, Clone, Default, PartialEq)]
struct Inner {
    backends: BTreeMap<String, BackendCost>,
    sentences: BTreeMap<usize, BTreeMap<Role, u64>>,
}

/// Call counts and wall time per backend, with a per-sentence breakdown by
/// role. Safe to share between threads; sentence attribution is by the id
/// passed with each call, never by arrival order.
#[derive(Debug, Default)]
pub struct CostLedger {
    inner: Mutex<Inner>,
}

impl Clone for CostLedger {
    fn clone(&self) -> Self {
        CostLedger {
            inner: Mutex::new(self.lock().clone()),
        }
    }
}

impl CostLedger {
    pub fn new() -> Self {
        Self::default()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn record(&self, backend: &str, role: Role, elapsed: Duration, sentence: Option<usize>) {
        let mut g = self.lock();
        let e = g.backends.entry(backend.to_owned()).or_insert(BackendCost {
            role,
            calls: 0,
            wall: Duration::ZERO,
        });
        e.calls += 1;
        e.wall += elapsed;
        if let Some(id) = sentence {
            *g.sentences.entry(id).or_default().entry(role).or_insert(0) += 1;
        }
    }

    /// Fold another ledger into this one.
    pub fn merge(&self, other: &CostLedger) {
        let theirs = other.lock().clone();
        let mut g = self.lock();
        for (name, c) in theirs.backends {
            let e = g.backends.entry(name).or_insert(BackendCost {
                role: c.role,
                calls: 0,
                wall: Duration::ZERO,
            });
            e.calls += c.calls;
            e.wall += c.wall;
        }
        for (id, roles) in theirs.sentences {
            let s = g.sentences.entry(id).or_default();
            for (role, n) in roles {
                *s.entry(role).or_insert(0) += n;
            }
        }
    }

    pub fn backend(&self, name: &str) -> Option<BackendCost> {
        self.lock().backends.get(name).cloned()
    }

    pub fn backends(&self) -> Vec<(String, BackendCost)> {
        self.lock().backends.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn role_calls(&self, role: Role) -> u64 {
        self.lock().backends.values().filter(|c| c.role == role).map(|c| c.calls).sum()
    }

    pub fn total_calls(&self) -> u64 {
        self.lock().backends.values().map(|c| c.calls).sum()
    }

    pub fn sentence_calls(&self, sentence: usize, role: Role) -> u64 {
        self.lock()
            .sentences
            .get(&sentence)
            .and_then(|m| m.get(&role))
            .copied()
            .unwrap_or(0)
    }

    pub fn sentence_ids(&self) -> Vec<usize> {
        self.lock().sentences.keys().copied().collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoleTotals {
    pub calls: u64,
    /// Excluded from serialized reports so they stay byte-reproducible.
    #[serde(skip)]
    pub wall: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerSummary {
    pub per_role: BTreeMap<Role, RoleTotals>,
    pub sentences: usize,
    pub translator_calls_per_sentence: f64,
    pub full_pool_calls_per_sentence: f64,
    /// Full-pool translator calls divided by the observed calls; 0 when no
    /// translator was called.
    pub call_ratio_vs_full_pool: f64,
}

/// Summarize `ledger` against a baseline that translates with all
/// `pool_size` systems for each sentence.
pub fn ledger_report(ledger: &CostLedger, pool_size: usize) -> LedgerSummary {
    let g = ledger.lock();
    let mut per_role: BTreeMap<Role, RoleTotals> = BTreeMap::new();
    for c in g.backends.values() {
        let t = per_role.entry(c.role).or_insert(RoleTotals {
            calls: 0,
            wall: Duration::ZERO,
        });
        t.calls += c.calls;
        t.wall += c.wall;
    }
    let sentences = g.sentences.len();
    let translator_calls: u64 = g
        .sentences
        .values()
        .map(|m| m.get(&Role::Translator).copied().unwrap_or(0))
        .sum();
    let per_sentence = if sentences == 0 {
        0.0
    } else {
        translator_calls as f64 / sentences as f64
    };
    LedgerSummary {
        per_role,
        sentences,
        translator_calls_per_sentence: per_sentence,
        full_pool_calls_per_sentence: pool_size as f64,
        call_ratio_vs_full_pool: if per_sentence > 0.0 {
            pool_size as f64 / per_sentence
        } else {
            0.0
        },
    }
}
