//! Competitive correction: margin-gated enhancement of weak selected
//! candidates.
//!
//! Selected candidates arrive sorted by reward, best first. With margins
//! `m_1 = r_1` and `m_i = r_{i-1} - r_i`, position `i` (for `i >= 2`) is
//! handed to an enhancer whenever `m_i >= tau`. The enhancer sees the
//! candidate, its reward and the rejected candidates; its output replaces
//! the candidate. `m_1` is computed but never gates anything.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};

/// A candidate translation with its reward.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub system_id: usize,
    pub text: String,
    pub reward: f64,
}

/// Selected candidates, rewards non-increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SelectedSet(Vec<ScoredCandidate>);

impl SelectedSet {
    /// Fails if the set is empty, a reward is not finite, or rewards increase.
    pub fn new(items: Vec<ScoredCandidate>) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::invalid("selected set is empty"));
        }
        check_sorted(&items.iter().map(|c| c.reward).collect::<Vec<_>>())?;
        Ok(Self(items))
    }

    /// Sort by reward descending, ties by lower system id.
    pub fn from_unsorted(mut items: Vec<ScoredCandidate>) -> Result<Self> {
        if items.iter().any(|c| !c.reward.is_finite()) {
            return Err(Error::NonFinite("candidate rewards".into()));
        }
        items.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.system_id.cmp(&b.system_id)));
        Self::new(items)
    }

    pub fn items(&self) -> &[ScoredCandidate] {
        &self.0
    }

    pub fn rewards(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.reward).collect()
    }

    pub fn texts(&self) -> Vec<String> {
        self.0.iter().map(|c| c.text.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<ScoredCandidate> {
        self.0
    }
}

/// Candidates from the systems that were not selected.
pub type RejectedSet = Vec<ScoredCandidate>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CcbConfig {
    pub tau: f64,
    /// Request rejected candidates only once some gate fires.
    pub lazy_rejected: bool,
    /// Keep an enhanced candidate only if it rescores above the original.
    pub rescore_after: bool,
}

impl Default for CcbConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            lazy_rejected: true,
            rescore_after: false,
        }
    }
}

fn check_sorted(rewards: &[f64]) -> Result<()> {
    if rewards.iter().any(|r| !r.is_finite()) {
        return Err(Error::NonFinite("candidate rewards".into()));
    }
    if rewards.windows(2).any(|w| w[0] < w[1]) {
        return Err(Error::invalid(format!("rewards must be non-increasing, got {rewards:?}")));
    }
    Ok(())
}

/// `[r_1, r_1 - r_2, ..., r_{K-1} - r_K]`.
pub fn compute_margins(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::invalid("no rewards"));
    }
    check_sorted(rewards)?;
    let mut m = Vec::with_capacity(rewards.len());
    m.push(rewards[0]);
    m.extend(rewards.windows(2).map(|w| w[0] - w[1]));
    Ok(m)
}

/// Zero-based positions whose gate fires at threshold `tau`.
pub fn gated_positions(rewards: &[f64], tau: f64) -> Result<Vec<usize>> {
    let m = compute_margins(rewards)?;
    Ok((1..m.len()).filter(|&i| m[i] >= tau).collect())
}

pub const PROMPT_TEMPLATE_VERSION: &str = "v1";
const PROMPT_TEMPLATE: &str = include_str!("../../data/enhancer_prompt_v1.txt");

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Fill the versioned enhancer template. Rejected candidates are listed best
/// first (ties by system id); an empty list renders as `(none)`. Newlines in
/// texts are collapsed so each field stays on its line.
pub fn build_enhancer_prompt(
    source: &str,
    current: (&str, f64),
    rejected: &[ScoredCandidate],
    langs: (&str, &str),
) -> String {
    let mut rej: Vec<&ScoredCandidate> = rejected.iter().collect();
    rej.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.system_id.cmp(&b.system_id)));
    let block = if rej.is_empty() {
        "(none)".to_owned()
    } else {
        rej.iter()
            .map(|c| format!("- (score {:.4}) {}", c.reward, one_line(&c.text)))
            .collect::<Vec<_>>()
            .join("\n")
    };
    PROMPT_TEMPLATE
        .replace("{src_lang}", langs.0)
        .replace("{tgt_lang}", langs.1)
        .replace("{source}", &one_line(source))
        .replace("{score}", &format!("{:.4}", current.1))
        .replace("{candidate}", &one_line(current.0))
        .replace("{rejected}", &block)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PromptFields {
    pub source: String,
    pub candidate: String,
}

/// Recover the source and current candidate from a prompt built by
/// [`build_enhancer_prompt`].
pub fn parse_enhancer_prompt(prompt: &str) -> Option<PromptFields> {
    let after = |prefix: &str| {
        prompt
            .lines()
            .find(|l| l.starts_with(prefix))
            .and_then(|l| l.split_once("): "))
            .map(|(_, rest)| rest.to_owned())
    };
    Some(PromptFields {
        source: after("Source (")?,
        candidate: after("Current translation (")?,
    })
}

/// One JSON line of the audit log per gated position.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CcbAuditRecord {
    pub sentence_id: usize,
    /// One-based position, as in the margin sequence.
    pub position: usize,
    pub margin: f64,
    pub fired: bool,
    pub enhancer_latency_ms: f64,
    pub replaced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CcbOutcome {
    pub candidates: Vec<ScoredCandidate>,
    /// Zero-based positions whose gate fired.
    pub fired: Vec<usize>,
    pub audit: Vec<CcbAuditRecord>,
}

/// Hooks `apply_ccb` needs from its surroundings.
pub trait CcbEnv {
    /// The rejected candidates; called at most once per `apply_ccb`.
    fn rejected(&mut self) -> Result<RejectedSet>;
    fn enhance(&mut self, prompt: &str) -> Result<String>;
    /// Reward of an enhanced candidate, used when `rescore_after` is set.
    fn rescore(&mut self, text: &str) -> Result<f64>;
}

/// Run the correction loop over positions 2..K.
///
/// Gates use the original margins. A failing enhancer leaves the candidate
/// in place; failing to obtain the rejected set is an error. With
/// `lazy_rejected` unset the rejected set is requested up front.
pub fn apply_ccb(
    sentence_id: usize,
    source: &str,
    sel: &SelectedSet,
    cfg: &CcbConfig,
    langs: (&str, &str),
    env: &mut dyn CcbEnv,
) -> Result<CcbOutcome> {
    if !cfg.tau.is_finite() && cfg.tau != f64::INFINITY {
        return Err(Error::invalid(format!("CCB threshold {} is not a number", cfg.tau)));
    }
    let margins = compute_margins(&sel.rewards())?;
    let mut out = sel.items().to_vec();
    let mut rejected: Option<RejectedSet> = if cfg.lazy_rejected { None } else { Some(env.rejected()?) };
    let mut fired = Vec::new();
    let mut audit = Vec::new();
    for pos in 1..out.len() {
        let margin = margins[pos];
        let fire = margin >= cfg.tau;
        let mut record = CcbAuditRecord {
            sentence_id,
            position: pos + 1,
            margin,
            fired: fire,
            enhancer_latency_ms: 0.0,
            replaced: false,
        };
        if fire {
            fired.push(pos);
            if rejected.is_none() {
                rejected = Some(env.rejected()?);
            }
            let current = &sel.items()[pos];
            let prompt = build_enhancer_prompt(
                source,
                (&current.text, current.reward),
                rejected.as_deref().unwrap_or(&[]),
                langs,
            );
            let started = Instant::now();
            let enhanced = env.enhance(&prompt);
            record.enhancer_latency_ms = started.elapsed().as_secs_f64() * 1e3;
            match enhanced {
                Ok(text) => {
                    let keep = if cfg.rescore_after {
                        match env.rescore(&text) {
                            Ok(r) if r > current.reward => Some(r),
                            Ok(_) => None,
                            Err(e) => {
                                log::warn!("sentence {sentence_id}: rescoring enhanced candidate failed: {e}");
                                None
                            }
                        }
                    } else {
                        Some(current.reward)
                    };
                    if let Some(reward) = keep {
                        out[pos] = ScoredCandidate {
                            system_id: current.system_id,
                            text,
                            reward,
                        };
                        record.replaced = true;
                    }
                }
                Err(e) => log::warn!("sentence {sentence_id}: enhancer failed at position {}: {e}", pos + 1),
            }
        }
        audit.push(record);
    }
    Ok(CcbOutcome {
        candidates: out,
        fired,
        audit,
    })
}

pub fn write_audit_jsonl(path: &Path, records: &[CcbAuditRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))
}
