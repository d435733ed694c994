//! Linear reward model over hashed (source, candidate) features, trained
//! with a set-based pairwise logistic loss.
//!
//! For preferred candidates `P` and rejected candidates `R` of one source
//! sentence, the loss is the mean over all `|P|·|R|` pairs of
//! `-ln σ(r(x, p) − r(x, r))`.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::corpus::{CandidateCache, ParallelCorpus};
use crate::embedder::{hash_embed, STATE_DIM};
use crate::error::{Error, Result};
use crate::metrics::{sentence_bleu, tokenize, Smoothing};
use crate::rng::SeededRng;
use crate::scalar::{cast_slice, dot, Scalar};

pub const RM_FEATURES: usize = 2 * STATE_DIM;
/// Number of top sentence-BLEU candidates added to the reference in `P`.
pub const TOP_PREFERRED: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct RmParams<T> {
    pub weights: Vec<T>,
    pub bias: T,
}

impl<T: Scalar> RmParams<T> {
    pub fn zeros(dim: usize) -> Self {
        Self {
            weights: vec![T::zero(); dim],
            bias: T::zero(),
        }
    }

    pub fn standard() -> Self {
        Self::zeros(RM_FEATURES)
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn is_finite(&self) -> bool {
        self.bias.is_finite() && self.weights.iter().all(|w| w.is_finite())
    }

    /// `dot(weights, features) + bias`.
    pub fn score_features(&self, features: &[T]) -> Result<T> {
        if features.len() != self.weights.len() {
            return Err(Error::Shape(format!(
                "{} features for a model of dimension {}",
                features.len(),
                self.weights.len()
            )));
        }
        Ok(dot(&self.weights, features) + self.bias)
    }
}

/// `hash_embed(source) ⊕ hash_embed(candidate)`; each half has unit norm.
pub fn rm_featurize(source: &str, candidate: &str) -> Vec<f64> {
    let mut f = Vec::with_capacity(RM_FEATURES);
    f.extend_from_slice(hash_embed(source).as_slice());
    f.extend_from_slice(hash_embed(candidate).as_slice());
    f
}

pub fn rm_score<T: Scalar>(p: &RmParams<T>, source: &str, candidate: &str) -> Result<T> {
    p.score_features(&cast_slice(&rm_featurize(source, candidate)))
}

/// `-ln σ(d)`, computed without overflow.
pub fn neg_log_sigmoid<T: Scalar>(d: T) -> T {
    if d > T::zero() {
        (-d).exp().ln_1p()
    } else {
        -d + d.exp().ln_1p()
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Mean pairwise loss over scores, and its derivative with respect to each
/// preferred and each rejected score.
pub fn pairwise_loss<T: Scalar>(preferred: &[T], rejected: &[T]) -> Result<(T, Vec<T>, Vec<T>)> {
    if preferred.is_empty() || rejected.is_empty() {
        return Err(Error::invalid("preferred and rejected sets must both be non-empty"));
    }
    if preferred.iter().chain(rejected).any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("reward scores".into()));
    }
    let n = T::from_usize(preferred.len() * rejected.len()).expect("pair count");
    let mut loss = T::zero();
    let mut gp = vec![T::zero(); preferred.len()];
    let mut gr = vec![T::zero(); rejected.len()];
    for (i, &sp) in preferred.iter().enumerate() {
        for (j, &sr) in rejected.iter().enumerate() {
            let d = sp - sr;
            loss += neg_log_sigmoid(d);
            // d/dd of -ln σ(d) is -σ(-d)
            let g = sigmoid(-d) / n;
            gp[i] -= g;
            gr[j] += g;
        }
    }
    Ok((loss / n, gp, gr))
}

/// Preferred and rejected candidates for one source sentence.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceSets {
    pub preferred: Vec<String>,
    pub rejected: Vec<String>,
}

/// Featurized preference sample.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSample<T> {
    pub preferred: Vec<Vec<T>>,
    pub rejected: Vec<Vec<T>>,
}

impl<T: Scalar> FeatureSample<T> {
    pub fn from_sets(source: &str, sets: &PreferenceSets) -> Self {
        let f = |c: &String| cast_slice(&rm_featurize(source, c));
        Self {
            preferred: sets.preferred.iter().map(f).collect(),
            rejected: sets.rejected.iter().map(f).collect(),
        }
    }
}

/// Loss and exact gradients for one featurized sample.
pub fn rm_loss_features<T: Scalar>(p: &RmParams<T>, sample: &FeatureSample<T>) -> Result<(T, RmParams<T>)> {
    let sp = sample
        .preferred
        .iter()
        .map(|f| p.score_features(f))
        .collect::<Result<Vec<_>>>()?;
    let sr = sample
        .rejected
        .iter()
        .map(|f| p.score_features(f))
        .collect::<Result<Vec<_>>>()?;
    let (loss, gp, gr) = pairwise_loss(&sp, &sr)?;
    let mut grads = RmParams::zeros(p.dim());
    for (f, &g) in sample.preferred.iter().zip(&gp).chain(sample.rejected.iter().zip(&gr)) {
        for (w, &x) in grads.weights.iter_mut().zip(f) {
            *w += g * x;
        }
        grads.bias += g;
    }
    Ok((loss, grads))
}

pub fn rm_loss_and_grads<T: Scalar>(p: &RmParams<T>, source: &str, sets: &PreferenceSets) -> Result<(T, RmParams<T>)> {
    rm_loss_features(p, &FeatureSample::from_sets(source, sets))
}

pub fn mean_loss<T: Scalar>(p: &RmParams<T>, samples: &[FeatureSample<T>]) -> Result<T> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples"));
    }
    let mut total = T::zero();
    for s in samples {
        total += rm_loss_features(p, s)?.0;
    }
    Ok(total / T::from_usize(samples.len()).expect("sample count"))
}

/// Plain SGD: each step draws one sample uniformly (seeded) and moves the
/// parameters by `-lr` times its gradient.
pub fn rm_train_features<T: Scalar>(
    samples: &[FeatureSample<T>],
    p0: RmParams<T>,
    lr: T,
    steps: usize,
    seed: u64,
) -> Result<RmParams<T>> {
    if steps == 0 {
        return Ok(p0);
    }
    if samples.is_empty() {
        return Err(Error::invalid("no usable preference samples"));
    }
    if !(lr > T::zero()) {
        return Err(Error::invalid(format!("learning rate {lr} must be positive")));
    }
    let mut p = p0;
    let mut rng = SeededRng::new(seed);
    for _ in 0..steps {
        let s = &samples[rng.below(samples.len())];
        let (_, g) = rm_loss_features(&p, s)?;
        for (w, gw) in p.weights.iter_mut().zip(&g.weights) {
            *w -= lr * *gw;
        }
        p.bias -= lr * g.bias;
        if !p.is_finite() {
            return Err(Error::NonFinite("reward model parameters".into()));
        }
    }
    Ok(p)
}

/// `P` = reference plus the top-3 candidates by smoothed sentence BLEU (ties
/// to the lower system id); `R` = the remaining candidates. Candidates whose
/// text already appears in `P` are dropped from `R`. `None` when `R` ends up
/// empty.
pub fn preference_sets(reference: &str, candidates: &[(usize, String)]) -> Result<Option<PreferenceSets>> {
    let refs = [tokenize(reference)];
    let mut scored = candidates
        .iter()
        .map(|(sys, text)| Ok((*sys, text, sentence_bleu(&tokenize(text), &refs, Smoothing::ExpFloor)?.value)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    let mut preferred = vec![reference.to_owned()];
    preferred.extend(scored.iter().take(TOP_PREFERRED).map(|c| c.1.clone()));
    let rejected: Vec<String> = scored
        .iter()
        .skip(TOP_PREFERRED)
        .map(|c| c.1.clone())
        .filter(|t| !preferred.contains(t))
        .collect();
    Ok((!rejected.is_empty()).then_some(PreferenceSets { preferred, rejected }))
}

/// Train on every corpus sentence that has cached candidates.
pub fn rm_train<T: Scalar>(
    corpus: &ParallelCorpus,
    cache: &CandidateCache,
    p0: RmParams<T>,
    lr: T,
    steps: usize,
    seed: u64,
) -> Result<RmParams<T>> {
    let mut samples = Vec::new();
    for e in &corpus.entries {
        let cands: Vec<(usize, String)> = cache.candidates(e.id).into_iter().map(|c| (c.system_id, c.text)).collect();
        if cands.is_empty() {
            continue;
        }
        match preference_sets(&e.reference, &cands)? {
            Some(sets) => samples.push(FeatureSample::from_sets(&e.source, &sets)),
            None => log::warn!("sentence {}: no rejected candidates, skipped", e.id),
        }
    }
    rm_train_features(&samples, p0, lr, steps, seed)
}

pub const RM_MAGIC: [u8; 4] = *b"EFRM";
pub const RM_VERSION: u32 = 1;

/// `"EFRM" | version u32 | F u32 | F x f64 weights | f64 bias`, little endian.
pub fn encode_rm<T: Scalar>(p: &RmParams<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 8 * p.dim());
    out.extend_from_slice(&RM_MAGIC);
    out.extend_from_slice(&RM_VERSION.to_le_bytes());
    out.extend_from_slice(&(p.dim() as u32).to_le_bytes());
    for w in p.weights.iter().chain(std::iter::once(&p.bias)) {
        out.extend_from_slice(&w.to_f64_lossy().to_le_bytes());
    }
    out
}

pub fn decode_rm<T: Scalar>(bytes: &[u8]) -> Result<RmParams<T>> {
    if bytes.len() < 12 || bytes[..4] != RM_MAGIC {
        return Err(Error::Format("not a reward-model checkpoint".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != RM_VERSION {
        return Err(Error::Format(format!("reward-model version {version}, expected {RM_VERSION}")));
    }
    let dim = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != 8 * (dim + 1) {
        return Err(Error::Format(format!("reward-model body has {} bytes, expected {}", body.len(), 8 * (dim + 1))));
    }
    let mut vals: Vec<T> = body
        .chunks_exact(8)
        .map(|c| T::from_f64_lossy(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let bias = vals.pop().expect("bias present");
    let p = RmParams { weights: vals, bias };
    if !p.is_finite() {
        return Err(Error::NonFinite("reward-model checkpoint".into()));
    }
    Ok(p)
}

pub fn save_rm<T: Scalar>(p: &RmParams<T>, path: &Path) -> Result<()> {
    fs::write(path, encode_rm(p)).map_err(|e| Error::io(path, e))
}

pub fn load_rm<T: Scalar>(path: &Path) -> Result<RmParams<T>> {
    decode_rm(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// CSV `id,system,score` for every cached candidate.
pub fn write_score_dump<T: Scalar>(p: &RmParams<T>, corpus: &ParallelCorpus, cache: &CandidateCache, path: &Path) -> Result<()> {
    let mut w = std::io::BufWriter::new(fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(w, "id,system,score").map_err(io)?;
    for e in &corpus.entries {
        for c in cache.candidates(e.id) {
            let s = rm_score(p, &e.source, &c.text)?;
            writeln!(w, "{},{},{:?}", e.id, c.system_id, s.to_f64_lossy()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}
