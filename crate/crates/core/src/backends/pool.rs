use std::sync::Arc;

use super::{Backend, CostLedger, Request, Role};
use crate::error::{Error, Result};

/// The L translation systems plus the fuser and optional enhancer, reward
/// and embedding backends.
#[derive(Debug)]
pub struct Pool {
    translators: Vec<Arc<Backend>>,
    fuser: Arc<Backend>,
    enhancer: Option<Arc<Backend>>,
    scorer: Option<Arc<Backend>>,
    embedder: Option<Arc<Backend>>,
    src_lang: String,
    tgt_lang: String,
    max_concurrent: usize,
}

fn expect_role(b: &Backend, role: Role) -> Result<()> {
    if b.role() == role {
        Ok(())
    } else {
        Err(Error::invalid(format!("backend `{}` has role {}, expected {role}", b.name(), b.role())))
    }
}

impl Pool {
    /// Translator `i` gets system id `i`; an explicit id elsewhere is an error.
    pub fn new(translators: Vec<Backend>, fuser: Backend) -> Result<Self> {
        if translators.len() < 2 {
            return Err(Error::invalid(format!("pool needs at least 2 systems, got {}", translators.len())));
        }
        let translators = translators
            .into_iter()
            .enumerate()
            .map(|(i, b)| {
                expect_role(&b, Role::Translator)?;
                match b.system_id() {
                    Some(id) if id != i => Err(Error::invalid(format!(
                        "translator `{}` has system id {id} at position {i}; ids must be dense 0..L-1",
                        b.name()
                    ))),
                    _ => Ok(Arc::new(b.with_system_id(i))),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        expect_role(&fuser, Role::Fuser)?;
        Ok(Self {
            translators,
            fuser: Arc::new(fuser),
            enhancer: None,
            scorer: None,
            embedder: None,
            src_lang: "en".into(),
            tgt_lang: "hi".into(),
            max_concurrent: 1,
        })
    }

    pub fn with_fuser(mut self, b: Backend) -> Result<Self> {
        expect_role(&b, Role::Fuser)?;
        self.fuser = Arc::new(b);
        Ok(self)
    }

    pub fn with_enhancer(mut self, b: Backend) -> Result<Self> {
        expect_role(&b, Role::Enhancer)?;
        self.enhancer = Some(Arc::new(b));
        Ok(self)
    }

    pub fn with_scorer(mut self, b: Backend) -> Result<Self> {
        expect_role(&b, Role::Reward)?;
        self.scorer = Some(Arc::new(b));
        Ok(self)
    }

    pub fn with_embedder(mut self, b: Backend) -> Result<Self> {
        expect_role(&b, Role::Embedder)?;
        self.embedder = Some(Arc::new(b));
        Ok(self)
    }

    pub fn with_langs(mut self, src: impl Into<String>, tgt: impl Into<String>) -> Self {
        self.src_lang = src.into();
        self.tgt_lang = tgt.into();
        self
    }

    /// Upper bound on simultaneous translator calls for one sentence.
    pub fn with_max_concurrent(mut self, n: usize) -> Self {
        self.max_concurrent = n.max(1);
        self
    }

    pub fn size(&self) -> usize {
        self.translators.len()
    }

    pub fn translators(&self) -> &[Arc<Backend>] {
        &self.translators
    }

    pub fn fuser(&self) -> &Arc<Backend> {
        &self.fuser
    }

    pub fn enhancer(&self) -> Option<&Arc<Backend>> {
        self.enhancer.as_ref()
    }

    pub fn scorer(&self) -> Option<&Arc<Backend>> {
        self.scorer.as_ref()
    }

    pub fn embedder(&self) -> Option<&Arc<Backend>> {
        self.embedder.as_ref()
    }

    pub fn langs(&self) -> (&str, &str) {
        (&self.src_lang, &self.tgt_lang)
    }

    pub fn translate(&self, system: usize, sentence: usize, source: &str, ledger: &CostLedger) -> Result<String> {
        let b = self
            .translators
            .get(system)
            .ok_or_else(|| Error::invalid(format!("system {system} outside pool of {}", self.size())))?;
        let req = Request::Translate {
            source: source.to_owned(),
            src_lang: self.src_lang.clone(),
            tgt_lang: self.tgt_lang.clone(),
        };
        Ok(b.call(&req, ledger, Some(sentence))?.into_text()?)
    }

    /// Translate with each listed system. Calls may overlap up to the
    /// concurrency limit; results always follow the order of `systems`.
    pub fn translate_many(&self, systems: &[usize], sentence: usize, source: &str, ledger: &CostLedger) -> Result<Vec<String>> {
        if self.max_concurrent <= 1 || systems.len() <= 1 {
            return systems.iter().map(|&s| self.translate(s, sentence, source, ledger)).collect();
        }
        let mut out = Vec::with_capacity(systems.len());
        for chunk in systems.chunks(self.max_concurrent) {
            let results: Vec<Result<String>> = std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&s| scope.spawn(move || self.translate(s, sentence, source, ledger)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("translator thread panicked")).collect()
            });
            for r in results {
                out.push(r?);
            }
        }
        Ok(out)
    }

    pub fn fuse(&self, sentence: usize, source: &str, candidates: &[String], ledger: &CostLedger) -> Result<String> {
        let req = Request::Fuse {
            source: source.to_owned(),
            candidates: candidates.to_vec(),
        };
        Ok(self.fuser.call(&req, ledger, Some(sentence))?.into_text()?)
    }

    pub fn enhance(&self, sentence: usize, prompt: &str, ledger: &CostLedger) -> Result<String> {
        let b = self
            .enhancer
            .as_ref()
            .ok_or_else(|| Error::invalid("pool has no enhancer backend"))?;
        let req = Request::Enhance { prompt: prompt.to_owned() };
        Ok(b.call(&req, ledger, Some(sentence))?.into_text()?)
    }

    pub fn score(&self, sentence: usize, source: &str, candidate: &str, ledger: &CostLedger) -> Result<f64> {
        let b = self
            .scorer
            .as_ref()
            .ok_or_else(|| Error::invalid("pool has no reward backend"))?;
        let req = Request::Score {
            source: source.to_owned(),
            candidate: candidate.to_owned(),
        };
        Ok(b.call(&req, ledger, Some(sentence))?.into_score()?)
    }
}
