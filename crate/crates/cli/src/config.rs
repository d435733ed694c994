//! The run configuration: one flat TOML table plus optional `[[backend]]`
//! entries. Every key has a default, unknown keys are rejected, and the
//! effective configuration is written next to every command's outputs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context};
use ensemble_forge::backends::{
    make_mock_pool, Backend, EchoEnhancer, HashEmbedBackend, MockPoolKind, OverlapFuser, PlantedWorld, Pool,
    ReferenceEnhancer, ReferenceLookup, ReferenceScorer, Request, Response, RetryPolicy, Role,
};
use ensemble_forge::ccb::CcbConfig;
use ensemble_forge::corpus::{load_parallel, ParallelCorpus};
use ensemble_forge::dqn::TrainerConfig;
use ensemble_forge::embedder::StateEncoder;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MockPool {
    Planted,
    NoisyReference,
    FixedTable,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Transport {
    Mock,
    Http,
    Subprocess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Hashed character n-grams computed locally.
    Hashed,
    /// The pool's embedder backend.
    Backend,
}

/// One `[[backend]]` table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendSpec {
    pub role: Role,
    pub transport: Transport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// Base URL for `http`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint: Option<String>,
    /// Program and arguments for `subprocess`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Vec<String>>,
    /// Required for translators.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system_id: Option<usize>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub k: usize,
    /// Size of the built-in mock pool.
    pub num_systems: usize,
    /// Built-in translator pool, used when no translator backends are configured.
    pub mock_pool: MockPool,
    /// Per-system dropout for `noisy_reference`; evenly spaced when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub noisy_dropout: Option<Vec<f64>>,
    /// Two-column TSV corpora; synthetic sentences are generated when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_corpus: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eval_corpus: Option<PathBuf>,
    pub synthetic_train_sentences: usize,
    pub synthetic_eval_sentences: usize,
    pub src_lang: String,
    pub tgt_lang: String,
    pub state_encoder: EncoderKind,
    pub max_concurrent_backends: usize,

    pub batch_size: usize,
    pub steps_batch_size: usize,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay: f64,
    pub tau_polyak: f64,
    pub target_update_interval: usize,
    pub memory_size: usize,
    pub lr: f64,
    pub episodes: usize,
    pub episode_len: usize,
    pub bandit_mode: bool,
    pub moving_average_window: usize,
    pub log_interval: usize,

    /// Margin threshold of the correction block; `inf` disables it.
    pub ccb_tau: f64,
    pub ccb_lazy_rejected: bool,
    pub ccb_rescore_after: bool,

    pub rm_lr: f64,
    pub rm_steps: usize,

    pub ranker_latency_ms: f64,
    /// Methods for `eval`; all of them when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub methods: Option<Vec<String>>,

    #[serde(rename = "backend", skip_serializing_if = "Vec::is_empty")]
    pub backends: Vec<BackendSpec>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainerConfig::default();
        let c = CcbConfig::default();
        Self {
            seed: 7,
            k: t.k,
            num_systems: 8,
            mock_pool: MockPool::Planted,
            noisy_dropout: None,
            train_corpus: None,
            eval_corpus: None,
            synthetic_train_sentences: 2000,
            synthetic_eval_sentences: 500,
            src_lang: "en".into(),
            tgt_lang: "hi".into(),
            state_encoder: EncoderKind::Hashed,
            max_concurrent_backends: 8,
            batch_size: t.batch_size,
            steps_batch_size: t.steps_batch_size,
            gamma: t.gamma,
            eps_start: t.eps_start,
            eps_end: t.eps_end,
            eps_decay: t.eps_decay,
            tau_polyak: t.tau_polyak,
            target_update_interval: t.target_update_interval,
            memory_size: t.memory_size,
            lr: t.lr,
            episodes: t.episodes,
            episode_len: t.episode_len,
            bandit_mode: t.bandit_mode,
            moving_average_window: t.moving_average_window,
            log_interval: t.log_interval,
            ccb_tau: c.tau,
            ccb_lazy_rejected: c.lazy_rejected,
            ccb_rescore_after: c.rescore_after,
            rm_lr: 0.05,
            rm_steps: 20_000,
            ranker_latency_ms: 50.0,
            methods: None,
            backends: Vec::new(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn trainer(&self) -> TrainerConfig {
        TrainerConfig {
            batch_size: self.batch_size,
            steps_batch_size: self.steps_batch_size,
            gamma: self.gamma,
            eps_start: self.eps_start,
            eps_end: self.eps_end,
            eps_decay: self.eps_decay,
            tau_polyak: self.tau_polyak,
            target_update_interval: self.target_update_interval,
            memory_size: self.memory_size,
            lr: self.lr,
            episodes: self.episodes,
            episode_len: self.episode_len,
            k: self.k,
            bandit_mode: self.bandit_mode,
            moving_average_window: self.moving_average_window,
            log_interval: self.log_interval,
        }
    }

    pub fn ccb(&self) -> CcbConfig {
        CcbConfig {
            tau: self.ccb_tau,
            lazy_rejected: self.ccb_lazy_rejected,
            rescore_after: self.ccb_rescore_after,
        }
    }

    fn translator_specs(&self) -> Vec<&BackendSpec> {
        self.backends.iter().filter(|b| b.role == Role::Translator).collect()
    }

    /// Number of systems the configured pool will have.
    pub fn pool_size(&self) -> usize {
        match self.translator_specs().len() {
            0 => self.num_systems,
            n => n,
        }
    }

    /// Checks that need no I/O; run before any work.
    pub fn validate(&self) -> anyhow::Result<()> {
        let l = self.pool_size();
        self.trainer().validate(l)?;
        ensure!(self.max_concurrent_backends > 0, "max_concurrent_backends must be positive");
        ensure!(
            self.ccb_tau == f64::INFINITY || self.ccb_tau.is_finite(),
            "ccb_tau must be finite or inf, got {}",
            self.ccb_tau
        );
        ensure!(self.rm_lr > 0.0 && self.rm_lr.is_finite(), "rm_lr must be positive");
        ensure!(self.ranker_latency_ms >= 0.0, "ranker_latency_ms must be non-negative");
        ensure!(
            self.synthetic_train_sentences > 0 && self.synthetic_eval_sentences > 0,
            "synthetic corpus sizes must be positive"
        );
        if let Some(d) = &self.noisy_dropout {
            ensure!(d.len() == l, "noisy_dropout has {} rates for {l} systems", d.len());
        }
        let mut ids: Vec<usize> = Vec::new();
        for b in &self.backends {
            let label = b.name.clone().unwrap_or_else(|| b.role.to_string());
            ensure!(b.role != Role::Ranker, "backend `{label}`: role ranker cannot be configured");
            match b.transport {
                Transport::Http => ensure!(b.endpoint.is_some(), "backend `{label}`: http needs `endpoint`"),
                Transport::Subprocess => ensure!(
                    b.command.as_ref().is_some_and(|c| !c.is_empty()),
                    "backend `{label}`: subprocess needs a non-empty `command`"
                ),
                Transport::Mock => {}
            }
            if b.role == Role::Translator {
                ids.push(b.system_id.with_context(|| format!("translator `{label}` needs `system_id`"))?);
            } else {
                ensure!(b.system_id.is_none(), "backend `{label}`: only translators take a system_id");
                ensure!(
                    self.backends.iter().filter(|o| o.role == b.role).count() == 1,
                    "more than one {} backend configured",
                    b.role
                );
            }
        }
        ids.sort_unstable();
        ensure!(
            ids.iter().enumerate().all(|(i, &id)| i == id),
            "translator system ids must be dense 0..L-1, got {ids:?}"
        );
        Ok(())
    }

    /// Training and evaluation corpora.
    pub fn corpora(&self) -> anyhow::Result<(ParallelCorpus, ParallelCorpus)> {
        let world = || PlantedWorld::new(self.num_systems, self.k, self.seed);
        let train = match &self.train_corpus {
            Some(p) => load_parallel(p)?,
            None => world()?.corpus(self.synthetic_train_sentences, 1),
        };
        let eval = match &self.eval_corpus {
            Some(p) => load_parallel(p)?,
            None => world()?.corpus(self.synthetic_eval_sentences, 2),
        };
        ensure!(!train.is_empty() && !eval.is_empty(), "corpora must not be empty");
        Ok((
            train.with_langs(&self.src_lang, &self.tgt_lang),
            eval.with_langs(&self.src_lang, &self.tgt_lang),
        ))
    }

    /// Build the pool: the built-in mock pool, then every configured backend
    /// replaces the corresponding role. Configured translators replace the
    /// mock translators as a whole.
    pub fn pool(&self, train: &ParallelCorpus, eval: &ParallelCorpus) -> anyhow::Result<Pool> {
        let both = ParallelCorpus::from_pairs(
            train
                .entries
                .iter()
                .chain(&eval.entries)
                .map(|e| (e.source.clone(), e.reference.clone())),
        );
        let kind = match self.mock_pool {
            MockPool::Planted => MockPoolKind::Planted { k: self.k },
            MockPool::NoisyReference => MockPoolKind::NoisyReference {
                dropout: self.noisy_dropout.clone(),
            },
            MockPool::FixedTable => MockPoolKind::FixedTable,
        };
        let mock = make_mock_pool(&kind, self.num_systems, self.seed, &both)?;
        let mut translators = self.translator_specs();
        let mut pool = if translators.is_empty() {
            mock
        } else {
            translators.sort_by_key(|b| b.system_id);
            let ts = translators
                .into_iter()
                .map(|s| self.backend(s, &both))
                .collect::<anyhow::Result<Vec<_>>>()?;
            let mut p = Pool::new(ts, Backend::mock("mock-fuser", Role::Fuser, Arc::new(OverlapFuser)))?;
            p = p.with_enhancer(Backend::mock(
                "mock-enhancer",
                Role::Enhancer,
                Arc::new(ReferenceEnhancer::new(reference_lookup(&both))),
            ))?;
            p.with_embedder(Backend::mock("mock-embedder", Role::Embedder, Arc::new(HashEmbedBackend)))?
                .with_scorer(Backend::mock("mock-reward", Role::Reward, Arc::new(lookup_scorer(&both))))?
        };
        for entry in self.backends.iter().filter(|b| b.role != Role::Translator) {
            let b = self.backend(entry, &both)?;
            pool = match entry.role {
                Role::Fuser => pool.with_fuser(b)?,
                Role::Enhancer => pool.with_enhancer(b)?,
                Role::Embedder => pool.with_embedder(b)?,
                Role::Reward => pool.with_scorer(b)?,
                Role::Translator | Role::Ranker => unreachable!("filtered by validate"),
            };
        }
        Ok(pool
            .with_langs(&self.src_lang, &self.tgt_lang)
            .with_max_concurrent(self.max_concurrent_backends))
    }

    fn backend(&self, entry: &BackendSpec, corpus: &ParallelCorpus) -> anyhow::Result<Backend> {
        let name = entry.name.clone().unwrap_or_else(|| match entry.system_id {
            Some(i) => format!("{}-{}", entry.role, i),
            None => entry.role.to_string(),
        });
        let b = match entry.transport {
            Transport::Http => Backend::http(&name, entry.role, entry.endpoint.clone().unwrap_or_default(), entry.retry),
            Transport::Subprocess => {
                Backend::subprocess(&name, entry.role, entry.command.clone().unwrap_or_default(), entry.retry)
            }
            Transport::Mock => {
                let handler: Arc<dyn ensemble_forge::backends::MockHandler> = match entry.role {
                    Role::Translator => Arc::new(copy_translator),
                    Role::Fuser => Arc::new(OverlapFuser),
                    Role::Enhancer => Arc::new(EchoEnhancer),
                    Role::Embedder => Arc::new(HashEmbedBackend),
                    Role::Reward => Arc::new(lookup_scorer(corpus)),
                    Role::Ranker => bail!("role ranker cannot be configured"),
                };
                Backend::mock(&name, entry.role, handler)
            }
        };
        Ok(match entry.system_id {
            Some(i) => b.with_system_id(i),
            None => b,
        })
    }

    pub fn encoder(&self, pool: &Pool) -> anyhow::Result<StateEncoder> {
        Ok(match self.state_encoder {
            EncoderKind::Hashed => StateEncoder::Hashed,
            EncoderKind::Backend => StateEncoder::Backend(
                pool.embedder()
                    .cloned()
                    .context("state_encoder = \"backend\" needs an embedder backend")?,
            ),
        })
    }
}

fn copy_translator(req: &Request) -> Result<Response, String> {
    match req {
        Request::Translate { source, .. } => Ok(Response::Translation(source.clone())),
        other => Err(format!("translator cannot serve {} requests", other.role())),
    }
}

fn reference_lookup(corpus: &ParallelCorpus) -> ReferenceLookup {
    let refs: HashMap<String, String> = corpus
        .entries
        .iter()
        .map(|e| (e.source.clone(), e.reference.clone()))
        .collect();
    Arc::new(move |s: &str| refs.get(s).cloned())
}

fn lookup_scorer(corpus: &ParallelCorpus) -> ReferenceScorer {
    ReferenceScorer::new(reference_lookup(corpus))
}
