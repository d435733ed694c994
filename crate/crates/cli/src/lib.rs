//! Command-line driver. [`run`] parses arguments, executes one subcommand
//! and maps the outcome to an exit code: 0 on success, 1 for usage,
//! configuration or other errors, 2 when a backend failed.

mod config;

use std::ffi::OsString;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use ensemble_forge::backends::{pool_handler, CostLedger, Pool, StubServer};
use ensemble_forge::corpus::{CandidateCache, ParallelCorpus};
use ensemble_forge::dqn::{run_training, write_curve_csv};
use ensemble_forge::pipeline::{
    brute_force_oracle, degradation_probe, evaluate, generate_candidates, triplet_histogram, write_histogram_tsv,
    write_probe_tsv, write_reports, EvalContext, Method, Scorer, Selector, ALL_METHOD_NAMES,
};
use ensemble_forge::qnet::{load_checkpoint, save_checkpoint};
use ensemble_forge::reward_model::{load_rm, rm_train, save_rm, write_score_dump};
use ensemble_forge::{QNet, RmParams};
use serde_json::{json, Value};

pub use config::{BackendSpec, EncoderKind, MockPool, RunConfig, Transport};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_BACKEND: i32 = 2;

/// File name of the effective configuration written with every output set.
pub const EFFECTIVE_CONFIG: &str = "effective_config.toml";

#[derive(Debug, Parser)]
#[command(name = "ensemble-forge", version, about = "Learned system selection and fusion for ensemble translation")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `seed` from the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = "ENSEMBLE_FORGE_OUT", default_value = "ensemble-forge-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Translate both corpora with every system and cache the candidates.
    GenCandidates,
    /// Train the selection network.
    TrainDqn,
    /// Train the linear reward model on cached candidates.
    TrainRm {
        /// Candidate cache of the training corpus; generated when omitted.
        #[arg(long)]
        candidates: Option<PathBuf>,
    },
    /// Evaluate selection and fusion methods on the evaluation corpus.
    Eval {
        #[arg(long)]
        qnet: Option<PathBuf>,
        #[arg(long)]
        rm: Option<PathBuf>,
        /// Comma-separated method names; overrides `methods` in the config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
    },
    /// Exhaustive best-subset search and selection histograms.
    Oracle {
        #[arg(long)]
        k: Option<usize>,
        /// Also tally the subsets this network selects.
        #[arg(long)]
        qnet: Option<PathBuf>,
        /// Also tally a fixed ranking (comma-separated system ids).
        #[arg(long, value_delimiter = ',')]
        fixed_rank: Option<Vec<usize>>,
    },
    /// Fuse the reference with itself and with the best candidates.
    ProbeTable1,
    /// Serve the configured pool over HTTP or the stdin/stdout line protocol.
    ServeStub(ServeArgs),
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
struct ServeArgs {
    #[arg(long)]
    port: Option<u16>,
    #[arg(long)]
    stdio: bool,
    /// Translator answering `translate` requests on stdio.
    #[arg(long, default_value_t = 0, requires = "stdio")]
    system: usize,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<ensemble_forge::Error> for Failure {
    fn from(e: ensemble_forge::Error) -> Self {
        Failure::Run(e.into())
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

/// Run the tool with `argv` (program name first) and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\nRun with --help for usage.");
            EXIT_USAGE
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            let backend = e
                .chain()
                .any(|c| c.downcast_ref::<ensemble_forge::Error>().is_some_and(|e| e.is_backend())
                    || c.downcast_ref::<ensemble_forge::backends::BackendError>().is_some());
            if backend {
                EXIT_BACKEND
            } else {
                EXIT_USAGE
            }
        }
    }
}

struct Session {
    cfg: RunConfig,
    out: PathBuf,
    train: ParallelCorpus,
    eval: ParallelCorpus,
    pool: Pool,
}

impl Session {
    fn open(g: &Global) -> Result<Self, Failure> {
        let mut cfg = match &g.config {
            Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
            None => RunConfig::default(),
        };
        if let Some(s) = g.seed {
            cfg.seed = s;
        }
        cfg.validate().map_err(|e| usage(format!("invalid configuration: {e:#}")))?;
        std::fs::create_dir_all(&g.out).with_context(|| format!("creating {}", g.out.display()))?;
        std::fs::write(g.out.join(EFFECTIVE_CONFIG), cfg.to_toml()).context("writing effective config")?;
        let (train, eval) = cfg.corpora()?;
        let pool = cfg.pool(&train, &eval)?;
        Ok(Self {
            cfg,
            out: g.out.clone(),
            train,
            eval,
            pool,
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn load_qnet(&self, p: &Path) -> anyhow::Result<QNet> {
        load_checkpoint(p, Some(self.pool.size())).with_context(|| format!("loading {}", p.display()))
    }
}

fn write_json(path: &Path, v: &Value) -> anyhow::Result<()> {
    let mut body = serde_json::to_string_pretty(v)?;
    body.push('\n');
    std::fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    if let Command::ServeStub(args) = &cli.command {
        return serve(&cli.global, args);
    }
    let s = Session::open(&cli.global)?;
    let ledger = CostLedger::new();
    match cli.command {
        Command::GenCandidates => {
            s.train.save_tsv(&s.path("train.tsv"))?;
            s.eval.save_tsv(&s.path("eval.tsv"))?;
            generate_candidates(&s.train, &s.pool, &ledger)?.save(&s.path("candidates_train.jsonl"))?;
            generate_candidates(&s.eval, &s.pool, &ledger)?.save(&s.path("candidates_eval.jsonl"))?;
        }
        Command::TrainDqn => {
            let encoder = s.cfg.encoder(&s.pool)?;
            let out = run_training::<f64>(&s.train, &s.pool, &encoder, &s.cfg.trainer(), s.cfg.seed, &ledger)?;
            save_checkpoint(&out.params, &s.path("qnet.ckpt"))?;
            write_curve_csv(&s.path("learning_curve.csv"), &out.curve)?;
            write_json(
                &s.path("training.json"),
                &json!({
                    "episode_rewards": out.episode_rewards,
                    "optimizer_steps": out.optimizer_steps,
                }),
            )?;
        }
        Command::TrainRm { candidates } => {
            let cache = match candidates {
                Some(p) => CandidateCache::load(&p)?,
                None => generate_candidates(&s.train, &s.pool, &ledger)?,
            };
            let p = rm_train(&s.train, &cache, RmParams::standard(), s.cfg.rm_lr, s.cfg.rm_steps, s.cfg.seed)?;
            save_rm(&p, &s.path("rm.ckpt"))?;
            write_score_dump(&p, &s.train, &cache, &s.path("rm_scores.csv"))?;
        }
        Command::Eval { qnet, rm, methods } => eval(&s, qnet, rm, methods)?,
        Command::Oracle { k, qnet, fixed_rank } => oracle(&s, k, qnet, fixed_rank, &ledger)?,
        Command::ProbeTable1 => {
            let cache = generate_candidates(&s.eval, &s.pool, &ledger)?;
            let report = degradation_probe(&s.eval, &cache, &s.pool, s.cfg.k, &ledger)?;
            write_probe_tsv(&s.path("probe_table1.tsv"), &report)?;
            write_json(&s.path("probe_table1.json"), &serde_json::to_value(&report).context("serializing probe")?)?;
        }
        Command::ServeStub(_) => unreachable!("handled above"),
    }
    Ok(())
}

fn eval(s: &Session, qnet: Option<PathBuf>, rm: Option<PathBuf>, methods: Option<Vec<String>>) -> Result<(), Failure> {
    let l = s.pool.size();
    let names = methods.or_else(|| s.cfg.methods.clone()).unwrap_or_else(|| {
        let mut v: Vec<String> = (0..l).map(|i| format!("single-{i}")).collect();
        v.extend(ALL_METHOD_NAMES.iter().filter(|m| **m != "single-N").map(|m| m.to_string()));
        v
    });
    let methods = names
        .iter()
        .map(|n| n.parse::<Method>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| usage(e.to_string()))?;
    let needs_q = methods
        .iter()
        .any(|m| matches!(m, Method::SmartGen | Method::SmartGenPlusPlus | Method::DqnBestSingle));
    let qnet = match qnet {
        Some(p) => Some(s.load_qnet(&p)?),
        None if needs_q => return Err(usage("the selected methods need a trained network (--qnet)")),
        None => None,
    };
    let rm = rm.map(|p| load_rm::<f64>(&p).with_context(|| format!("loading {}", p.display()))).transpose()?;
    let scorer = match &rm {
        Some(p) => Some(Scorer::Linear(p)),
        None => s.pool.scorer().map(|_| Scorer::Backend),
    };
    let encoder = s.cfg.encoder(&s.pool)?;
    let ctx = EvalContext {
        pool: &s.pool,
        encoder: &encoder,
        qnet: qnet.as_ref(),
        scorer,
        k: s.cfg.k,
        ccb: s.cfg.ccb(),
        seed: s.cfg.seed,
        ranker_latency_ms: s.cfg.ranker_latency_ms,
    };
    let (reports, timings) = evaluate(&s.eval, &methods, &ctx)?;
    write_reports(&s.out, &reports, &timings)?;
    Ok(())
}

fn oracle(
    s: &Session,
    k: Option<usize>,
    qnet: Option<PathBuf>,
    fixed_rank: Option<Vec<usize>>,
    ledger: &CostLedger,
) -> Result<(), Failure> {
    let k = k.unwrap_or(s.cfg.k);
    let mut best_sum = 0.0;
    for e in &s.eval.entries {
        best_sum += brute_force_oracle(e, &s.pool, k, ledger)?.best_score;
    }
    let h = triplet_histogram::<f64>(&s.eval, &Selector::Oracle, &s.pool, k, ledger)?;
    write_histogram_tsv(&s.path("oracle_histogram.tsv"), &h)?;
    let mut summary = json!({
        "k": k,
        "subsets": h.subsets.len(),
        "sentences": s.eval.len(),
        "mean_best_reward": best_sum / s.eval.len() as f64,
        "oracle_support": h.support(),
        "oracle_max_count": h.max_count(),
    });
    if let Some(p) = qnet {
        let net = s.load_qnet(&p)?;
        let encoder = s.cfg.encoder(&s.pool)?;
        let sel = Selector::Dqn {
            qnet: &net,
            encoder: &encoder,
        };
        let d = triplet_histogram(&s.eval, &sel, &s.pool, k, ledger)?;
        write_histogram_tsv(&s.path("dqn_histogram.tsv"), &d)?;
        summary["dqn_support"] = d.support().into();
    }
    if let Some(r) = fixed_rank {
        let f = triplet_histogram::<f64>(&s.eval, &Selector::FixedRank(r), &s.pool, k, ledger)?;
        write_histogram_tsv(&s.path("fixed_rank_histogram.tsv"), &f)?;
        summary["fixed_rank_support"] = f.support().into();
    }
    write_json(&s.path("oracle.json"), &summary)?;
    Ok(())
}

fn serve(g: &Global, args: &ServeArgs) -> Result<(), Failure> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p).map_err(|e| usage(format!("{e:#}")))?,
        None => RunConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(|e| usage(format!("invalid configuration: {e:#}")))?;
    let (train, eval) = cfg.corpora()?;
    let pool = Arc::new(cfg.pool(&train, &eval)?);
    if args.system >= pool.size() {
        return Err(usage(format!("--system {} but the pool has {} systems", args.system, pool.size())));
    }
    let handler = pool_handler(pool);
    if let Some(port) = args.port {
        let server = StubServer::start(&format!("127.0.0.1:{port}"), 4, handler).context("starting stub server")?;
        println!("listening on {}", server.url());
        std::io::stdout().flush().ok();
        server.join();
        return Ok(());
    }
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.context("reading stdin")?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = match serde_json::from_str::<Value>(&line) {
            Err(e) => json!({ "error": format!("invalid JSON: {e}") }),
            Ok(body) => match body.get("op").and_then(Value::as_str) {
                None => json!({ "error": "missing `op`" }),
                Some(op) => {
                    let path = if op == "translate" {
                        format!("/sys/{}/translate", args.system)
                    } else {
                        format!("/{op}")
                    };
                    let mut body = body.clone();
                    if let Some(o) = body.as_object_mut() {
                        o.remove("op");
                    }
                    handler(&path, &body).unwrap_or_else(|(_, msg)| json!({ "error": msg }))
                }
            },
        };
        writeln!(stdout, "{reply}").context("writing stdout")?;
        stdout.flush().context("writing stdout")?;
    }
    Ok(())
}
