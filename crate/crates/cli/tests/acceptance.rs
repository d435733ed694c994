//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion
//! and exits nonzero when any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use ensemble_forge::backends::*;
use ensemble_forge::ccb::*;
use ensemble_forge::corpus::ParallelCorpus;
use ensemble_forge::dqn::{compute_reward, greedy_select, run_training, TrainerConfig};
use ensemble_forge::embedder::{hash_embed, StateEncoder};
use ensemble_forge::metrics::*;
use ensemble_forge::pipeline::*;
use ensemble_forge::qnet::{Architecture, QNetwork};
use ensemble_forge::reward_model::*;
use ensemble_forge::rng::SeededRng;
use ensemble_forge::QNet;

const L: usize = 8;
const K: usize = 3;
const WORLD_SEED: u64 = 7;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures")
}

fn rows(name: &str) -> Vec<Vec<String>> {
    std::fs::read_to_string(fixtures().join(name))
        .unwrap_or_else(|e| panic!("{name}: {e}"))
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split('\t').map(str::to_owned).collect())
        .collect()
}

fn metric_oracles() -> Outcome {
    const TOL: f64 = 1e-4;
    let toks = TokenSequence::from_pretokenized;
    let sb = rows("sentence_bleu.tsv");
    let cb = rows("corpus_bleu.tsv");
    let cf = rows("chrf_pp.tsv");
    ensure!(sb.len() >= 10 && cb.len() >= 10 && cf.len() >= 10, "too few fixtures");
    let mut worst: f64 = 0.0;
    for r in &sb {
        let smoothing = if r[1] == "none" { Smoothing::None } else { Smoothing::ExpFloor };
        let refs: Vec<_> = r[3..].iter().map(|s| toks(s)).collect();
        let got = sentence_bleu(&toks(&r[2]), &refs, smoothing).map_err(|e| e.to_string())?.value;
        worst = worst.max((got - r[0].parse::<f64>().unwrap()).abs());
    }
    for r in &cb {
        let hyps: Vec<_> = r[1].split(" ||| ").map(toks).collect();
        let refs: Vec<Vec<_>> = r[2].split(" ||| ").map(|a| a.split(" ## ").map(toks).collect()).collect();
        let got = corpus_bleu(&hyps, &refs).map_err(|e| e.to_string())?.value;
        worst = worst.max((got - r[0].parse::<f64>().unwrap()).abs());
    }
    for r in &cf {
        worst = worst.max((chrf_pp(&r[1], &r[2]).value - r[0].parse::<f64>().unwrap()).abs());
    }
    ensure!(worst < TOL, "max fixture deviation {worst:.2e}");

    for s in ["the cat sat on the mat", "नमस्ते दुनिया , कैसे हो ?"] {
        let t = tokenize(s);
        let one = sentence_bleu(&t, &[t.clone()], Smoothing::ExpFloor).unwrap().value;
        let pooled = corpus_bleu(&[t.clone()], &[vec![t.clone()]]).unwrap().value;
        ensure!(one == 100.0 && pooled == 100.0 && chrf_pp(s, s).value == 100.0, "identity failed for {s:?}");
    }

    let world = PlantedWorld::new(L, K, 1).unwrap();
    let corpus = world.corpus(60, 3);
    let hyps: Vec<_> = corpus.entries.iter().map(|e| tokenize(&e.reference.replacen(' ', " x ", 1))).collect();
    let refs: Vec<Vec<_>> = corpus.entries.iter().map(|e| vec![tokenize(&e.reference)]).collect();
    let base = corpus_bleu(&hyps, &refs).unwrap().value;
    let mut rng = SeededRng::new(4);
    for _ in 0..20 {
        let mut idx: Vec<usize> = (0..hyps.len()).collect();
        rng.shuffle(&mut idx);
        let h: Vec<_> = idx.iter().map(|&i| hyps[i].clone()).collect();
        let r: Vec<_> = idx.iter().map(|&i| refs[i].clone()).collect();
        ensure!(corpus_bleu(&h, &r).unwrap().value == base, "corpus BLEU changed under permutation");
    }
    Ok(format!("{} fixtures, max dev {worst:.1e}", sb.len() + cb.len() + cf.len()))
}

fn fd_check(params: &mut [f64], analytic: &[f64], mut loss: impl FnMut(&[f64]) -> f64) -> f64 {
    const H: f64 = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + H;
        let up = loss(params);
        params[i] = orig - H;
        let down = loss(params);
        params[i] = orig;
        let n = (up - down) / (2.0 * H);
        worst = worst.max((analytic[i] - n).abs() / analytic[i].abs().max(n.abs()).max(1e-5));
    }
    worst
}

fn gradient_checks() -> Outcome {
    let mut rng = SeededRng::new(31);
    let u = move |lo: f64, hi: f64, rng: &mut SeededRng| lo + (hi - lo) * rng.unit();
    let (mut q_worst, mut rm_worst): (f64, f64) = (0.0, 0.0);
    for _ in 0..100 {
        let arch = Architecture {
            input_dim: 3 + rng.below(10),
            hidden_dim: 2 + rng.below(9),
            num_blocks: rng.below(4),
            num_actions: 2 + rng.below(6),
        };
        let mut net = QNetwork::<f64>::init(arch, rng.next_u64()).unwrap();
        for p in net.params_mut() {
            *p += u(-0.3, 0.3, &mut rng);
        }
        let x: Vec<f64> = (0..arch.input_dim).map(|_| u(-1.0, 1.0, &mut rng)).collect();
        let g: Vec<f64> = (0..arch.num_actions).map(|_| u(-1.0, 1.0, &mut rng)).collect();
        let analytic = net.backward(&x, &g).unwrap().params().to_vec();
        let mut probe = net.clone();
        let err = fd_check(net.params_mut(), &analytic, |p| {
            probe.params_mut().copy_from_slice(p);
            probe.forward(&x).unwrap().iter().zip(&g).map(|(a, b)| a * b).sum()
        });
        q_worst = q_worst.max(err);
    }
    for _ in 0..100 {
        let dim = 1 + rng.below(24);
        let feats = |n: usize, rng: &mut SeededRng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| u(-2.0, 2.0, rng)).collect()).collect()
        };
        let np = 1 + rng.below(5);
        let nr = 1 + rng.below(5);
        let sample = FeatureSample {
            preferred: feats(np, &mut rng),
            rejected: feats(nr, &mut rng),
        };
        let mut v: Vec<f64> = (0..=dim).map(|_| u(-1.0, 1.0, &mut rng)).collect();
        let unflat = |v: &[f64]| RmParams {
            weights: v[..dim].to_vec(),
            bias: v[dim],
        };
        let g = rm_loss_features(&unflat(&v), &sample).unwrap().1;
        let mut analytic = g.weights.clone();
        analytic.push(g.bias);
        rm_worst = rm_worst.max(fd_check(&mut v, &analytic, |p| rm_loss_features(&unflat(p), &sample).unwrap().0));
    }
    ensure!(q_worst < 1e-4 && rm_worst < 1e-4, "worst relative error q {q_worst:.2e}, rm {rm_worst:.2e}");
    Ok(format!("200 configs, worst rel err q {q_worst:.1e} rm {rm_worst:.1e}"))
}

fn rm_loss() -> Outcome {
    let mut rng = SeededRng::new(32);
    for np in 1..=5 {
        for nr in 1..=5 {
            for _ in 0..20 {
                let p: Vec<f64> = (0..np).map(|_| rng.below(9) as f64 * 0.5 - 2.0).collect();
                let r: Vec<f64> = (0..nr).map(|_| rng.below(9) as f64 * 0.5 - 2.0).collect();
                let pairs: Vec<f64> = p.iter().flat_map(|a| r.iter().map(move |b| neg_log_sigmoid(a - b))).collect();
                let brute = pairs.iter().sum::<f64>() / pairs.len() as f64;
                let got = pairwise_loss(&p, &r).unwrap().0;
                ensure!(got == brute, "P={p:?} R={r:?}: {got} vs {brute}");
            }
            let (eq, _, _) = pairwise_loss(&vec![0.4; np], &vec![0.4; nr]).unwrap();
            ensure!((eq - std::f64::consts::LN_2).abs() <= 1e-12, "equal scores gave {eq}");
        }
    }
    let dir: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect();
    let point = |sign: f64, rng: &mut SeededRng| -> Vec<f64> { dir.iter().map(|d| sign * d * 0.5 + (rng.unit() - 0.5) * 0.4).collect() };
    let samples: Vec<FeatureSample<f64>> = (0..200)
        .map(|_| {
            let (np, nr) = (1 + rng.below(4), 1 + rng.below(4));
            FeatureSample {
                preferred: (0..np).map(|_| point(1.0, &mut rng)).collect(),
                rejected: (0..nr).map(|_| point(-1.0, &mut rng)).collect(),
            }
        })
        .collect();
    let trained = rm_train_features(&samples, RmParams::zeros(16), 0.5, 5000, 1).unwrap();
    let loss = mean_loss(&trained, &samples).unwrap();
    ensure!(loss < 0.01, "separable training stalled at {loss}");
    Ok(format!("500 brute-force cases exact, separable loss {loss:.1e}"))
}

struct MarkEnv {
    rejected_calls: usize,
}

impl CcbEnv for MarkEnv {
    fn rejected(&mut self) -> ensemble_forge::Result<RejectedSet> {
        self.rejected_calls += 1;
        Ok(vec![ScoredCandidate { system_id: 99, text: "rejected".into(), reward: 0.0 }])
    }
    fn enhance(&mut self, prompt: &str) -> ensemble_forge::Result<String> {
        Ok(format!("{}*", parse_enhancer_prompt(prompt).expect("well-formed prompt").candidate))
    }
    fn rescore(&mut self, _: &str) -> ensemble_forge::Result<f64> {
        Ok(1.0)
    }
}

fn ccb_apply(r: &[f64], tau: f64) -> (Vec<ScoredCandidate>, usize) {
    let sel = SelectedSet::new(
        r.iter()
            .enumerate()
            .map(|(i, &reward)| ScoredCandidate { system_id: i, text: format!("c{i}"), reward })
            .collect(),
    )
    .unwrap();
    let cfg = CcbConfig { tau, lazy_rejected: true, rescore_after: false };
    let mut env = MarkEnv { rejected_calls: 0 };
    let out = apply_ccb(0, "src", &sel, &cfg, ("en", "hi"), &mut env).unwrap();
    (out.candidates, env.rejected_calls)
}

fn ccb_grid() -> Outcome {
    let mut cases = 0;
    for a in 0..=10 {
        for b in 0..=a {
            for c in 0..=b {
                let r = [a as f64 / 10.0, b as f64 / 10.0, c as f64 / 10.0];
                for tau in [0.0, 0.2, 0.5] {
                    // position m (1-based, m >= 2) is enhanced iff r[m-1] - r[m] >= tau
                    let want: BTreeSet<usize> = (1..3).filter(|&i| r[i - 1] - r[i] >= tau).collect();
                    let (out, _) = ccb_apply(&r, tau);
                    let got: BTreeSet<usize> = (0..3).filter(|&i| out[i].text.ends_with('*')).collect();
                    ensure!(got == want, "rewards {r:?} tau {tau}: enhanced {got:?}, expected {want:?}");
                    cases += 1;
                }
                let (out, calls) = ccb_apply(&r, f64::INFINITY);
                ensure!(calls == 0 && out.iter().all(|c| !c.text.ends_with('*')), "tau=inf changed {r:?}");
            }
        }
        let (out, calls) = ccb_apply(&[a as f64 / 10.0], 0.0);
        ensure!(calls == 0 && out[0].text == "c0", "K=1 changed the candidate");
    }
    Ok(format!("{cases} grid cases match"))
}

struct Trained {
    world: PlantedWorld,
    held_out: ParallelCorpus,
    pool: Pool,
    qnet: QNet,
}

fn train() -> Trained {
    let world = PlantedWorld::new(L, K, WORLD_SEED).unwrap();
    let pool = make_mock_pool(&MockPoolKind::Planted { k: K }, L, WORLD_SEED, &world.corpus(1, 0)).unwrap();
    let train = world.corpus(2000, 1);
    let held_out = world.corpus(500, 2);
    let out = run_training::<f64>(&train, &pool, &StateEncoder::Hashed, &TrainerConfig::default(), WORLD_SEED, &CostLedger::new())
        .unwrap();
    Trained { world, held_out, pool, qnet: out.params }
}

fn dqn_planted(t: &Trained) -> Outcome {
    let ledger = CostLedger::new();
    let mut rng = SeededRng::new(11);
    let (mut greedy, mut random, mut oracle) = (0.0, 0.0, 0.0);
    let mut planted_hits = 0;
    for e in &t.held_out.entries {
        let sel = greedy_select(&t.qnet, &hash_embed(&e.source), K).unwrap();
        let planted = t.world.planted_subset(&e.source).unwrap();
        planted_hits += usize::from(sel.iter().all(|s| planted.contains(s)));
        greedy += compute_reward(e, &sel, &t.pool, &ledger).unwrap().0;
        random += compute_reward(e, &rng.choose_distinct(L, K), &t.pool, &ledger).unwrap().0;
        oracle += brute_force_oracle(e, &t.pool, K, &ledger).unwrap().best_score;
    }
    let n = t.held_out.len() as f64;
    let (greedy, random, oracle) = (greedy / n, random / n, oracle / n);
    let detail = format!(
        "greedy {greedy:.4} oracle {oracle:.4} ({:.3}x) random {random:.4}, planted subset hit {planted_hits}/500",
        greedy / oracle
    );
    ensure!(greedy >= 0.9 * oracle && greedy - random >= 0.15, "{detail}");
    Ok(detail)
}

fn eval_ctx<'a>(pool: &'a Pool, q: &'a QNet) -> EvalContext<'a, f64> {
    EvalContext {
        pool,
        encoder: &StateEncoder::Hashed,
        qnet: Some(q),
        scorer: Some(Scorer::Backend),
        k: K,
        ccb: CcbConfig::default(),
        seed: 5,
        ranker_latency_ms: 0.0,
    }
}

fn cost(t: &Trained) -> Outcome {
    let mut corpus = t.held_out.clone();
    corpus.entries.truncate(100);
    let methods = [Method::SmartGen, Method::FullPoolFusion, Method::SmartGenPlusPlus];
    let (r, _) = evaluate(&corpus, &methods, &eval_ctx(&t.pool, &t.qnet)).map_err(|e| e.to_string())?;
    let calls = |i: usize| r[i].cost.per_role[&Role::Translator].calls;
    let (smart, full, pp) = (calls(0), calls(1), calls(2));
    ensure!(smart == 100 * K as u64 && full == 100 * L as u64, "smartgen {smart}, full pool {full}");
    ensure!(r[0].cost.call_ratio_vs_full_pool == 8.0 / 3.0, "ratio {}", r[0].cost.call_ratio_vs_full_pool);
    ensure!((smart..=full).contains(&pp), "smartgen++ made {pp} calls");
    Ok(format!("smartgen {smart}, full {full}, smartgen++ {pp}, ratio 8/3"))
}

fn oracle(t: &Trained) -> Outcome {
    let ledger = CostLedger::new();
    for e in &t.held_out.entries[..100] {
        let o = brute_force_oracle(e, &t.pool, K, &ledger).unwrap();
        ensure!(o.scores.len() == 56, "{} subsets enumerated", o.scores.len());
        let smart = smartgen_translate(e, &t.qnet, &t.pool, &StateEncoder::Hashed, K, &ledger).unwrap();
        ensure!(o.best_score >= sentence_reward(&smart.text, &e.reference), "sentence {}: smartgen beat oracle", e.id);
    }
    let fixed = triplet_histogram::<f64>(&t.held_out, &Selector::FixedRank(vec![2, 5, 0]), &t.pool, K, &ledger).unwrap();
    let full = triplet_histogram::<f64>(&t.held_out, &Selector::Oracle, &t.pool, K, &ledger).unwrap();
    ensure!(fixed.support() == 1, "fixed-rank support {}", fixed.support());
    ensure!(full.support() >= 28, "oracle support {}", full.support());
    Ok(format!("56 subsets, dominance on 100 sentences, supports fixed 1 oracle {}", full.support()))
}

fn probe(t: &Trained) -> Outcome {
    let pool = make_mock_pool(&MockPoolKind::NoisyReference { dropout: None }, L, WORLD_SEED, &t.held_out).unwrap();
    let ledger = CostLedger::new();
    let cache = generate_candidates(&t.held_out, &pool, &ledger).map_err(|e| e.to_string())?;
    let p = degradation_probe(&t.held_out, &cache, &pool, K, &ledger).map_err(|e| e.to_string())?;
    let (a, b) = (p.rows[0].corpus_bleu, p.rows[1].corpus_bleu);
    ensure!(a >= b, "reference x K {a:.2} < reference + top {b:.2}");
    Ok(format!("reference x K {a:.2} >= reference + top-{} {b:.2}", K - 1))
}

/// The audit log records enhancer wall-clock time; everything else in it
/// must reproduce exactly.
fn without_latency(jsonl: &[u8]) -> Vec<u8> {
    let text = std::str::from_utf8(jsonl).unwrap();
    let mut out = String::new();
    for line in text.lines() {
        let mut v: serde_json::Value = serde_json::from_str(line).unwrap();
        v.as_object_mut().unwrap().remove("enhancer_latency_ms").expect("latency field");
        out.push_str(&v.to_string());
        out.push('\n');
    }
    out.into_bytes()
}

fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.file_name().unwrap() != "timings.json")
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            let bytes = std::fs::read(&p).unwrap();
            let bytes = if name == "ccb_audit.jsonl" { without_latency(&bytes) } else { bytes };
            (name, bytes)
        })
        .collect();
    files.sort();
    files
}

fn determinism() -> Outcome {
    let work = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = work.path().join("run.toml");
    std::fs::write(
        &cfg,
        "seed = 3\nepisodes = 2\nepisode_len = 300\nsynthetic_train_sentences = 200\nsynthetic_eval_sentences = 60\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_ensemble-forge");
    let run = |out: &Path, args: &[&str]| -> Result<(), String> {
        let status = Command::new(bin)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(out)
            .args(args)
            .env_remove("RUST_LOG")
            .output()
            .map_err(|e| e.to_string())?;
        ensure!(status.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&status.stderr));
        Ok(())
    };
    let mut snaps = Vec::new();
    for i in 0..2 {
        let out = work.path().join(format!("run{i}"));
        run(&out, &["train-dqn"])?;
        let ckpt = out.join("qnet.ckpt");
        let eval_out = work.path().join(format!("eval{i}"));
        run(&eval_out, &["eval", "--qnet", ckpt.to_str().unwrap()])?;
        snaps.push((snapshot(&out), snapshot(&eval_out)));
    }
    let names = |s: &[(String, Vec<u8>)]| s.iter().map(|f| f.0.clone()).collect::<Vec<_>>();
    ensure!(names(&snaps[0].0).contains(&"qnet.ckpt".into()), "no checkpoint written");
    ensure!(names(&snaps[0].1).contains(&"report.json".into()), "no report written");
    let audit = snaps[0].1.iter().find(|f| f.0 == "ccb_audit.jsonl").map_or(0, |f| f.1.len());
    ensure!(audit > 0, "empty audit log");
    for (a, b) in snaps[0].0.iter().zip(&snaps[1].0).chain(snaps[0].1.iter().zip(&snaps[1].1)) {
        ensure!(a == b, "{} differs between runs", a.0);
    }
    ensure!(snaps[0].0.len() == snaps[1].0.len() && snaps[0].1.len() == snaps[1].1.len(), "file sets differ");
    Ok(format!("{} files identical across two runs", snaps[0].0.len() + snaps[0].1.len()))
}

fn check(name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t0 = Instant::now();
    let res = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
    });
    let took = t0.elapsed();
    let (ok, detail) = match res {
        Ok(d) if took <= limit => (true, d),
        Ok(d) => (false, format!("{d}; over the {limit:?} limit")),
        Err(e) => (false, e),
    };
    println!("{} {name}: {detail} [{:.2}s]", if ok { "PASS" } else { "FAIL" }, took.as_secs_f64());
    ok
}

fn main() {
    let mins = |m: u64| Duration::from_secs(60 * m);
    let secs = Duration::from_secs;
    let mut ok = vec![
        check("metric oracle suite", secs(5), metric_oracles),
        check("gradient checks", secs(30), gradient_checks),
        check("reward-model loss", secs(30), rm_loss),
        check("correction block grid", secs(10), ccb_grid),
    ];
    let t0 = Instant::now();
    let trained = catch_unwind(train);
    let train_time = t0.elapsed();
    match &trained {
        Ok(t) => {
            ok.push(check("dqn planted subsets", mins(10).saturating_sub(train_time), || {
                dqn_planted(t).map(|d| format!("{d}, trained in {:.0}s", train_time.as_secs_f64()))
            }));
            ok.push(check("cost accounting", secs(10), || cost(t)));
            ok.push(check("oracle search", mins(2), || oracle(t)));
            ok.push(check("reference probe", mins(1), || probe(t)));
        }
        Err(_) => {
            for name in ["dqn planted subsets", "cost accounting", "oracle search", "reference probe"] {
                println!("FAIL {name}: training panicked");
                ok.push(false);
            }
        }
    }
    ok.push(check("deterministic cli runs", mins(5), determinism));
    let passed = ok.iter().filter(|&&b| b).count();
    println!("{passed}/{} criteria passed", ok.len());
    if passed != ok.len() {
        std::process::exit(1);
    }
}
