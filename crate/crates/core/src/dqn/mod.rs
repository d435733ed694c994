//! Deep Q-learning over the system pool: ε-greedy top-K selection,
//! experience replay and TD updates against a target network.
//!
//! Each environment step encodes one source sentence, selects K systems,
//! translates with them, fuses, and scores the fused output against the
//! reference. The shared reward is credited to every selected system as a
//! separate transition, so the action space stays the L systems.

mod replay;

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::backends::{CostLedger, Pool};
use crate::corpus::{CorpusEntry, ParallelCorpus};
use crate::embedder::{StateEncoder, StateVector};
use crate::error::{Error, Result};
use crate::metrics::sentence_reward;
use crate::qnet::{adam_step, soft_update, AdamState, Architecture, Matrix, QNetwork};
use crate::rng::SeededRng;
use crate::scalar::{cast_slice, Scalar};

pub use replay::{ReplayBuffer, Transition};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainerConfig {
    pub batch_size: usize,
    /// Environment steps per optimizer step.
    pub steps_batch_size: usize,
    pub gamma: f64,
    pub eps_start: f64,
    pub eps_end: f64,
    pub eps_decay: f64,
    pub tau_polyak: f64,
    /// Optimizer steps between hard target syncs.
    pub target_update_interval: usize,
    pub memory_size: usize,
    pub lr: f64,
    pub episodes: usize,
    pub episode_len: usize,
    pub k: usize,
    /// Every transition is terminal (TD target = reward).
    pub bandit_mode: bool,
    pub moving_average_window: usize,
    /// Environment steps between learning-curve rows.
    pub log_interval: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            steps_batch_size: 8,
            gamma: 0.99,
            eps_start: 0.9,
            eps_end: 0.05,
            eps_decay: 8000.0,
            tau_polyak: 1e-3,
            target_update_interval: 100,
            memory_size: 50_000,
            lr: 4e-5,
            episodes: 30,
            episode_len: 1000,
            k: 3,
            bandit_mode: true,
            moving_average_window: 100,
            log_interval: 100,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self, num_systems: usize) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(0.0..1.0).contains(&self.gamma) {
            return bad(format!("gamma {} not in [0, 1)", self.gamma));
        }
        if !(0.0..=1.0).contains(&self.eps_end) || !(0.0..=1.0).contains(&self.eps_start) || self.eps_end > self.eps_start {
            return bad(format!("need 0 <= eps_end <= eps_start <= 1, got {} and {}", self.eps_end, self.eps_start));
        }
        if !(self.eps_decay > 0.0) {
            return bad(format!("eps_decay {} must be positive", self.eps_decay));
        }
        if !(0.0..=1.0).contains(&self.tau_polyak) {
            return bad(format!("tau_polyak {} not in [0, 1]", self.tau_polyak));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("lr {} must be positive", self.lr));
        }
        for (name, v) in [
            ("batch_size", self.batch_size),
            ("steps_batch_size", self.steps_batch_size),
            ("target_update_interval", self.target_update_interval),
            ("memory_size", self.memory_size),
            ("episode_len", self.episode_len),
            ("k", self.k),
            ("moving_average_window", self.moving_average_window),
            ("log_interval", self.log_interval),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.k >= num_systems {
            return bad(format!("k = {} must be below the pool size {num_systems}", self.k));
        }
        if self.batch_size > self.memory_size {
            return bad(format!("batch_size {} exceeds memory_size {}", self.batch_size, self.memory_size));
        }
        Ok(())
    }
}

/// `eps_end + (eps_start - eps_end) * exp(-step / eps_decay)`.
pub fn epsilon_at(step: u64, cfg: &TrainerConfig) -> f64 {
    cfg.eps_end + (cfg.eps_start - cfg.eps_end) * (-(step as f64) / cfg.eps_decay).exp()
}

/// Indices of `q` by descending value, ties to the lower index.
pub fn rank_by_q<T: Scalar>(q: &[T]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..q.len()).collect();
    idx.sort_by(|&a, &b| q[b].partial_cmp(&q[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx
}

/// ε-greedy top-K. One uniform draw decides exploration; exploring picks K
/// distinct systems uniformly. Either way the result is ordered by
/// descending Q (ties to the lower index).
pub fn select_action_set<T: Scalar>(q: &[T], k: usize, eps: f64, rng: &mut SeededRng) -> Result<Vec<usize>> {
    if k > q.len() {
        return Err(Error::invalid(format!("K = {k} exceeds the {} available actions", q.len())));
    }
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::invalid(format!("epsilon {eps} not in [0, 1]")));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("Q-values".into()));
    }
    let explore = rng.unit() < eps;
    let ranked = rank_by_q(q);
    if !explore {
        return Ok(ranked[..k].to_vec());
    }
    let picked = rng.choose_distinct(q.len(), k);
    Ok(ranked.into_iter().filter(|i| picked.contains(i)).collect())
}

/// Greedy top-K for a state.
pub fn greedy_select<T: Scalar>(net: &QNetwork<T>, state: &StateVector, k: usize) -> Result<Vec<usize>> {
    let q = net.forward(&cast_slice(state.as_slice()))?;
    if k > q.len() {
        return Err(Error::invalid(format!("K = {k} exceeds the {} available actions", q.len())));
    }
    Ok(rank_by_q(&q)[..k].to_vec())
}

/// Huber loss with delta 1 and its derivative.
pub fn huber<T: Scalar>(d: T) -> (T, T) {
    let half = T::from_f64_lossy(0.5);
    if d.abs() <= T::one() {
        (half * d * d, d)
    } else {
        (d.abs() - half, d.signum())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TdParams {
    pub gamma: f64,
    pub bandit_mode: bool,
}

/// Mean Huber TD error over `batch` and its gradient for `online`.
///
/// Targets are `r` for terminal transitions or in bandit mode, otherwise
/// `r + gamma * max_a target(s', a)`. No gradient flows through targets.
pub fn td_loss_and_grads<T: Scalar>(
    online: &QNetwork<T>,
    target: &QNetwork<T>,
    batch: &[&Transition],
    td: TdParams,
) -> Result<(T, QNetwork<T>)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty TD batch"));
    }
    let l = online.num_actions();
    if let Some(t) = batch.iter().find(|t| t.a >= l) {
        return Err(Error::invalid(format!("action {} outside {l} actions", t.a)));
    }
    let states: Vec<Vec<T>> = batch.iter().map(|t| cast_slice(t.s.as_slice())).collect();
    let mut y: Vec<T> = batch.iter().map(|t| T::from_f64_lossy(t.r)).collect();
    let chained: Vec<usize> = (0..batch.len())
        .filter(|&i| !(td.bandit_mode || batch[i].terminal))
        .collect();
    if !chained.is_empty() {
        let next: Vec<Vec<T>> = chained.iter().map(|&i| cast_slice(batch[i].s_next.as_slice())).collect();
        let refs: Vec<&[T]> = next.iter().map(Vec::as_slice).collect();
        let qn = target.forward_batch(&refs)?;
        let gamma = T::from_f64_lossy(td.gamma);
        for (row, &i) in chained.iter().enumerate() {
            let best = qn.row(row).iter().copied().fold(T::neg_infinity(), T::max);
            y[i] += gamma * best;
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("TD targets".into()));
    }
    let refs: Vec<&[T]> = states.iter().map(Vec::as_slice).collect();
    let n = T::from_usize(batch.len()).expect("batch size");
    online.value_and_grad(&refs, |q| {
        let mut g = Matrix::zeros(q.rows(), q.cols());
        let mut loss = T::zero();
        for (i, t) in batch.iter().enumerate() {
            let (li, di) = huber(q.row(i)[t.a] - y[i]);
            loss += li;
            g.row_mut(i)[t.a] = di / n;
        }
        Ok((loss / n, g))
    })
}

/// Translate with the selected systems, fuse (candidates in ascending
/// system order), and score the fusion against the reference. Returns the
/// reward in [0, 1] and the fused text.
pub fn compute_reward(entry: &CorpusEntry, selected: &[usize], pool: &Pool, ledger: &CostLedger) -> Result<(f64, String)> {
    let mut systems = selected.to_vec();
    systems.sort_unstable();
    let run = || -> Result<(f64, String)> {
        let cands = pool.translate_many(&systems, entry.id, &entry.source, ledger)?;
        let fused = pool.fuse(entry.id, &entry.source, &cands, ledger)?;
        Ok((sentence_reward(&fused, &entry.reference), fused))
    };
    run().map_err(|e| e.in_sentence(entry.id))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub episode: usize,
    pub step: u64,
    pub eps: f64,
    /// Moving average of step rewards.
    pub mean_reward: f64,
    /// Mean TD loss since the previous row; NaN before the first update.
    pub loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome<T> {
    pub params: QNetwork<T>,
    pub curve: Vec<CurvePoint>,
    /// Mean step reward of each episode.
    pub episode_rewards: Vec<f64>,
    pub optimizer_steps: u64,
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    let io = |e| Error::io(path, e);
    writeln!(w, "episode,step,eps,mean_reward,loss").map_err(io)?;
    for p in curve {
        writeln!(w, "{},{},{:.6},{:.6},{:.6}", p.episode, p.step, p.eps, p.mean_reward, p.loss).map_err(io)?;
    }
    w.flush().map_err(io)
}

/// Sentence order of one episode: concatenated seeded shuffles of the
/// corpus, cut to `len`.
fn episode_order(n: usize, len: usize, rng: &mut SeededRng) -> Vec<usize> {
    let mut order = Vec::with_capacity(len + n);
    while order.len() < len {
        let mut perm: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut perm);
        order.extend(perm);
    }
    order.truncate(len);
    order
}

/// Train a Q-network for the pool.
///
/// The network is initialized from `seed`; shuffling, exploration and
/// replay sampling use separate streams derived from it. Every
/// `steps_batch_size` environment steps (once the buffer holds a batch) one
/// Adam step runs, followed by a Polyak update of the target network and,
/// every `target_update_interval` optimizer steps, a hard sync.
pub fn run_training<T: Scalar>(
    corpus: &ParallelCorpus,
    pool: &Pool,
    encoder: &StateEncoder,
    cfg: &TrainerConfig,
    seed: u64,
    ledger: &CostLedger,
) -> Result<TrainingOutcome<T>> {
    if corpus.is_empty() {
        return Err(Error::invalid("training corpus is empty"));
    }
    let l = pool.size();
    cfg.validate(l)?;
    let mut online = QNetwork::<T>::init(Architecture::standard(l), seed)?;
    let mut outcome = TrainingOutcome {
        params: online.clone(),
        curve: Vec::new(),
        episode_rewards: Vec::new(),
        optimizer_steps: 0,
    };
    if cfg.episodes == 0 {
        return Ok(outcome);
    }
    let states: Vec<Arc<StateVector>> = corpus
        .entries
        .iter()
        .map(|e| encoder.encode(e.id, &e.source, ledger).map(Arc::new).map_err(|err| err.in_sentence(e.id)))
        .collect::<Result<_>>()?;

    let mut target = online.clone();
    let mut adam = AdamState::<T>::new(online.params().len());
    let mut buffer = ReplayBuffer::new(cfg.memory_size);
    let mut rng_order = SeededRng::stream(seed, 1);
    let mut rng_act = SeededRng::stream(seed, 2);
    let mut rng_replay = SeededRng::stream(seed, 3);
    let td = TdParams {
        gamma: cfg.gamma,
        bandit_mode: cfg.bandit_mode,
    };
    let lr = T::from_f64_lossy(cfg.lr);
    let tau = T::from_f64_lossy(cfg.tau_polyak);

    let mut step: u64 = 0;
    let mut window = std::collections::VecDeque::with_capacity(cfg.moving_average_window);
    let mut window_sum = 0.0;
    let (mut loss_sum, mut loss_n) = (0.0, 0u64);

    for episode in 0..cfg.episodes {
        let order = episode_order(corpus.len(), cfg.episode_len, &mut rng_order);
        let mut episode_sum = 0.0;
        for (t, &idx) in order.iter().enumerate() {
            let entry = &corpus.entries[idx];
            let s = &states[idx];
            let eps = epsilon_at(step, cfg);
            let q = online.forward(&cast_slice(s.as_slice()))?;
            let selected = select_action_set(&q, cfg.k, eps, &mut rng_act)?;
            let (r, _) = compute_reward(entry, &selected, pool, ledger)?;
            let terminal = t + 1 == order.len();
            let s_next = if terminal { s.clone() } else { states[order[t + 1]].clone() };
            for &a in &selected {
                buffer.push(Transition {
                    s: s.clone(),
                    a,
                    r,
                    s_next: s_next.clone(),
                    terminal,
                })?;
            }
            step += 1;
            episode_sum += r;
            window.push_back(r);
            window_sum += r;
            if window.len() > cfg.moving_average_window {
                window_sum -= window.pop_front().expect("non-empty window");
            }

            if step % cfg.steps_batch_size as u64 == 0 && buffer.len() >= cfg.batch_size {
                let batch = buffer.sample(cfg.batch_size, &mut rng_replay)?;
                let (loss, grads) = td_loss_and_grads(&online, &target, &batch, td)?;
                adam_step(online.params_mut(), grads.params(), &mut adam, lr)?;
                soft_update(&mut target, &online, tau)?;
                outcome.optimizer_steps += 1;
                if outcome.optimizer_steps % cfg.target_update_interval as u64 == 0 {
                    target = online.clone();
                }
                loss_sum += loss.to_f64_lossy();
                loss_n += 1;
            }

            if step % cfg.log_interval as u64 == 0 {
                outcome.curve.push(CurvePoint {
                    episode,
                    step,
                    eps,
                    mean_reward: window_sum / window.len() as f64,
                    loss: if loss_n == 0 { f64::NAN } else { loss_sum / loss_n as f64 },
                });
                loss_sum = 0.0;
                loss_n = 0;
            }
        }
        let mean = episode_sum / order.len() as f64;
        log::info!("episode {episode}: mean reward {mean:.4}, eps {:.3}", epsilon_at(step, cfg));
        outcome.episode_rewards.push(mean);
    }
    if !online.is_finite() {
        return Err(Error::NonFinite("trained Q-network".into()));
    }
    outcome.params = online;
    Ok(outcome)
}
