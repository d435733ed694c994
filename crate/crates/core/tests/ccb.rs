use std::collections::BTreeSet;

use ensemble_forge::ccb::*;
use ensemble_forge::Result;
use proptest::prelude::*;

/// Enhancer that appends `*` to the candidate named in the prompt and
/// records what it was asked.
#[derive(Default)]
struct MarkingEnv {
    rejected_calls: usize,
    enhanced: Vec<String>,
    identity: bool,
}

impl CcbEnv for MarkingEnv {
    fn rejected(&mut self) -> Result<RejectedSet> {
        self.rejected_calls += 1;
        Ok(vec![ScoredCandidate {
            system_id: 7,
            text: "other".into(),
            reward: 0.3,
        }])
    }

    fn enhance(&mut self, prompt: &str) -> Result<String> {
        let cand = parse_enhancer_prompt(prompt).expect("prompt parses").candidate;
        self.enhanced.push(cand.clone());
        Ok(if self.identity { cand } else { format!("{cand}*") })
    }

    fn rescore(&mut self, _: &str) -> Result<f64> {
        Ok(1.0)
    }
}

fn selected(rewards: &[f64]) -> SelectedSet {
    SelectedSet::new(
        rewards
            .iter()
            .enumerate()
            .map(|(i, &reward)| ScoredCandidate {
                system_id: 10 + i,
                text: format!("cand{i}"),
                reward,
            })
            .collect(),
    )
    .unwrap()
}

/// The gating loop read literally, 1-indexed: for m in 2..=K, enhance position m
/// when r_{m-1} - r_m >= tau.
fn simulate(r: &[f64], tau: f64) -> BTreeSet<usize> {
    let mut out = BTreeSet::new();
    let mut m = 2;
    while m <= r.len() {
        let margin = r[m - 2] - r[m - 1];
        if margin >= tau {
            out.insert(m);
        }
        m += 1;
    }
    out
}

fn run(rewards: &[f64], tau: f64, lazy: bool) -> (CcbOutcome, MarkingEnv) {
    let cfg = CcbConfig {
        tau,
        lazy_rejected: lazy,
        rescore_after: false,
    };
    let mut env = MarkingEnv::default();
    let out = apply_ccb(0, "src", &selected(rewards), &cfg, ("en", "hi"), &mut env).unwrap();
    (out, env)
}

/// One-based positions whose text changed.
fn enhanced_positions(out: &CcbOutcome) -> BTreeSet<usize> {
    out.candidates
        .iter()
        .enumerate()
        .filter(|(i, c)| c.text != format!("cand{i}"))
        .map(|(i, _)| i + 1)
        .collect()
}

#[test]
fn exhaustive_grid_matches_direct_simulation() {
    let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
    let mut triples = 0;
    let mut fired_any = 0;
    for a in 0..=10 {
        for b in 0..=a {
            for c in 0..=b {
                let r = [grid[a], grid[b], grid[c]];
                triples += 1;
                for tau in [0.0, 0.2, 0.5] {
                    let want = simulate(&r, tau);
                    let (out, env) = run(&r, tau, true);
                    assert_eq!(enhanced_positions(&out), want, "rewards {r:?}, tau {tau}");
                    let fired: BTreeSet<usize> = out.fired.iter().map(|p| p + 1).collect();
                    assert_eq!(fired, want);
                    assert_eq!(out.candidates.len(), 3);
                    for (i, c) in out.candidates.iter().enumerate() {
                        assert_eq!(c.system_id, 10 + i);
                        assert_eq!(c.reward, r[i]);
                    }
                    // the enhancer sees positions in order, once each
                    let asked: Vec<String> = want.iter().map(|m| format!("cand{}", m - 1)).collect();
                    assert_eq!(env.enhanced, asked);
                    assert_eq!(env.rejected_calls, usize::from(!want.is_empty()));
                    assert_eq!(out.audit.len(), 2);
                    fired_any += usize::from(!want.is_empty());
                }
            }
        }
    }
    assert_eq!(triples, 286);
    assert!(fired_any > 0 && fired_any < triples * 3);
}

#[test]
fn infinite_threshold_is_identity() {
    for r in [[1.0, 0.0, 0.0], [0.9, 0.5, 0.4], [0.0, 0.0, 0.0]] {
        let (out, env) = run(&r, f64::INFINITY, true);
        assert_eq!(out.candidates, selected(&r).into_inner());
        assert!(out.fired.is_empty());
        assert_eq!(env.rejected_calls, 0);
    }
}

#[test]
fn single_candidate_is_identity() {
    for r in [0.0, 0.5, 1.0] {
        for tau in [0.0, 0.2, f64::INFINITY] {
            for lazy in [true, false] {
                let (out, env) = run(&[r], tau, lazy);
                assert_eq!(out.candidates, selected(&[r]).into_inner());
                assert!(out.audit.is_empty() && env.enhanced.is_empty());
            }
        }
    }
}

#[test]
fn nan_threshold_is_rejected() {
    let cfg = CcbConfig {
        tau: f64::NAN,
        ..CcbConfig::default()
    };
    assert!(apply_ccb(0, "s", &selected(&[0.5, 0.1]), &cfg, ("en", "hi"), &mut MarkingEnv::default()).is_err());
}

fn sorted_rewards() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-2.0..2.0f64, 1..9).prop_map(|mut v| {
        v.sort_by(|a, b| b.total_cmp(a));
        v
    })
}

proptest! {
    #[test]
    fn random_sets_match_simulation(r in sorted_rewards(), tau in -0.5..3.0f64) {
        let (out, _) = run(&r, tau, true);
        prop_assert_eq!(enhanced_positions(&out), simulate(&r, tau));
        prop_assert_eq!(out.candidates.len(), r.len());
    }

    #[test]
    fn gating_is_antitone_in_tau(r in sorted_rewards(), t1 in 0.0..2.0f64, dt in 0.0..2.0f64) {
        let lo = BTreeSet::from_iter(gated_positions(&r, t1).unwrap());
        let hi = BTreeSet::from_iter(gated_positions(&r, t1 + dt).unwrap());
        prop_assert!(hi.is_subset(&lo));
    }

    #[test]
    fn identity_enhancer_is_idempotent(r in sorted_rewards(), tau in 0.0..1.0f64) {
        let cfg = CcbConfig { tau, lazy_rejected: true, rescore_after: false };
        let sel = selected(&r);
        let mut env = MarkingEnv { identity: true, ..Default::default() };
        let once = apply_ccb(0, "s", &sel, &cfg, ("en", "hi"), &mut env).unwrap();
        let twice = apply_ccb(0, "s", &SelectedSet::new(once.candidates.clone()).unwrap(), &cfg, ("en", "hi"), &mut env).unwrap();
        prop_assert_eq!(&once.candidates, &sel.into_inner());
        prop_assert_eq!(once.candidates, twice.candidates);
    }

    #[test]
    fn margins_follow_the_formula(r in sorted_rewards()) {
        let m = compute_margins(&r).unwrap();
        prop_assert_eq!(m.len(), r.len());
        prop_assert_eq!(m[0], r[0]);
        for i in 1..r.len() {
            prop_assert_eq!(m[i], r[i - 1] - r[i]);
            prop_assert!(m[i] >= 0.0);
        }
    }
}

#[test]
fn unsorted_rewards_are_rejected() {
    assert!(compute_margins(&[0.1, 0.5]).is_err());
    assert!(SelectedSet::new(selected(&[0.5, 0.1]).into_inner().into_iter().rev().collect()).is_err());
}
