//! Analytic gradients against central finite differences in f64.

use ensemble_forge::dqn::{td_loss_and_grads, TdParams, Transition};
use ensemble_forge::embedder::StateVector;
use ensemble_forge::qnet::{Architecture, Matrix, QNetwork};
use ensemble_forge::reward_model::{rm_loss_and_grads, rm_loss_features, FeatureSample, PreferenceSets, RmParams};
use ensemble_forge::rng::SeededRng;
use std::sync::Arc;

const H: f64 = 1e-5;
const MAX_REL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|)`, with the denominator floored so that
/// gradients indistinguishable from zero compare on absolute error.
fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-5)
}

fn uniform(rng: &mut SeededRng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.unit()
}

fn random_net(rng: &mut SeededRng, arch: Architecture) -> QNetwork<f64> {
    let mut net = QNetwork::<f64>::init(arch, rng.next_u64()).unwrap();
    // init leaves biases at zero; randomize everything
    for p in net.params_mut() {
        *p += uniform(rng, -0.3, 0.3);
    }
    net
}

fn check_coords(
    params: &mut [f64],
    analytic: &[f64],
    coords: impl Iterator<Item = usize>,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = params[i];
        params[i] = orig + H;
        let up = loss(params);
        params[i] = orig - H;
        let down = loss(params);
        params[i] = orig;
        let numeric = (up - down) / (2.0 * H);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

fn q_dot(net: &QNetwork<f64>, state: &[f64], g: &[f64]) -> f64 {
    net.forward(state).unwrap().iter().zip(g).map(|(q, w)| q * w).sum()
}

#[test]
fn qnet_backward_small_architectures() {
    let mut rng = SeededRng::new(11);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let arch = Architecture {
            input_dim: 3 + rng.below(10),
            hidden_dim: 2 + rng.below(9),
            num_blocks: rng.below(4),
            num_actions: 2 + rng.below(6),
        };
        let mut net = random_net(&mut rng, arch);
        let state: Vec<f64> = (0..arch.input_dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let g: Vec<f64> = (0..arch.num_actions).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let grads = net.backward(&state, &g).unwrap();
        let analytic = grads.params().to_vec();
        let n = analytic.len();
        let mut probe = net.clone();
        let err = check_coords(net.params_mut(), &analytic, 0..n, |p| {
            probe.params_mut().copy_from_slice(p);
            q_dot(&probe, &state, &g)
        });
        assert!(err < MAX_REL, "{arch:?}: relative error {err}");
        worst = worst.max(err);
    }
    eprintln!("q-net worst relative error over 100 architectures: {worst:.2e}");
}

#[test]
fn qnet_backward_standard_architecture_sampled() {
    let mut rng = SeededRng::new(12);
    for _ in 0..3 {
        let mut net = random_net(&mut rng, Architecture::standard(8));
        let state: Vec<f64> = (0..768).map(|_| uniform(&mut rng, -0.1, 0.1)).collect();
        let g: Vec<f64> = (0..8).map(|_| uniform(&mut rng, -1.0, 1.0)).collect();
        let analytic = net.backward(&state, &g).unwrap().params().to_vec();
        let n = analytic.len();
        let coords: Vec<usize> = (0..200).map(|_| rng.below(n)).collect();
        let mut probe = net.clone();
        let err = check_coords(net.params_mut(), &analytic, coords.into_iter(), |p| {
            probe.params_mut().copy_from_slice(p);
            q_dot(&probe, &state, &g)
        });
        assert!(err < MAX_REL, "relative error {err}");
    }
}

#[test]
fn td_loss_gradient() {
    let mut rng = SeededRng::new(13);
    for case in 0..100 {
        let arch = Architecture {
            input_dim: 768,
            hidden_dim: 4 + rng.below(6),
            num_blocks: 1 + rng.below(3),
            num_actions: 3 + rng.below(4),
        };
        let mut online = random_net(&mut rng, arch);
        let target = random_net(&mut rng, arch);
        let unit = |rng: &mut SeededRng| {
            Arc::new(StateVector::from_values((0..768).map(|_| uniform(rng, -1.0, 1.0)).collect()).unwrap())
        };
        let batch: Vec<Transition> = (0..1 + rng.below(6))
            .map(|_| Transition {
                s: unit(&mut rng),
                a: rng.below(arch.num_actions),
                r: rng.unit(),
                s_next: unit(&mut rng),
                terminal: rng.below(3) == 0,
            })
            .collect();
        let refs: Vec<&Transition> = batch.iter().collect();
        let td = TdParams {
            gamma: 0.99,
            bandit_mode: case % 2 == 0,
        };
        let (_, grads) = td_loss_and_grads(&online, &target, &refs, td).unwrap();
        let analytic = grads.params().to_vec();
        // the wide first layer is sampled, everything after it is exhaustive
        let first = arch.hidden_dim * arch.input_dim;
        let mut coords: Vec<usize> = (0..40).map(|_| rng.below(first)).collect();
        coords.extend(first..analytic.len());
        let mut probe = online.clone();
        let err = check_coords(online.params_mut(), &analytic, coords.into_iter(), |p| {
            probe.params_mut().copy_from_slice(p);
            td_loss_and_grads(&probe, &target, &refs, td).unwrap().0
        });
        assert!(err < MAX_REL, "case {case}: relative error {err}");
    }
}

#[test]
fn value_and_grad_matches_backward() {
    let mut rng = SeededRng::new(14);
    let arch = Architecture {
        input_dim: 5,
        hidden_dim: 6,
        num_blocks: 2,
        num_actions: 4,
    };
    let net = random_net(&mut rng, arch);
    let s: Vec<f64> = (0..5).map(|_| rng.unit()).collect();
    let g = vec![0.5, -1.0, 2.0, 0.25];
    let (loss, a) = net
        .value_and_grad(&[&s], |q| {
            let mut m = Matrix::zeros(1, 4);
            m.row_mut(0).copy_from_slice(&g);
            Ok((q.row(0).iter().zip(&g).map(|(a, b)| a * b).sum(), m))
        })
        .unwrap();
    assert_eq!(loss, q_dot(&net, &s, &g));
    assert_eq!(a, net.backward(&s, &g).unwrap());
}

fn flat(p: &RmParams<f64>) -> Vec<f64> {
    let mut v = p.weights.clone();
    v.push(p.bias);
    v
}

fn unflat(v: &[f64]) -> RmParams<f64> {
    RmParams {
        weights: v[..v.len() - 1].to_vec(),
        bias: v[v.len() - 1],
    }
}

#[test]
fn rm_gradient_random_features() {
    let mut rng = SeededRng::new(21);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let dim = 1 + rng.below(24);
        let feats = |n: usize, rng: &mut SeededRng| -> Vec<Vec<f64>> {
            (0..n).map(|_| (0..dim).map(|_| uniform(rng, -2.0, 2.0)).collect()).collect()
        };
        let sample = FeatureSample {
            preferred: feats(1 + rng.below(5), &mut rng),
            rejected: feats(1 + rng.below(5), &mut rng),
        };
        let p = RmParams {
            weights: (0..dim).map(|_| uniform(&mut rng, -1.0, 1.0)).collect(),
            bias: uniform(&mut rng, -1.0, 1.0),
        };
        let analytic = flat(&rm_loss_features(&p, &sample).unwrap().1);
        let mut v = flat(&p);
        let n = v.len();
        let err = check_coords(&mut v, &analytic, 0..n, |x| rm_loss_features(&unflat(x), &sample).unwrap().0);
        assert!(err < MAX_REL, "dim {dim}: relative error {err}");
        worst = worst.max(err);
    }
    eprintln!("reward-model worst relative error over 100 configurations: {worst:.2e}");
}

#[test]
fn rm_gradient_on_text_features() {
    let mut rng = SeededRng::new(22);
    let sets = PreferenceSets {
        preferred: vec!["the cat sat on the mat".into(), "the cat sat on a mat".into()],
        rejected: vec!["a dog".into(), "mat the on".into(), "cat".into()],
    };
    let src = "le chat est assis sur le tapis";
    let p = RmParams {
        weights: (0..1536).map(|_| uniform(&mut rng, -0.2, 0.2)).collect(),
        bias: 0.1,
    };
    let analytic = flat(&rm_loss_and_grads(&p, src, &sets).unwrap().1);
    let mut v = flat(&p);
    let n = v.len();
    let err = check_coords(&mut v, &analytic, 0..n, |x| rm_loss_and_grads(&unflat(x), src, &sets).unwrap().0);
    assert!(err < MAX_REL, "relative error {err}");
}
