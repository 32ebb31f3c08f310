//! Gradient engines against independent references: central finite
//! differences on a smoothed network, and literal per-element unrolls of each
//! trace recursion written with plain vectors.

use ndarray::{Array1, Array2};
use otpe_core::exact::{bptt_gradients, rtrl_gradients, DEFAULT_RTRL_CAP};
use otpe_core::grad::gradients_for_sequence;
use otpe_core::online::{OnlineLearner, OnlineOptions, SpatialFactor};
use otpe_core::snn::{forward_sequence, DenseLayer};
use otpe_core::train::loss::{LossKind, LossSpec};
use otpe_core::{Algorithm, GradientRecord, LifParams, Network, ResetMode};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(t: usize, c: usize, p: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((t, c), |_| if rng.random::<f64>() < p { 1.0 } else { 0.0 })
}

fn loss_of(net: &Network, input: &Array2<f64>, loss: &LossSpec, label: usize) -> f64 {
    let traj = forward_sequence(net, input.view()).unwrap();
    let outs: Vec<Array1<f64>> = traj.outputs().cloned().collect();
    loss.sequence_loss(&outs, label).unwrap().0
}

#[test]
fn bptt_matches_finite_differences_on_smoothed_net() {
    let lif = LifParams::new(0.8, 0.5, 4.0).unwrap();
    let net = Network::init(&[2, 3, 2], lif, 1.5, 11).unwrap().smoothed();
    let input = random_input(5, 2, 0.6, 3);
    let loss = LossSpec::new(LossKind::SequenceCeOnSum, 0.9, 2).unwrap();
    let traj = forward_sequence(&net, input.view()).unwrap();
    let outs: Vec<Array1<f64>> = traj.outputs().cloned().collect();
    let (_, deltas) = loss.sequence_loss(&outs, 1).unwrap();
    let grads = bptt_gradients(&net, &traj, &deltas, ResetMode::Surrogate).unwrap();

    let h = 1e-6;
    let mut checked = 0;
    for l in 0..net.depth() {
        let (rows, cols) = net.layers()[l].weights.dim();
        for i in 0..rows {
            for j in 0..cols {
                let mut up = net.clone();
                up.layers_mut()[l].weights[[i, j]] += h;
                let mut down = net.clone();
                down.layers_mut()[l].weights[[i, j]] -= h;
                let fd = (loss_of(&up, &input, &loss, 1) - loss_of(&down, &input, &loss, 1)) / (2.0 * h);
                let an = grads.layers[l][[i, j]];
                let scale = fd.abs().max(an.abs()).max(1e-3);
                assert!((fd - an).abs() / scale < 1e-5, "layer {l} [{i},{j}]: fd {fd} vs bptt {an}");
                checked += 1;
            }
        }
    }
    assert_eq!(checked, 2 * 3 + 3 * 2);
}

/// Literal per-element forward pass: returns per step, per layer
/// `(pre_spikes, x, spikes)`.
type Unroll = Vec<Vec<(Vec<f64>, Vec<f64>, Vec<f64>)>>;

fn naive_forward(w: &[Vec<Vec<f64>>], lif: &LifParams, input: &Array2<f64>) -> Unroll {
    let mut u: Vec<Vec<f64>> = w.iter().map(|l| vec![0.0; l.len()]).collect();
    let mut steps = Vec::new();
    for row in input.rows() {
        let mut pre: Vec<f64> = row.to_vec();
        let mut layers = Vec::new();
        for (l, wl) in w.iter().enumerate() {
            let mut x = vec![0.0; wl.len()];
            let mut s = vec![0.0; wl.len()];
            for i in 0..wl.len() {
                let mut cur = 0.0;
                for j in 0..pre.len() {
                    cur += wl[i][j] * pre[j];
                }
                x[i] = lif.leak * u[l][i] + cur - lif.threshold;
                s[i] = if x[i] >= 0.0 { 1.0 } else { 0.0 };
                u[l][i] = lif.leak * u[l][i] + cur - lif.threshold * s[i];
            }
            layers.push((pre.clone(), x, s.clone()));
            pre = s;
        }
        steps.push(layers);
    }
    steps
}

fn sg(x: f64, k: f64) -> f64 {
    1.0 / ((1.0 + k * x.abs()) * (1.0 + k * x.abs()))
}

/// Per-element unroll of the five layer-local algorithms.
fn naive_online(
    algorithm: Algorithm,
    w: &[Vec<Vec<f64>>],
    lif: &LifParams,
    unroll: &Unroll,
    deltas: &[Array1<f64>],
    averaged: bool,
    output_leak: f64,
) -> Vec<Vec<Vec<f64>>> {
    let depth = w.len();
    let dims: Vec<(usize, usize)> = w.iter().map(|l| (l.len(), l[0].len())).collect();
    let zeros2 = |l: usize| vec![vec![0.0; dims[l].1]; dims[l].0];
    let mut grad: Vec<Vec<Vec<f64>>> = (0..depth).map(zeros2).collect();
    let mut p: Vec<Vec<Vec<f64>>> = (0..depth).map(zeros2).collect();
    let mut r: Vec<Vec<Vec<f64>>> = (0..depth).map(zeros2).collect();
    let mut e: Vec<Vec<Vec<f64>>> = (0..depth).map(zeros2).collect();
    let mut a: Vec<Vec<f64>> = dims.iter().map(|d| vec![0.0; d.1]).collect();
    let mut z = a.clone();
    let mut gbar: Vec<Vec<f64>> = dims.iter().map(|d| vec![0.0; d.0]).collect();
    let mut norm = vec![0.0; depth];
    let f = algorithm.is_f_variant();
    for (t, layers) in unroll.iter().enumerate() {
        let mut g: Vec<Vec<f64>> = Vec::new();
        for (l, (pre, x, _)) in layers.iter().enumerate() {
            let post = if f && l == depth - 1 { output_leak } else { lif.leak };
            let gl: Vec<f64> = x.iter().map(|&v| sg(v, lif.slope)).collect();
            for i in 0..dims[l].0 {
                let keep = 1.0 - lif.threshold * gl[i];
                for j in 0..dims[l].1 {
                    let aij = lif.leak * p[l][i][j] + pre[j];
                    e[l][i][j] = gl[i] * aij;
                    p[l][i][j] = keep * aij;
                    r[l][i][j] = post * r[l][i][j] + e[l][i][j];
                }
            }
            for j in 0..dims[l].1 {
                a[l][j] = lif.leak * a[l][j] + pre[j];
                z[l][j] = post * z[l][j] + a[l][j];
            }
            let carried = post * norm[l];
            for i in 0..dims[l].0 {
                gbar[l][i] = (carried * gbar[l][i] + gl[i]) / (carried + 1.0);
            }
            norm[l] = carried + 1.0;
            g.push(gl);
        }
        let use_avg = matches!(algorithm, Algorithm::ApproxOtpe | Algorithm::FApproxOtpe)
            || (averaged && matches!(algorithm, Algorithm::Otpe | Algorithm::FOtpe));
        let mut d = deltas[t].to_vec();
        for l in (0..depth).rev() {
            let own = l == depth - 1 && !f;
            for i in 0..dims[l].0 {
                for j in 0..dims[l].1 {
                    grad[l][i][j] += match algorithm {
                        Algorithm::Ostl => d[i] * e[l][i][j],
                        Algorithm::Ottt => d[i] * g[l][i] * a[l][j],
                        Algorithm::Otpe | Algorithm::FOtpe if own => d[i] * e[l][i][j],
                        Algorithm::Otpe | Algorithm::FOtpe => d[i] * r[l][i][j],
                        _ if own => d[i] * g[l][i] * a[l][j],
                        _ => d[i] * gbar[l][i] * z[l][j],
                    };
                }
            }
            if l > 0 {
                let factor = if use_avg { &gbar[l] } else { &g[l] };
                let mut below = vec![0.0; dims[l].1];
                for i in 0..dims[l].0 {
                    for j in 0..dims[l].1 {
                        below[j] += w[l][i][j] * d[i] * factor[i];
                    }
                }
                d = below;
            }
        }
    }
    grad
}

fn to_nested(net: &Network) -> Vec<Vec<Vec<f64>>> {
    net.layers()
        .iter()
        .map(|l| l.weights.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect()
}

fn max_diff(engine: &GradientRecord, naive: &[Vec<Vec<f64>>]) -> f64 {
    let mut m: f64 = 0.0;
    for (g, n) in engine.layers.iter().zip(naive) {
        for ((i, j), v) in g.indexed_iter() {
            m = m.max((v - n[i][j]).abs());
        }
    }
    m
}

#[test]
fn forward_pass_matches_literal_unroll() {
    let lif = LifParams::new(0.85, 0.7, 25.0).unwrap();
    let net = Network::init(&[7, 6, 5, 3], lif, 3.0, 21).unwrap();
    let input = random_input(15, 7, 0.4, 8);
    let traj = forward_sequence(&net, input.view()).unwrap();
    let naive = naive_forward(&to_nested(&net), &lif, &input);
    let mut spikes = 0.0;
    for (step, nstep) in traj.steps.iter().zip(&naive) {
        for (rec, (_, x, s)) in step.iter().zip(nstep) {
            assert_eq!(rec.spikes.to_vec(), *s);
            for (a, b) in rec.pre_activation.iter().zip(x) {
                assert!((a - b).abs() < 1e-12);
            }
            spikes += s.iter().sum::<f64>();
        }
    }
    assert!(spikes > 0.0, "probe should exercise spiking");
}

#[test]
fn layer_local_engines_match_literal_unrolls() {
    let lif = LifParams::new(0.85, 0.7, 25.0).unwrap();
    let algorithms = [
        Algorithm::Ostl,
        Algorithm::Ottt,
        Algorithm::Otpe,
        Algorithm::ApproxOtpe,
        Algorithm::FOtpe,
        Algorithm::FApproxOtpe,
    ];
    for seed in 0..4 {
        let net = Network::init(&[7, 6, 5, 3], lif, 3.0, seed).unwrap();
        let input = random_input(15, 7, 0.4, 100 + seed);
        let traj = forward_sequence(&net, input.view()).unwrap();
        let outs: Vec<Array1<f64>> = traj.outputs().cloned().collect();
        let loss = LossSpec::new(LossKind::LeakySumCe, 0.8, 3).unwrap();
        let nested = to_nested(&net);
        let unroll = naive_forward(&nested, &lif, &input);
        for algo in algorithms {
            for averaged in [false, true] {
                let (_, deltas) = if algo.is_f_variant() {
                    loss.accumulator_deltas(&outs, 2).unwrap()
                } else {
                    loss.sequence_loss(&outs, 2).unwrap()
                };
                let options = OnlineOptions {
                    reset: ResetMode::Surrogate,
                    spatial_factor: averaged.then_some(SpatialFactor::Averaged),
                    output_leak: Some(0.8),
                };
                let mut engine = OnlineLearner::new(&net, algo, options).unwrap();
                let g = gradients_for_sequence(&mut engine, &net, &traj, &deltas).unwrap();
                let n = naive_online(algo, &nested, &lif, &unroll, &deltas, averaged, 0.8);
                let diff = max_diff(&g, &n);
                assert!(diff < 1e-12, "{algo} averaged={averaged} seed {seed}: {diff}");
                assert!(g.max_abs() > 0.0, "{algo}: probe should give nonzero gradients");
            }
        }
    }
}

#[test]
fn rtrl_and_bptt_agree_with_frozen_values() {
    // 3-2-2 network with hand-set weights; values produced by the RTRL
    // unroll and frozen here.
    let lif = LifParams::new(0.9, 1.0, 25.0).unwrap();
    let net = Network::new(
        vec![
            DenseLayer::new(ndarray::array![[0.9, 0.4, -0.2], [0.3, 0.8, 0.5]]).unwrap(),
            DenseLayer::new(ndarray::array![[1.1, -0.4], [0.2, 0.9]]).unwrap(),
        ],
        lif,
    )
    .unwrap();
    let input = ndarray::array![
        [1.0, 0.0, 1.0],
        [1.0, 1.0, 0.0],
        [0.0, 1.0, 1.0],
        [1.0, 1.0, 1.0],
        [0.0, 0.0, 1.0],
        [1.0, 0.0, 0.0]
    ];
    let loss = LossSpec::new(LossKind::SequenceCeOnSum, 1.0, 2).unwrap();
    let traj = forward_sequence(&net, input.view()).unwrap();
    let outs: Vec<Array1<f64>> = traj.outputs().cloned().collect();
    let (_, deltas) = loss.sequence_loss(&outs, 0).unwrap();
    for reset in [ResetMode::Detach, ResetMode::Surrogate] {
        let b = bptt_gradients(&net, &traj, &deltas, reset).unwrap();
        let r = rtrl_gradients(&net, input.view(), &deltas, reset, DEFAULT_RTRL_CAP).unwrap();
        assert!(b.max_abs_diff(&r) < 1e-12);
    }
    let b = bptt_gradients(&net, &traj, &deltas, ResetMode::Surrogate).unwrap();
    let frozen = FROZEN_SURROGATE_GRADS;
    for (v, f) in b.flatten().iter().zip(frozen) {
        assert!((v - f).abs() < 1e-12, "{v} vs {f}");
    }
}

const FROZEN_SURROGATE_GRADS: [f64; 10] = [
    -0.4631238498939066,
    -0.5045187629737058,
    -0.48660906961285766,
    0.10094091875469846,
    0.06342234685183692,
    0.0996910799588028,
    -2.3139256575036,
    -2.3222836932400965,
    0.9234569176322998,
    1.5739390742420314,
];
