use ndarray::{Array1, Array2, Array3};
use otpe_core::data::raster::{decode_raster, encode_raster};
use otpe_core::data::EncodingTag;
use otpe_core::exact::{bptt_gradients, rtrl_gradients, DEFAULT_RTRL_CAP};
use otpe_core::grad::gradients_for_sequence;
use otpe_core::online::{OnlineLearner, OnlineOptions};
use otpe_core::snn::{forward_sequence, surrogate};
use otpe_core::train::checkpoint::{decode_checkpoint, encode_checkpoint};
use otpe_core::{Algorithm, GradientRecord, LifParams, Network, ResetMode, SpikeRaster};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Case {
    net: Network,
    input: Array2<f64>,
    deltas: Vec<Array1<f64>>,
}

fn case(widths: &[usize], leak: f64, t: usize, seed: u64) -> Case {
    let lif = LifParams::new(leak, 1.0, 25.0).unwrap();
    let net = Network::init(widths, lif, 3.0, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let input = Array2::from_shape_fn((t, widths[0]), |_| f64::from(u8::from(rng.random::<f64>() < 0.4)));
    let n_out = *widths.last().unwrap();
    let deltas = (0..t)
        .map(|_| Array1::from_shape_fn(n_out, |_| rng.random_range(-1.0..1.0)))
        .collect();
    Case { net, input, deltas }
}

fn online(c: &Case, algorithm: Algorithm, deltas: &[Array1<f64>]) -> GradientRecord {
    let traj = forward_sequence(&c.net, c.input.view()).unwrap();
    let mut e = OnlineLearner::new(&c.net, algorithm, OnlineOptions::default()).unwrap();
    gradients_for_sequence(&mut e, &c.net, &traj, deltas).unwrap()
}

fn widths() -> impl Strategy<Value = Vec<usize>> {
    (1usize..6, prop::collection::vec(1usize..5, 1..3), 1usize..4).prop_map(|(i, h, o)| {
        let mut w = vec![i];
        w.extend(h);
        w.push(o);
        w
    })
}

const ONLINE: [Algorithm; 6] = [
    Algorithm::Ostl,
    Algorithm::Ottt,
    Algorithm::Otpe,
    Algorithm::ApproxOtpe,
    Algorithm::FOtpe,
    Algorithm::FApproxOtpe,
];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn rtrl_matches_bptt(w in widths(), leak in 0.0f64..1.0, t in 1usize..8, seed in any::<u64>(), detach in any::<bool>()) {
        let c = case(&w, leak, t, seed);
        let reset = if detach { ResetMode::Detach } else { ResetMode::Surrogate };
        let traj = forward_sequence(&c.net, c.input.view()).unwrap();
        let b = bptt_gradients(&c.net, &traj, &c.deltas, reset).unwrap();
        let r = rtrl_gradients(&c.net, c.input.view(), &c.deltas, reset, DEFAULT_RTRL_CAP).unwrap();
        prop_assert!(b.max_abs_diff(&r) < 1e-10 * (1.0 + b.max_abs()));
    }

    #[test]
    fn online_gradients_are_linear_in_deltas(
        w in widths(), leak in 0.0f64..1.0, t in 1usize..8, seed in any::<u64>(),
        a in -2.0f64..2.0, b in -2.0f64..2.0, pick in 0usize..6,
    ) {
        let c = case(&w, leak, t, seed);
        let other = case(&w, leak, t, seed.wrapping_add(1)).deltas;
        let mixed: Vec<Array1<f64>> = c.deltas.iter().zip(&other).map(|(x, y)| x * a + y * b).collect();
        let algo = ONLINE[pick];
        let g1 = online(&c, algo, &c.deltas);
        let g2 = online(&c, algo, &other);
        let mut expect = g1.clone();
        expect.scale(a);
        let mut g2s = g2.clone();
        g2s.scale(b);
        expect.add_assign(&g2s);
        let got = online(&c, algo, &mixed);
        prop_assert!(got.max_abs_diff(&expect) < 1e-9 * (1.0 + expect.max_abs()));
    }

    #[test]
    fn zero_leak_collapses_the_postsynaptic_traces(w in widths(), t in 1usize..8, seed in any::<u64>()) {
        let c = case(&w, 0.0, t, seed);
        prop_assert_eq!(online(&c, Algorithm::Otpe, &c.deltas), online(&c, Algorithm::Ostl, &c.deltas));
        prop_assert_eq!(online(&c, Algorithm::ApproxOtpe, &c.deltas), online(&c, Algorithm::Ottt, &c.deltas));
    }

    #[test]
    fn single_step_is_exact_for_every_algorithm(w in widths(), leak in 0.0f64..1.0, seed in any::<u64>(), pick in 0usize..4) {
        let c = case(&w, leak, 1, seed);
        let traj = forward_sequence(&c.net, c.input.view()).unwrap();
        let b = bptt_gradients(&c.net, &traj, &c.deltas, ResetMode::Surrogate).unwrap();
        let g = online(&c, ONLINE[pick], &c.deltas);
        prop_assert!(g.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn trace_sizes_follow_layer_shapes(w in widths()) {
        let net = Network::init(&w, LifParams::new(0.9, 1.0, 25.0).unwrap(), 1.0, 0).unwrap();
        for algo in [Algorithm::Ottt, Algorithm::Ostl, Algorithm::Otpe, Algorithm::ApproxOtpe] {
            let e = OnlineLearner::new(&net, algo, OnlineOptions::default()).unwrap();
            let per_layer: Vec<usize> = e.traces().iter().map(|t| t.elements()).collect();
            let expect: Vec<usize> = w.windows(2).map(|p| {
                let (i, o) = (p[0], p[1]);
                match algo {
                    Algorithm::Ottt => i,
                    Algorithm::ApproxOtpe => i + i + o + 1,
                    _ => 2 * o * i,
                }
            }).collect();
            prop_assert_eq!(per_layer, expect);
        }
    }

    #[test]
    fn surrogate_is_even_and_peaks_at_zero(x in -50.0f64..50.0, y in -50.0f64..50.0) {
        prop_assert_eq!(surrogate(x, 25.0), surrogate(-x, 25.0));
        prop_assert!(surrogate(x, 25.0) <= surrogate(0.0, 25.0));
        if x.abs() < y.abs() {
            prop_assert!(surrogate(x, 25.0) >= surrogate(y, 25.0));
        }
    }

    #[test]
    fn raster_bytes_round_trip(n in 1usize..5, t in 1usize..9, c in 1usize..11, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spikes = Array3::from_shape_fn((n, t, c), |_| u8::from(rng.random::<bool>()));
        let labels = (0..n).map(|_| rng.random_range(0..3)).collect();
        let raster = SpikeRaster::new(spikes, labels, 3).unwrap();
        let bytes = encode_raster(&raster, EncodingTag::RateRandman).unwrap();
        let (header, back) = decode_raster(&bytes).unwrap();
        prop_assert_eq!(header.encoding, EncodingTag::RateRandman);
        prop_assert_eq!(back, raster);
    }

    #[test]
    fn checkpoint_bytes_round_trip(w in widths(), seed in any::<u64>(), mb in any::<u64>()) {
        let net = Network::init(&w, LifParams::new(0.8, 0.7, 10.0).unwrap(), 1.5, seed).unwrap();
        let back = decode_checkpoint(&encode_checkpoint(&net, mb)).unwrap();
        prop_assert_eq!(back.minibatch, mb);
        prop_assert_eq!(back.network, net);
    }
}
