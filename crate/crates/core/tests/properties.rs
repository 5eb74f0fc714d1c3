use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikeforge::checkpoint;
use spikeforge::data::split;
use spikeforge::eval::iou;
use spikeforge::graph::{build_locnet, rate_regularization_tape, LocNetPlan, RateRegConfig};
use spikeforge::neuron::{lif_rate, lif_spike_step, relu_rate, relu_spike_step, rho_hard, rho_soft, LifState, NeuronParams, ReluState, Smoothing, SynapseState};
use spikeforge::tensor::{Tape, Tensor};
use spikeforge::train::early_stop;

fn boxes() -> impl Strategy<Value = [f64; 4]> {
    (0.0..1.0f64, 0.0..1.0f64, 0.01..1.0f64, 0.01..1.0f64).prop_map(|(x, y, w, h)| [x, y, x + w, y + h])
}

proptest! {
    #[test]
    fn softplus_sits_just_above_relu(x in -5.0..5.0f64, gamma in 1e-3..0.1f64) {
        let gap = rho_soft(x, gamma) - rho_hard(x);
        prop_assert!(gap >= 0.0);
        prop_assert!(gap <= gamma * 2f64.ln() + 1e-12);
    }

    #[test]
    fn lif_rate_is_monotone(a in -1.0..20.0f64, d in 0.0..5.0f64) {
        let p = NeuronParams::default();
        for s in [Smoothing::Hard, Smoothing::Soft] {
            prop_assert!(lif_rate(a + d, &p, s) >= lif_rate(a, &p, s));
        }
        prop_assert!(lif_rate(a, &p, Smoothing::Hard) <= 1.0 / p.tau_ref);
    }

    #[test]
    fn relu_rate_ignores_scale(j in -3.0..3.0f64, s in 1.0..1000.0f64) {
        let p = NeuronParams::default();
        let scaled = relu_rate(j, &p.with_scale(s));
        prop_assert!((scaled - relu_rate(j, &p)).abs() <= 1e-12 * (1.0 + j.abs()));
    }

    #[test]
    fn lif_state_stays_in_range(js in prop::collection::vec(-2.0..30.0f64, 1..200)) {
        let p = NeuronParams::default();
        let mut st = LifState::new(1);
        let mut out = [0.0];
        for j in js {
            let n = lif_spike_step(&mut st, &[j], 1e-3, &p, &mut out);
            prop_assert!(n <= 1);
            prop_assert!(st.voltage[0] >= 0.0 && st.voltage[0] < p.v_th);
            prop_assert!(st.refractory_remaining[0] >= 0.0 && st.refractory_remaining[0] <= p.tau_ref);
        }
    }

    #[test]
    fn spiking_relu_mean_matches_rate(j in 0.1..10.0f64) {
        let p = NeuronParams::default().with_scale(1000.0);
        let mut st = ReluState::new(1);
        let mut out = [0.0];
        let steps = 2000;
        let mut total = 0.0;
        for _ in 0..steps {
            relu_spike_step(&mut st, &[j], 1e-3, &p, &mut out);
            total += out[0];
        }
        let mean = total / steps as f64;
        prop_assert!((mean - j).abs() <= 0.01 * j, "mean {} for j {}", mean, j);
    }

    #[test]
    fn synapse_contracts(y0 in -5.0..5.0f64, y1 in -5.0..5.0f64, xs in prop::collection::vec(-3.0..3.0f64, 1..50), tau in 1e-3..0.1f64) {
        let mut a = SynapseState::new(tau, 1e-3, 1).unwrap();
        let mut b = a.clone();
        a.filtered[0] = y0;
        b.filtered[0] = y1;
        let k = a.decay();
        prop_assert!(k > 0.0 && k < 1.0);
        let mut gap = (y0 - y1).abs();
        for x in xs {
            let (ya, yb) = (a.step(&[x])[0], b.step(&[x])[0]);
            gap *= k;
            prop_assert!(((ya - yb).abs() - gap).abs() <= 1e-9);
        }
    }

    #[test]
    fn synapse_stays_within_input_range(xs in prop::collection::vec(-3.0..3.0f64, 1..80)) {
        let mut s = SynapseState::new(0.005, 1e-3, 1).unwrap();
        let (mut lo, mut hi) = (0.0f64, 0.0f64);
        for x in xs {
            lo = lo.min(x);
            hi = hi.max(x);
            let y = s.step(&[x])[0];
            prop_assert!(y >= lo - 1e-12 && y <= hi + 1e-12);
        }
    }

    #[test]
    fn iou_is_symmetric_and_bounded(a in boxes(), b in boxes()) {
        let ab = iou(a, b);
        prop_assert_eq!(ab, iou(b, a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(a, a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn split_partitions_the_data(n in 2usize..200, frac in 0.05..0.95f64, seed in any::<u64>()) {
        let data: Vec<usize> = (0..n).collect();
        let (train, test) = split(&data, frac, seed).unwrap();
        prop_assert!(!train.is_empty() && !test.is_empty());
        let mut all: Vec<usize> = train.iter().chain(&test).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, data);
    }

    #[test]
    fn rate_penalty_pushes_toward_target(rates in prop::collection::vec(0.0..500.0f64, 1..16), target in 10.0..400.0f64) {
        let cfg = RateRegConfig { target_hz: target, weights: vec![1.0] };
        let mut tape = Tape::new();
        let r = tape.var(Tensor::new(vec![1, rates.len()], rates.clone()).unwrap());
        let loss = rate_regularization_tape(&mut tape, &[r], &cfg).unwrap();
        prop_assert!(tape.value(loss).item().unwrap() >= 0.0);
        let g = tape.backward(loss).unwrap();
        for (gi, ri) in g.get(r).unwrap().data().iter().zip(&rates) {
            prop_assert!(gi * (ri - target) >= 0.0);
        }
    }

    #[test]
    fn early_stop_index_is_in_range(h in prop::collection::vec(0.0..1.0f64, 1..30), patience in 0usize..5) {
        let e = early_stop(&h, patience);
        prop_assert!(e < h.len());
        if patience == 0 {
            prop_assert_eq!(e, h.len() - 1);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), c in 1usize..4, units in 1usize..6, amp in 0.001..1.0f32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let plan = LocNetPlan { channels: vec![c, c + 1, 2], dense: vec![units, 4], lif_bias: 1.0 };
        let net = build_locnet(&[1, 8, 8], &plan, NeuronParams::default().with_amplitude(amp), &mut rng).unwrap();
        let bytes = checkpoint::encode(&net);
        let back = checkpoint::decode(&bytes).unwrap();
        prop_assert_eq!(checkpoint::encode(&back), bytes);
        prop_assert_eq!(back, net);
    }
}
