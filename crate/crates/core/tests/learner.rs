use mfrpinp_core::autodiff::{adam_step, AdamState, Tape};
use mfrpinp_core::learner::{
    elbo_low, elbo_low_sets, elbo_res, frozen_low_means, g2_prediction, joint_loss, run_loop,
    run_loop_from, stream_transitions, train_phase, LearnerError, LoopConfig, NoObserver,
    ReplayBuffer, RunObserver, Scenario, TrainConfig, TransitionHigh, TransitionLow,
};
use mfrpinp_core::np::{FeatureScales, MfrPinpModel, NpConfig};
use mfrpinp_core::physics::{g1_step, wrap_angle, KinematicParams, RobotState, WheelCmd};
use mfrpinp_core::sim::{builtin_profile, simulate, SensorFrame, SimSpec};
use mfrpinp_core::ukf::run_fusion;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scenario_data(profile: &str, frames: usize, seed: u64) -> (Vec<SensorFrame>, Vec<RobotState>) {
    let cfg = LoopConfig::default();
    let prof = builtin_profile(profile, seed).unwrap();
    let spec = SimSpec {
        frames,
        ..SimSpec::default()
    };
    let data = simulate(&prof, &spec, seed).unwrap();
    let labels = run_fusion(&data.sensors, &cfg.ukf, &cfg.params, RobotState::default()).unwrap();
    (data.sensors, labels)
}

fn scenario<'a>(d: &'a (Vec<SensorFrame>, Vec<RobotState>)) -> Scenario<'a> {
    Scenario {
        frames: &d.0,
        labels: &d.1,
        initial: RobotState::default(),
    }
}

fn model(cfg: NpConfig, seed: u64) -> MfrPinpModel {
    MfrPinpModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn low_window(n: usize, seed: u64) -> Vec<TransitionLow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = KinematicParams::default();
    let mut state = RobotState::default();
    (0..n)
        .map(|_| {
            let cmd = WheelCmd::new(rng.random_range(0.0..15.0), rng.random_range(0.0..15.0));
            let dk = 0.02;
            let next = g1_step(&state, cmd, &p, dk).unwrap();
            let t = TransitionLow {
                cmd,
                state,
                dk,
                next,
                episode: 0,
            };
            state = next;
            t
        })
        .collect()
}

/// Low and high transitions streamed from a short simulated run.
fn streamed(frames: usize, seed: u64) -> (Vec<TransitionLow>, Vec<TransitionHigh>) {
    let d = scenario_data("figure-eight", frames, seed);
    stream_transitions(&scenario(&d), &LoopConfig::default(), 0).unwrap()
}

#[test]
fn identical_sets_give_zero_kl_and_loss_equal_to_reconstruction() {
    let m = model(NpConfig::default(), 1);
    let w = low_window(10, 2);
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = KinematicParams::default();
    let t = elbo_low_sets(&m, &mut tape, &w, &w, &p, Some(&mut rng)).unwrap();
    assert_eq!(tape.value(t.kl).item(), 0.0);
    assert_eq!(tape.value(t.loss).item(), tape.value(t.recon).item());
}

#[test]
fn perfect_low_decoder_has_zero_reconstruction() {
    // zero offsets give mu = g1 prior = label; a raw variance of out^2 / 2pi
    // gives sigma^2 = 1 / 2pi, where the Gaussian NLL vanishes
    let mut m = model(NpConfig::default(), 4);
    let out = FeatureScales::default().low_out;
    let bias = m.params_mut().get_mut("low/dec/mlp/2/b").unwrap();
    for j in 0..6 {
        bias.data_mut()[6 + j] = out[j] * out[j] / (2.0 * std::f64::consts::PI);
    }
    let w = low_window(12, 5);
    let mut tape = Tape::new();
    let t = elbo_low(&m, &mut tape, &w, &KinematicParams::default(), None).unwrap();
    assert!(tape.value(t.recon).item().abs() < 1e-9, "{}", tape.value(t.recon).item());
}

#[test]
fn matching_fidelities_make_the_residual_label_its_approximation() {
    let m = model(NpConfig::default(), 6);
    let p = KinematicParams::default();
    let (lows, mut highs) = streamed(200, 7);
    for h in &mut highs {
        h.next_high = h.g2;
    }
    let mut tape = Tape::new();
    let low = elbo_low(&m, &mut tape, &lows[..16], &p, None).unwrap();
    let means = frozen_low_means(&m, &mut tape, &highs[..16], &low, &p).unwrap();
    let res = elbo_res(&m, &mut tape, &highs[..16], &means, low.z.z, None).unwrap();
    // zero head: mean = r_hat = r, variance = softplus(0) / out^2
    let out = FeatureScales::default().res_out;
    let want: f64 = (0..6)
        .map(|j| 0.5 * (2.0 * std::f64::consts::PI * (2f64.ln() + 1e-6) / (out[j] * out[j])).ln())
        .sum();
    let got = tape.value(res.recon).item();
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn low_elbo_decreases_on_a_fixed_batch() {
    let mut m = model(NpConfig::default(), 8);
    let (lows, _) = streamed(100, 9);
    let w = &lows[20..36];
    let p = KinematicParams::default();
    let mut adam = AdamState::default();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let t = elbo_low(&m, &mut tape, w, &p, Some(&mut rng)).unwrap();
        losses.push(tape.value(t.loss).item());
        let g = tape.backward(t.loss).unwrap();
        let g = tape.param_grads(&g, m.params());
        adam_step(m.params_mut(), &g, &mut adam).unwrap();
    }
    let first = losses[..20].iter().sum::<f64>() / 20.0;
    let last = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn residual_elbo_decreases_on_a_fixed_batch() {
    let mut m = model(NpConfig::default(), 11);
    let (lows, highs) = streamed(400, 12);
    let (lw, hw) = (&lows[40..56], &highs[20..36]);
    let p = KinematicParams::default();
    let mut adam = AdamState::default();
    let mut losses = Vec::new();
    for _ in 0..200 {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let low = elbo_low(&m, &mut tape, lw, &p, Some(&mut rng)).unwrap();
        let means = frozen_low_means(&m, &mut tape, hw, &low, &p).unwrap();
        let res = elbo_res(&m, &mut tape, hw, &means, low.z.z, Some(&mut rng)).unwrap();
        losses.push(tape.value(res.loss).item());
        let g = tape.backward(res.loss).unwrap();
        let g = tape.param_grads(&g, m.params());
        adam_step(m.params_mut(), &g, &mut adam).unwrap();
    }
    let first = losses[..20].iter().sum::<f64>() / 20.0;
    let last = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(last < first, "{first} -> {last}");
}

#[test]
fn residual_decoder_learns_a_constant_fidelity_gap() {
    // with x_high = x_g2 + c the residual head must learn the offset c
    let mut m = model(NpConfig::default(), 14);
    let (lows, mut highs) = streamed(400, 15);
    let gap = [0.003, -0.002, 0.001, 0.02, 0.0, -0.01];
    for h in &mut highs {
        let mut a = h.g2.to_array();
        for j in 0..6 {
            a[j] += gap[j];
        }
        h.next_high = RobotState::from_array(a);
    }
    let (lw, hw) = (&lows[40..56], &highs[20..36]);
    let p = KinematicParams::default();
    let mut adam = AdamState::default();
    let err = |m: &MfrPinpModel| {
        let mut tape = Tape::new();
        let low = elbo_low(m, &mut tape, lw, &p, None).unwrap();
        let means = frozen_low_means(m, &mut tape, hw, &low, &p).unwrap();
        let res = elbo_res(m, &mut tape, hw, &means, low.z.z, None).unwrap();
        tape.value(res.recon).item()
    };
    let before = err(&m);
    for _ in 0..300 {
        let mut tape = Tape::new();
        let low = elbo_low(&m, &mut tape, lw, &p, None).unwrap();
        let means = frozen_low_means(&m, &mut tape, hw, &low, &p).unwrap();
        let res = elbo_res(&m, &mut tape, hw, &means, low.z.z, None).unwrap();
        let g = tape.backward(res.loss).unwrap();
        let g = tape.param_grads(&g, m.params());
        adam_step(m.params_mut(), &g, &mut adam).unwrap();
    }
    assert!(err(&m) < before - 10.0, "{before} -> {}", err(&m));
}

#[test]
fn joint_loss_leaves_frozen_parameters_without_gradient() {
    let mut m = model(NpConfig::default(), 16);
    let (lows, highs) = streamed(400, 17);
    // move the live decoder away from its frozen copy first
    let bias = m.params_mut().get_mut("low/dec/mlp/2/b").unwrap();
    bias.data_mut()[0] = 0.5;
    let batch = vec![(lows[0..16].to_vec(), highs[0..16].to_vec())];
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let (loss, _) = joint_loss(&m, &mut tape, &batch, &KinematicParams::default(), &mut rng).unwrap();
    let g = tape.backward(loss).unwrap();
    let mut seen = 0;
    for name in m.frozen_params().names() {
        if let Some(v) = tape.bound(name, false) {
            seen += 1;
            assert!(g.wrt(v).is_none(), "{name} received a gradient");
        }
    }
    assert_eq!(seen, m.frozen_params().len());
    let live = tape.param_grads(&g, m.params());
    assert!(live["low/dec/mlp/2/b"].data().iter().any(|v| *v != 0.0));
}

fn buffers(lows: &[TransitionLow], highs: &[TransitionHigh]) -> (ReplayBuffer<TransitionLow>, ReplayBuffer<TransitionHigh>) {
    let mut l = ReplayBuffer::new(10_000).unwrap();
    let mut h = ReplayBuffer::new(10_000).unwrap();
    for t in lows {
        l.push(*t);
    }
    for t in highs {
        h.push(*t);
    }
    (l, h)
}

#[test]
fn training_phases_are_deterministic() {
    let (lows, highs) = streamed(600, 19);
    let (lb, hb) = buffers(&lows, &highs);
    let cfg = TrainConfig::default();
    let p = KinematicParams::default();
    let run = || {
        let mut m = model(NpConfig::default(), 20);
        let mut adam = AdamState::default();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let r1 = train_phase(&mut m, &mut adam, &lb, &hb, &cfg, &p, &mut rng, 9).unwrap().unwrap();
        let r2 = train_phase(&mut m, &mut adam, &lb, &hb, &cfg, &p, &mut rng, 19).unwrap().unwrap();
        (m, r1, r2)
    };
    let (a, a1, a2) = run();
    let (b, b1, b2) = run();
    assert_eq!(a, b);
    assert_eq!((a1, a2), (b1, b2));
    assert!(a1.applied && a2.applied);
    assert_eq!(a2.iter, 19);
    // training moved the live parameters but not the frozen copy
    let fresh = model(NpConfig::default(), 20);
    assert_ne!(a.params(), fresh.params());
    assert_eq!(a.frozen_params(), fresh.frozen_params());
}

#[test]
fn training_is_skipped_when_buffers_are_short() {
    let (lows, highs) = streamed(60, 22);
    let (lb, hb) = buffers(&lows, &highs[..5]);
    let mut m = model(NpConfig::default(), 23);
    let before = m.clone();
    let r = train_phase(
        &mut m,
        &mut AdamState::default(),
        &lb,
        &hb,
        &TrainConfig::default(),
        &KinematicParams::default(),
        &mut ChaCha8Rng::seed_from_u64(0),
        0,
    )
    .unwrap();
    assert!(r.is_none());
    assert_eq!(m, before);
}

#[test]
fn degenerate_windows_are_rejected() {
    let m = model(NpConfig::default(), 24);
    let w = low_window(1, 25);
    let mut tape = Tape::new();
    let e = elbo_low(&m, &mut tape, &w, &KinematicParams::default(), None).unwrap_err();
    assert!(matches!(e, LearnerError::DegenerateBatch(1)));
}

#[test]
fn full_buffer_evicts_the_oldest() {
    let mut b = ReplayBuffer::new(3).unwrap();
    assert_eq!(b.push(1), None);
    assert_eq!(b.push(2), None);
    assert_eq!(b.push(3), None);
    assert_eq!(b.push(4), Some(1));
    assert_eq!(b.len(), 3);
    assert_eq!(b.iter().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
    assert_eq!(b.inserted(), 4);
    assert!(ReplayBuffer::<u8>::new(0).is_err());
}

#[test]
fn sampled_windows_stay_inside_one_episode() {
    let mut b = ReplayBuffer::new(100).unwrap();
    for i in 0..100u32 {
        b.push((i / 10, i));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(26);
    for _ in 0..200 {
        if let Some(w) = b.sample_window(5, &mut rng, |a, z| a.0 == z.0) {
            assert!(w.iter().all(|t| t.0 == w[0].0));
            assert!(w.windows(2).all(|p| p[1].1 == p[0].1 + 1));
        }
    }
    assert!(b.sample_window(11, &mut rng, |a, z| a.0 == z.0).is_none());
}

proptest! {
    #[test]
    fn buffer_keeps_the_newest_in_insertion_order(cap in 1usize..20, n in 0usize..60) {
        let mut b = ReplayBuffer::new(cap).unwrap();
        let mut evicted = Vec::new();
        for i in 0..n {
            if let Some(e) = b.push(i) {
                evicted.push(e);
            }
            prop_assert!(b.len() <= cap);
        }
        let kept: Vec<usize> = b.iter().copied().collect();
        let start = n.saturating_sub(cap);
        prop_assert_eq!(kept, (start..n).collect::<Vec<_>>());
        prop_assert_eq!(evicted, (0..start).collect::<Vec<_>>());
    }
}

#[test]
fn high_fidelity_buffer_grows_at_a_fifth_of_the_rate() {
    let d = scenario_data("figure-eight", 1000, 27);
    let cfg = LoopConfig {
        train: TrainConfig {
            train_period: None,
            warmup: 0,
            ..TrainConfig::default()
        },
        ..LoopConfig::default()
    };
    let out = run_loop(&scenario(&d), &cfg, &mut NoObserver).unwrap();
    assert_eq!(out.low_inserted, 1000);
    assert_eq!(out.high_inserted, 200);
}

#[test]
fn disabled_training_predicts_the_physics_prior_with_initial_weights() {
    let d = scenario_data("figure-eight", 300, 28);
    let s = scenario(&d);
    let cfg = LoopConfig {
        train: TrainConfig {
            train_period: None,
            ..TrainConfig::default()
        },
        ..LoopConfig::default()
    };
    let m = model(cfg.np, 29);
    let out = run_loop_from(&s, &cfg, m.clone(), &mut NoObserver).unwrap();
    assert_eq!(out.model, m);
    assert!(out.losses.is_empty());
    assert_eq!(out.predictions.len(), 300);
    let mut x = RobotState::default();
    for r in &out.predictions {
        let f = &d.0[r.iter];
        let g1 = g1_step(&x, f.encoder, &cfg.params, f.dk).unwrap();
        x = g1;
        let want = if r.fallback {
            g1.to_array()
        } else {
            g2_prediction(&s, r.iter, 0, &cfg.params).unwrap().to_array()
        };
        for j in 0..6 {
            let mut e = r.raw.mean[j] - want[j];
            if j == 2 {
                e = wrap_angle(e);
            }
            assert!(e.abs() <= 1e-12 * want[j].abs().max(1.0), "iter {} dim {j}: {e:e}", r.iter);
        }
    }
    assert_eq!(out.predictions.iter().filter(|r| r.fallback).count(), cfg.np.min_context);
}

struct Counting {
    checkpoints: Vec<usize>,
    predictions: usize,
    clock: f64,
}

impl RunObserver for Counting {
    fn now_ms(&mut self) -> f64 {
        self.clock += 0.5;
        self.clock
    }

    fn on_prediction(&mut self, _: &mfrpinp_core::learner::PredictionRecord, latency_ms: f64) {
        assert_eq!(latency_ms, 0.5);
        self.predictions += 1;
    }

    fn on_checkpoint(&mut self, iter: usize, _: &MfrPinpModel) {
        self.checkpoints.push(iter);
    }
}

#[test]
fn runs_are_reproducible() {
    let d = scenario_data("figure-eight", 300, 30);
    let cfg = LoopConfig {
        train: TrainConfig {
            seed: 31,
            checkpoint_every: Some(100),
            ..TrainConfig::default()
        },
        ..LoopConfig::default()
    };
    let mut obs = Counting {
        checkpoints: Vec::new(),
        predictions: 0,
        clock: 0.0,
    };
    let a = run_loop(&scenario(&d), &cfg, &mut obs).unwrap();
    let b = run_loop(&scenario(&d), &cfg, &mut NoObserver).unwrap();
    assert_eq!(a.predictions, b.predictions);
    assert_eq!(a.losses, b.losses);
    assert_eq!(a.model, b.model);
    assert!(a.errors.is_empty());
    assert_eq!(a.losses.len(), 30);
    assert_eq!(obs.checkpoints, vec![99, 199, 299]);
    assert_eq!(obs.predictions, 300);
    assert_eq!(a.quantiles.len(), 3);

    let other = LoopConfig {
        train: TrainConfig {
            seed: 32,
            ..cfg.train
        },
        ..cfg
    };
    let c = run_loop(&scenario(&d), &other, &mut NoObserver).unwrap();
    assert_ne!(a.predictions, c.predictions);
}

#[test]
fn iteration_errors_are_logged_and_the_loop_continues() {
    let mut d = scenario_data("figure-eight", 200, 33);
    d.1[120].x = f64::NAN;
    let cfg = LoopConfig {
        train: TrainConfig {
            train_period: None,
            ..TrainConfig::default()
        },
        ..LoopConfig::default()
    };
    let out = run_loop(&scenario(&d), &cfg, &mut NoObserver).unwrap();
    assert!(!out.errors.is_empty());
    assert!(out.errors.iter().all(|(i, _)| *i >= 120));
    assert!(out.predictions.iter().any(|r| r.iter > 130));
}

#[test]
fn joint_loss_trends_down_over_two_thousand_iterations() {
    let d = scenario_data("figure-eight", 2000, 34);
    let out = run_loop(&scenario(&d), &LoopConfig::default(), &mut NoObserver).unwrap();
    assert!(out.errors.is_empty());
    let l: Vec<f64> = out.losses.iter().map(|r| r.loss).collect();
    let k = l.len() / 10;
    let first = l[..k].iter().sum::<f64>() / k as f64;
    let last = l[l.len() - k..].iter().sum::<f64>() / k as f64;
    assert!(last < first, "{first} -> {last}");
}

/// Small model with unit output scales, heads perturbed so every parameter
/// carries gradient.
fn small_model(seed: u64) -> MfrPinpModel {
    let cfg = NpConfig {
        hidden: 4,
        latent: 2,
        key_dim: 3,
        context_window: 8,
        min_context: 2,
        scales: FeatureScales {
            low_out: [1.0; 6],
            res_out: [1.0; 6],
            ..FeatureScales::default()
        },
        ..NpConfig::default()
    };
    let mut m = model(cfg, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    for (name, t) in m.params_mut().iter_mut() {
        if name.ends_with("mlp/2/w") || name.ends_with("mlp/2/b") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    m
}

#[test]
fn joint_loss_gradients_match_finite_differences() {
    const STEP: f64 = 1e-5;
    let (lows, highs) = streamed(100, 35);
    let batch = vec![
        (lows[10..14].to_vec(), highs[2..6].to_vec()),
        (lows[30..34].to_vec(), highs[8..12].to_vec()),
    ];
    let p = KinematicParams::default();
    for seed in [36u64, 37] {
        let m = small_model(seed);
        let eval = |m: &MfrPinpModel| {
            let mut tape = Tape::new();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (loss, _) = joint_loss(m, &mut tape, &batch, &p, &mut rng).unwrap();
            (tape, loss)
        };
        let (tape, loss) = eval(&m);
        let g = tape.backward(loss).unwrap();
        let grads = tape.param_grads(&g, m.params());
        let mut worst: f64 = 0.0;
        for (name, analytic) in &grads {
            for i in 0..analytic.data().len() {
                let shifted = |d: f64| {
                    let mut m2 = m.clone();
                    m2.params_mut().get_mut(name).unwrap().data_mut()[i] += d;
                    let (t, l) = eval(&m2);
                    t.value(l).item()
                };
                let numeric = (shifted(STEP) - shifted(-STEP)) / (2.0 * STEP);
                let a = analytic.data()[i];
                let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-3);
                worst = worst.max(rel);
                assert!(rel < 1e-4, "{name}[{i}]: analytic {a:e} numeric {numeric:e}");
            }
        }
        assert!(worst < 1e-4);
    }
}

#[test]
fn bad_configs_are_rejected() {
    let bad = [
        TrainConfig { windows: 0, ..TrainConfig::default() },
        TrainConfig { window_len: 1, ..TrainConfig::default() },
        TrainConfig { train_period: Some(0), ..TrainConfig::default() },
        TrainConfig { sync_period: 0, ..TrainConfig::default() },
        TrainConfig { lr: 0.0, ..TrainConfig::default() },
    ];
    for t in bad {
        assert!(t.validate().is_err(), "{t:?}");
    }
    let d = scenario_data("figure-eight", 10, 0);
    let s = Scenario {
        frames: &d.0,
        labels: &d.1[..9],
        initial: RobotState::default(),
    };
    assert!(matches!(
        run_loop(&s, &LoopConfig::default(), &mut NoObserver),
        Err(LearnerError::Misaligned { frames: 10, labels: 9 })
    ));
}
