use super::*;
use crate::ctxformer::ControllerConfig;
use crate::metasample::InitialConditionMode;
use crate::plant::{EvaporatorParams, PlantInput, PlantState, TS};
use crate::refmodel::ReferenceSignal;
use tempfile::tempdir;

/// Independent plain-f64 RK4 simulator of the consistent dynamics, written
/// against the published equations rather than the diffcore ops.
fn indep_deriv(p: &EvaporatorParams, x2: f64, p2: f64, p100: f64, f200: f64) -> (f64, f64) {
    let t2 = p.a * p2 + p.b * x2 + p.c;
    let t3 = p.d * p2 + p.e;
    let t100 = p.phi * p100 + p.gamma;
    let ua1 = p.h * (p.f1 + p.f3);
    let q100 = ua1 * (t100 - t2);
    let f4 = (q100 - p.f1 * p.cp * (t2 - p.t1)) / p.lambda;
    let q200 = p.ua2 * (t3 - p.t200) / (1.0 + p.ua2 / (2.0 * p.cp * f200));
    let f5 = q200 / p.lambda;
    let f2 = p.f1 - f4;
    ((p.f1 * p.x1 - f2 * x2) / p.m, (f4 - f5) / p.cap)
}

fn indep_step(p: &EvaporatorParams, mut x2: f64, mut p2: f64, u: (f64, f64)) -> (f64, f64) {
    let substeps = 4;
    let dt = TS / substeps as f64;
    for _ in 0..substeps {
        let (k1x, k1p) = indep_deriv(p, x2, p2, u.0, u.1);
        let (k2x, k2p) = indep_deriv(p, x2 + 0.5 * dt * k1x, p2 + 0.5 * dt * k1p, u.0, u.1);
        let (k3x, k3p) = indep_deriv(p, x2 + 0.5 * dt * k2x, p2 + 0.5 * dt * k2p, u.0, u.1);
        let (k4x, k4p) = indep_deriv(p, x2 + dt * k3x, p2 + dt * k3p, u.0, u.1);
        x2 += dt / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
        p2 += dt / 6.0 * (k1p + 2.0 * k2p + 2.0 * k3p + k4p);
    }
    (x2, p2)
}

fn fixed_draw(horizon: usize) -> MetaDraw {
    MetaDraw {
        system: EvaporatorParams::consistent(),
        reference: ReferenceSignal::constant(22.0, horizon),
        initial_state: PlantState::nominal(),
        initial_input: PlantInput::nominal(),
        seed_ids: (0, 0),
    }
}

fn desk_weights(seed: u64) -> ControllerWeights {
    let mut rng = substream(seed, "init");
    ControllerWeights::init(&ControllerConfig::desk(), &mut rng)
}

/// A freshly initialized controller has a zero output head and zero PID
/// gains, so it emits exactly u_bias and the closed loop must match an
/// independent open-loop simulation under the constant nominal input.
#[test]
fn zero_init_rollout_matches_independent_simulation() {
    let w = desk_weights(3);
    let draw = fixed_draw(40);
    let rec = rollout_infer(&w, &draw, &RolloutOptions::default()).unwrap();

    let p = draw.system;
    let (mut x2, mut p2) = (draw.initial_state.x2, draw.initial_state.p2);
    let mut expected_rss = 0.0;
    let x0m = ReferenceModelLti::default().state_matching_output(x2, 22.0);
    let desired = ReferenceModelLti::default().desired_output(&draw.reference, x0m);
    for k in 0..40 {
        let y = x2;
        assert!(
            (rec.measured[k] - y).abs() < 1e-9,
            "step {k}: {} vs {}",
            rec.measured[k],
            y
        );
        assert!((rec.inputs[k].0 - draw.initial_input.p100).abs() < 1e-12);
        assert!((rec.inputs[k].1 - draw.initial_input.f200).abs() < 1e-12);
        expected_rss += (desired[k] - y).powi(2);
        let next = indep_step(&p, x2, p2, (draw.initial_input.p100, draw.initial_input.f200));
        x2 = next.0;
        p2 = next.1;
    }
    assert!((rec.rss - expected_rss).abs() < 1e-8, "{} vs {expected_rss}", rec.rss);
}

#[test]
fn single_step_horizon_rss_is_one_squared_residual() {
    let w = desk_weights(4);
    let draw = fixed_draw(1);
    let rec = rollout_infer(&w, &draw, &RolloutOptions::default()).unwrap();
    let model = ReferenceModelLti::default();
    let y0 = draw.initial_state.x2;
    let yd0 = model.desired_output(
        &draw.reference,
        model.state_matching_output(y0, 22.0),
    )[0];
    assert!((rec.rss - (yd0 - y0).powi(2)).abs() < 1e-12);
    // with matching initialization the first desired sample equals y0
    assert!(rec.rss < 1e-20);
}

/// Weight gradient of the rollout RSS against central finite differences on
/// a sample of coordinates spread across every tensor.
#[test]
fn rollout_gradient_matches_finite_differences() {
    let mut w = desk_weights(5);
    // non-degenerate weights so the loss actually depends on everything
    let mut rng = substream(55, "jitter");
    for (_, t) in w.named_tensors_mut() {
        for v in t.values.iter_mut() {
            *v += 0.01 * (rand::Rng::gen::<f64>(&mut rng) - 0.5);
        }
    }
    let draw = fixed_draw(10);
    let opts = RolloutOptions::default();
    let (_, grads) = rollout_gradients(&w, &draw, &opts).unwrap();

    let eps = 1e-5;
    let names: Vec<String> = w.named_tensors().iter().map(|(n, _)| n.clone()).collect();
    let mut checked = 0;
    for (ti, name) in names.iter().enumerate() {
        let len = w.named_tensors()[ti].1.len();
        // first, middle and last coordinate of every tensor
        for ci in [0, len / 2, len.saturating_sub(1)] {
            let probe = |delta: f64| -> f64 {
                let mut wp = w.clone();
                wp.named_tensors_mut()[ti].1.values[ci] += delta;
                rollout_infer(&wp, &draw, &opts).unwrap().rss
            };
            let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
            let ad = grads[ti][ci];
            // FD noise is absolute (loss roundoff / eps), so the relative
            // check gets an absolute floor for near-zero gradients
            let denom = fd.abs().max(ad.abs()).max(1e-3);
            assert!(
                (ad - fd).abs() / denom < 1e-3,
                "{name}[{ci}]: ad {ad} fd {fd}"
            );
            checked += 1;
        }
    }
    assert!(checked > 30);
}

#[test]
fn disabled_noise_ignores_noise_seed() {
    let w = desk_weights(6);
    let draw = fixed_draw(15);
    let a = rollout_infer(&w, &draw, &RolloutOptions { noise_master: 1, ..Default::default() });
    let b = rollout_infer(&w, &draw, &RolloutOptions { noise_master: 99, ..Default::default() });
    assert_eq!(a.unwrap(), b.unwrap());
}

#[test]
fn enabled_noise_depends_on_trajectory_id() {
    let w = desk_weights(6);
    let draw = fixed_draw(15);
    let opts = |traj| RolloutOptions {
        noise: NoiseSpec::default_test(),
        trajectory: traj,
        ..Default::default()
    };
    let a = rollout_infer(&w, &draw, &opts(0)).unwrap();
    let b = rollout_infer(&w, &draw, &opts(1)).unwrap();
    assert_ne!(a.measured, b.measured);
}

fn tiny_config() -> TrainConfig {
    let mut config = TrainConfig::desk();
    config.distributions.horizon = 8;
    config.stages = StageSpec::curriculum([1e-9, 1e-9, 1e-9], 8, [3, 2, 2]);
    config.validation_draws = 2;
    config
}

#[test]
fn infinite_l_min_runs_exactly_one_iteration() {
    let mut config = tiny_config();
    config.stages = vec![StageSpec {
        index: 1,
        sample_system: false,
        sample_reference: false,
        sample_initial: false,
        l_min: f64::INFINITY,
        max_iters: 100,
    }];
    let mut state = TrainState::new(&config, 9);
    let mut trace = vec![];
    let summary = train_stage(&mut state, &config, &mut trace, None).unwrap();
    assert_eq!(summary.iters, 1);
    // a finite smoothed loss trivially beats an infinite gate
    assert!(summary.reached_l_min);
}

#[test]
fn batch_of_identical_draws_equals_batch_of_one() {
    // stage 1 freezes every axis, so b = 2 averages two identical rollouts
    let mut config = tiny_config();
    config.stages[0].l_min = 0.0; // never advance early
    let mut s1 = TrainState::new(&config, 10);
    let mut s2 = TrainState::new(&config, 10);
    config.batch = 1;
    train_step(&mut s1, &config).unwrap();
    config.batch = 2;
    train_step(&mut s2, &config).unwrap();
    assert_eq!(s1.weights, s2.weights);
}

#[test]
fn curriculum_is_deterministic() {
    let config = tiny_config();
    let run = || {
        let mut state = TrainState::new(&config, 11);
        let result = run_curriculum(&mut state, &config, None).unwrap();
        (state.weights, result)
    };
    let (w1, r1) = run();
    let (w2, r2) = run();
    assert_eq!(w1, w2);
    assert_eq!(r1, r2);
}

#[test]
fn curriculum_advances_through_all_stages_and_validates() {
    let config = tiny_config();
    let mut state = TrainState::new(&config, 12);
    let result = run_curriculum(&mut state, &config, None).unwrap();
    assert_eq!(result.stages.len(), 3);
    assert_eq!(
        result.stages.iter().map(|s| s.stage).collect::<Vec<_>>(),
        vec![1, 2, 3]
    );
    for s in &result.stages {
        let v = s.validation_m_rmse.unwrap();
        assert!(v.is_finite() && v >= 0.0);
    }
    assert_eq!(result.trace.len(), 3 + 2 + 2);
    // trace iteration numbers are global and strictly increasing
    for w in result.trace.windows(2) {
        assert!(w[1].iter == w[0].iter + 1);
    }
}

/// save -> load -> one step must equal two uninterrupted steps bitwise.
#[test]
fn resume_is_bit_identical() {
    let mut config = tiny_config();
    config.stages[0].max_iters = 4;
    config.stages[0].l_min = 0.0;
    let dir = tempdir().unwrap();
    let path = dir.path().join("state.json");

    let mut a = TrainState::new(&config, 13);
    train_step(&mut a, &config).unwrap();
    a.save(&path).unwrap();
    train_step(&mut a, &config).unwrap();

    let mut b = TrainState::load(&path).unwrap();
    train_step(&mut b, &config).unwrap();
    assert_eq!(a.weights, b.weights);
    assert_eq!(a.optimizer, b.optimizer);
    assert_eq!(a.draw_counter, b.draw_counter);
}

#[test]
fn train_state_rejects_foreign_files() {
    let dir = tempdir().unwrap();
    let path = dir.path().join("bogus.json");
    std::fs::write(&path, r#"{"format":"something-else"}"#).unwrap();
    assert!(TrainState::load(&path).is_err());
}

#[test]
fn frozen_axes_reuse_one_draw_while_sampled_axes_move() {
    let dist = DistributionConfig {
        initial_mode: InitialConditionMode::Sampled {
            x2_range: (24.0, 26.0),
            p2_range: (48.0, 51.0),
        },
        horizon: 12,
        ..Default::default()
    };
    let stage2 = StageSpec {
        index: 2,
        sample_system: false,
        sample_reference: true,
        sample_initial: false,
        l_min: 0.0,
        max_iters: 1,
    };
    let d0 = compose_draw(17, 0, &stage2, &dist).unwrap();
    let d1 = compose_draw(17, 1, &stage2, &dist).unwrap();
    assert_eq!(d0.system, d1.system);
    assert_eq!(d0.system, dist.base);
    assert_eq!(d0.initial_state, d1.initial_state);
    assert_ne!(d0.reference, d1.reference);
}

#[test]
fn loss_trace_csv_has_expected_shape() {
    let rows = vec![
        TraceRow { iter: 0, stage: 1, loss: 12.5, lr: 1e-3 },
        TraceRow { iter: 1, stage: 1, loss: 11.0, lr: 9e-4 },
    ];
    let mut buf = vec![];
    write_trace_csv(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "iter,stage,loss,lr");
    assert_eq!(text.lines().count(), 3);
}

/// A short stage-1 run on a fixed draw must make real progress: the
/// smoothed loss should drop well below its starting value.
#[test]
fn smoke_training_reduces_loss() {
    let mut config = TrainConfig::desk();
    config.distributions.horizon = 30;
    config.stages = StageSpec::curriculum([1e-6, 1e-6, 1e-6], 30, [40, 0, 0]);
    config.loss_window = 5;
    let mut state = TrainState::new(&config, 21);
    let mut trace = vec![];
    let summary = train_stage(&mut state, &config, &mut trace, None).unwrap();
    let first = trace.first().unwrap().loss;
    assert!(first > 0.0);
    assert!(
        summary.smoothed_loss < 0.5 * first,
        "no progress: start {first}, end {}",
        summary.smoothed_loss
    );
}
