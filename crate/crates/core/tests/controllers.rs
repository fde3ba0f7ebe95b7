use std::sync::Arc;

use flowmpc::controllers::{
    flowmppi_step, icem_step, mppi_step, project, run_trial, softmin_weights, ColoredNoise, ControllerConfig,
    ControllerKind, FailureKind, IcemParams, IcemState, MppiParams, Planner, PosteriorRef, ProjectionLoss, Projector,
    Rollouts,
};
use flowmpc::dataset::{generate_env, EnvRecord, GenSpec};
use flowmpc::dynamics::{goal_distance, State, System, Task};
use flowmpc::envgen::EnvKind;
use flowmpc::flow::{Flow, FlowConfig};
use flowmpc::grid::{GridSpec, OccupancyGrid};
use flowmpc::nn::{jitter_params, Parameterized};
use flowmpc::posterior::{ContextNet, Model, ModelConfig};
use flowmpc::vae::{ood_score, VaeConfig};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const T: usize = 6;

fn planar(v: [f64; 4]) -> State {
    State::from_slice(System::Planar, &v).unwrap()
}

fn open_task(start: [f64; 4], goal: [f64; 4]) -> Task {
    let grid = GridSpec::new(2, 16, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let env =
        EnvRecord::from_occupancy(0, System::Planar, EnvKind::Cluttered, OccupancyGrid::empty(grid), 1, &Default::default(), &mut rng)
            .unwrap();
    Task { system: System::Planar, sdf: Arc::clone(&env.sdf), start: planar(start), goal: planar(goal) }
}

fn cluttered_task() -> Task {
    let mut spec = GenSpec::new(System::Planar, EnvKind::Cluttered, 1, 4);
    spec.cells = 16;
    spec.tasks_per_env = 2;
    generate_env(&spec, 7).unwrap().task(0)
}

fn tiny_model(seed: u64) -> Model {
    let config = ModelConfig {
        system: System::Planar,
        horizon: T,
        vae: VaeConfig {
            dim: 2,
            cells: 16,
            h_dim: 4,
            channels: [2, 3, 3, 4],
            prior_depth: 2,
            prior_hidden: vec![8],
            sdf_clip: 1.0,
        },
        context_dim: 6,
        context_hidden: 16,
        flow_depth: 2,
        flow_hidden: vec![16],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(config, &mut rng).unwrap();
    jitter_params(&mut model, 0.05, &mut rng);
    model
}

fn config(kind: ControllerKind, k: usize) -> ControllerConfig {
    ControllerConfig::for_system(System::Planar, kind, k)
}

proptest! {
    #[test]
    fn softmin_weights_sum_to_one_and_ignore_shifts(
        s in prop::collection::vec(-1e4f64..1e4, 1..40),
        lambda in 1e-3f64..1e3,
        shift in -1e3f64..1e3,
    ) {
        let w = softmin_weights(&s, lambda).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        prop_assert!(w.iter().all(|v| *v >= 0.0));
        let shifted: Vec<f64> = s.iter().map(|v| v + shift).collect();
        let w2 = softmin_weights(&shifted, lambda).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }
}

#[test]
fn mppi_without_noise_keeps_the_nominal() {
    let task = open_task([0.5, 0.5, 0.0, 0.0], [3.5, 3.5, 0.0, 0.0]);
    let mut ev = Rollouts::new(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let nominal: Vec<f64> = (0..2 * T).map(|i| 0.1 * i as f64).collect();
    let mut u = nominal.clone();
    let p = MppiParams { lambda: 1.0, sigma: 0.0, iterations: 3 };
    let diag = mppi_step(&task.start, &mut u, &p, 12, &mut rng, &mut ev);
    for (a, b) in u.iter().zip(&nominal) {
        assert!((a - b).abs() < 1e-12);
    }
    assert_eq!(diag.rollouts, 12);
}

#[test]
fn mppi_lowers_the_cost_of_its_nominal() {
    let task = open_task([0.5, 0.5, 0.0, 0.0], [3.5, 3.5, 0.0, 0.0]);
    let params = flowmpc::dynamics::CostParams::for_system(System::Planar);
    let cost = |u: &[f64]| flowmpc::dynamics::rollout_cost(&task, &task.start, u, &params).unwrap();
    let mut ev = Rollouts::new(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut u = vec![0.0; 2 * T];
    let before = cost(&u);
    let p = MppiParams { lambda: 1.0, sigma: 0.9, iterations: 1 };
    for _ in 0..20 {
        mppi_step(&task.start, &mut u, &p, 256, &mut rng, &mut ev);
    }
    assert!(cost(&u) < before, "{} vs {before}", cost(&u));
}

#[test]
fn icem_with_all_elites_moves_to_the_sample_mean() {
    let task = open_task([0.5, 0.5, 0.0, 0.0], [3.5, 3.5, 0.0, 0.0]);
    let mut ev = Rollouts::new(&task);
    let p = IcemParams { sigma: 0.75, noise_exponent: 2.5, elite_fraction: 1.0, kept_fraction: 0.3, iterations: 1, momentum: 0.0 };
    let n = 16;
    let mut state = IcemState::new(T, 2, p.noise_exponent);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    icem_step(&task.start, &mut state, &p, n, &mut rng, &mut ev);

    let noise = ColoredNoise::new(T, p.noise_exponent);
    let mut replay = ChaCha8Rng::seed_from_u64(3);
    let mut mean = vec![0.0; 2 * T];
    for _ in 0..n {
        for ch in 0..2 {
            for (t, z) in noise.sample(&mut replay).into_iter().enumerate() {
                mean[t * 2 + ch] += p.sigma.sqrt() * z / n as f64;
            }
        }
    }
    for (a, b) in state.mean.iter().zip(&mean) {
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    assert_eq!(state.elites.len(), n);
}

#[test]
fn icem_keeps_elites_within_budget() {
    let task = cluttered_task();
    let mut ev = Rollouts::new(&task);
    let p = config(ControllerKind::Icem, 64).icem;
    let mut state = IcemState::new(T, 2, p.noise_exponent);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..3 {
        let (plan, diag) = icem_step(&task.start, &mut state, &p, 64, &mut rng, &mut ev);
        assert_eq!(diag.rollouts, 64);
        assert_eq!(plan.len(), 2 * T);
        state.shift();
        assert_eq!(&state.mean[2 * (T - 1)..], &[0.0, 0.0]);
    }
}

#[test]
fn flowmppi_falls_back_to_exact_mppi_when_the_latent_map_fails() {
    let task = cluttered_task();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut flow = Flow::new(FlowConfig { dim: 2 * T, depth: 2, context_dim: 3, hidden: vec![8] }, &mut rng).unwrap();
    let broken = vec![f64::NAN; flow.param_count()];
    flow.load_flat(&broken).unwrap();
    let nominal: Vec<f64> = (0..2 * T).map(|i| (i as f64 * 0.7).sin()).collect();
    let p = MppiParams { lambda: 1.0, sigma: 1.0, iterations: 1 };

    let mut a = nominal.clone();
    let mut ev = Rollouts::new(&task);
    let diag = flowmppi_step(&task.start, &mut a, &[0.1, 0.2, 0.3], &flow, &p, 64, &mut ChaCha8Rng::seed_from_u64(9), &mut ev);
    assert!(diag.fallback);
    assert_eq!(diag.rollouts, 32);

    let mut b = nominal.clone();
    let mut ev = Rollouts::new(&task);
    mppi_step(&task.start, &mut b, &p, 32, &mut ChaCha8Rng::seed_from_u64(9), &mut ev);
    assert_eq!(a, b);
}

#[test]
fn flowmppi_with_an_identity_flow_spends_its_budget_on_both_halves() {
    let task = cluttered_task();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let flow = Flow::new(FlowConfig { dim: 2 * T, depth: 2, context_dim: 3, hidden: vec![8] }, &mut rng).unwrap();
    let p = MppiParams { lambda: 1.0, sigma: 1.0, iterations: 2 };
    let mut u = vec![0.0; 2 * T];
    let mut ev = Rollouts::new(&task);
    let diag = flowmppi_step(&task.start, &mut u, &[0.0; 3], &flow, &p, 64, &mut rng, &mut ev);
    assert!(!diag.fallback);
    assert!(diag.best_from_flow.is_some());
    assert_eq!(diag.rollouts, 64);
    assert!(u.iter().all(|v| v.is_finite()));
}

/// Identity flow, zero nominal, unit variance: the perturbation half costs
/// `J + lambda |eps|^2` and the flow half `J - lambda |eps_Z|^2`. With a huge
/// lambda the rollout costs drop out of the softmin and the update is a
/// closed-form average of the raw draws.
#[test]
fn identity_flow_update_matches_the_closed_form_average() {
    let task = open_task([2.0, 2.0, 0.0, 0.0], [2.0, 2.0, 0.0, 0.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let flow = Flow::new(FlowConfig { dim: 2 * T, depth: 2, context_dim: 3, hidden: vec![8] }, &mut rng).unwrap();
    let p = MppiParams { lambda: 1e9, sigma: 1.0, iterations: 1 };
    let len = 2 * T;
    for seed in 0..5 {
        let mut u = vec![0.0; len];
        let mut ev = Rollouts::new(&task);
        let diag = flowmppi_step(&task.start, &mut u, &[0.0; 3], &flow, &p, 64, &mut ChaCha8Rng::seed_from_u64(seed), &mut ev);
        assert_eq!(diag.best_from_flow, Some(true));

        let mut replay = ChaCha8Rng::seed_from_u64(seed);
        let draws: Vec<f64> = (0..64 * len).map(|_| rand::Rng::sample(&mut replay, rand_distr::StandardNormal)).collect();
        let scores: Vec<f64> = draws
            .chunks(len)
            .enumerate()
            .map(|(k, e)| {
                let sq: f64 = e.iter().map(|v| v * v).sum();
                if k < 32 { -sq } else { sq }
            })
            .collect();
        let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = scores.iter().map(|s| (s - top).exp()).collect();
        let total: f64 = w.iter().sum();
        let mut expected = vec![0.0; len];
        for (e, wk) in draws.chunks(len).zip(&w) {
            for (x, v) in expected.iter_mut().zip(e) {
                *x += wk / total * v;
            }
        }
        for (a, b) in u.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
    }
}

fn planner_budget_audit(kind: ControllerKind, k: usize, model: &Model, task: &Task) {
    let mut planner = Planner::for_task(config(kind, k), task, Some(model)).unwrap();
    let mut ev = Rollouts::new(task);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut x = task.start;
    for _ in 0..4 {
        let before = ev.count;
        let step = planner.step(&x, &mut rng, &mut ev).unwrap();
        assert!(ev.count - before <= k, "{kind:?}: {} > {k}", ev.count - before);
        assert_eq!(step.diagnostics.rollouts, ev.count - before);
        x = flowmpc::dynamics::step(System::Planar, &x, &step.control).unwrap();
    }
}

#[test]
fn every_controller_stays_within_its_rollout_budget() {
    let model = tiny_model(10);
    let task = cluttered_task();
    for kind in [ControllerKind::Mppi, ControllerKind::Icem, ControllerKind::FlowMppi, ControllerKind::FlowMppiProject] {
        for k in [10, 64, 101] {
            planner_budget_audit(kind, k, &model, &task);
        }
    }
}

#[test]
fn flow_controllers_need_a_model() {
    let task = cluttered_task();
    assert!(Planner::for_task(config(ControllerKind::FlowMppi, 64), &task, None).is_err());
    assert!(Planner::for_task(config(ControllerKind::Mppi, 64), &task, None).is_ok());
}

#[test]
fn projection_without_steps_leaves_the_embedding_alone() {
    let model = tiny_model(11);
    let task = cluttered_task();
    let h = model.embed(&task.sdf).unwrap();
    let mut projector = Projector::new(model.posterior());
    let mut ev = Rollouts::new(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let p = config(ControllerKind::FlowMppiProject, 64).projection;
    let (same, flagged) = project(&h, &task.start, &task.goal, &mut projector, &p, 0, 32, &mut rng, &mut ev);
    assert_eq!(same, h);
    assert!(!flagged);
    assert_eq!(ev.count, 0);
    let frozen = flowmpc::controllers::ProjectionParams { lr: 0.0, ..p };
    let (same, _) = project(&h, &task.start, &task.goal, &mut projector, &frozen, 4, 32, &mut rng, &mut ev);
    assert_eq!(same, h);
    assert_eq!(ev.count, 32);
}

#[test]
fn ood_projection_raises_the_prior_likelihood() {
    let model = tiny_model(12);
    let task = cluttered_task();
    let h: Vec<f64> = vec![4.0, -3.0, 5.0, 2.0];
    let mut projector = Projector::new(model.posterior());
    let mut ev = Rollouts::new(&task);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut p = config(ControllerKind::FlowMppiProject, 64).projection;
    p.loss = ProjectionLoss::OodOnly;
    p.b = 1.0;
    p.lr = 0.05;
    let (projected, flagged) = project(&h, &task.start, &task.goal, &mut projector, &p, 20, 32, &mut rng, &mut ev);
    assert!(!flagged);
    assert_eq!(ev.count, 0);
    let before = ood_score(&h, &model.vae.prior).unwrap();
    let after = ood_score(&projected, &model.vae.prior).unwrap();
    assert!(after < before, "{after} vs {before}");
}

#[test]
fn a_frozen_projection_matches_flowmppi_on_the_first_step() {
    let model = tiny_model(13);
    let task = cluttered_task();
    let k = 64;
    let mut cfg = config(ControllerKind::FlowMppiProject, k);
    cfg.projection.initial_steps = 0;
    cfg.projection.lr = 0.0;
    let mut projecting = Planner::for_task(cfg, &task, Some(&model)).unwrap();
    let mut plain = Planner::for_task(config(ControllerKind::FlowMppi, k - k / 2), &task, Some(&model)).unwrap();
    let mut ev = Rollouts::new(&task);
    let a = projecting.step(&task.start, &mut ChaCha8Rng::seed_from_u64(1), &mut ev).unwrap();
    let b = plain.step(&task.start, &mut ChaCha8Rng::seed_from_u64(1), &mut ev).unwrap();
    assert_eq!(a.control, b.control);
    assert_eq!(projecting.nominal, plain.nominal);
}

#[test]
fn posterior_reference_can_wrap_loose_networks() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let context = ContextNet::new(4, 2, 8, 3, &mut rng);
    let flow = Flow::new(FlowConfig { dim: 2 * T, depth: 1, context_dim: 3, hidden: vec![8] }, &mut rng).unwrap();
    let prior = Flow::new(FlowConfig { dim: 2, depth: 1, context_dim: 0, hidden: vec![4] }, &mut rng).unwrap();
    let task = cluttered_task();
    let post = PosteriorRef { context: &context, flow: &flow, prior: &prior };
    let mut planner = Planner::new(config(ControllerKind::FlowMppi, 32), &task, T, Some(post), Some(vec![0.0, 0.0])).unwrap();
    let step = planner.step(&task.start, &mut rng, &mut Rollouts::new(&task)).unwrap();
    assert_eq!(step.control.len(), 2);
    assert!(Planner::new(config(ControllerKind::FlowMppi, 32), &task, T + 1, Some(post), Some(vec![0.0, 0.0])).is_err());
}

#[test]
fn a_start_inside_the_goal_succeeds_immediately() {
    let task = open_task([2.0, 2.0, 0.0, 0.0], [2.0, 2.05, 0.0, 0.0]);
    let mut planner = Planner::for_task(config(ControllerKind::Mppi, 32), &task, None).unwrap();
    let r = run_trial(&task, &mut planner, 100, 0);
    assert!(r.success);
    assert_eq!((r.steps, r.executed_cost, r.failure), (0, 0.0, None));
}

#[test]
fn a_start_in_collision_fails_immediately() {
    let task = open_task([-1.0, 2.0, 0.0, 0.0], [2.0, 2.0, 0.0, 0.0]);
    let mut planner = Planner::for_task(config(ControllerKind::Mppi, 32), &task, None).unwrap();
    let r = run_trial(&task, &mut planner, 100, 0);
    assert!(!r.success);
    assert_eq!((r.steps, r.failure), (0, Some(FailureKind::Collision)));
}

#[test]
fn a_zero_controller_times_out_with_the_running_cost() {
    let task = open_task([1.0, 1.0, 0.0, 0.0], [3.0, 3.0, 0.0, 0.0]);
    let mut cfg = config(ControllerKind::Mppi, 8);
    cfg.mppi.sigma = 0.0;
    let mut planner = Planner::for_task(cfg, &task, None).unwrap();
    let r = run_trial(&task, &mut planner, 30, 0);
    assert_eq!((r.success, r.steps, r.failure), (false, 30, Some(FailureKind::Timeout)));
    let d = goal_distance(&task.start, &task.goal);
    assert!((r.executed_cost - 30.0 * 10.0 * d).abs() < 1e-9);
}

#[test]
fn trials_are_deterministic_per_seed() {
    let model = tiny_model(15);
    let task = cluttered_task();
    for kind in [ControllerKind::Mppi, ControllerKind::Icem, ControllerKind::FlowMppiProject] {
        let run = |seed| {
            let mut planner = Planner::for_task(config(kind, 32), &task, Some(&model)).unwrap();
            run_trial(&task, &mut planner, 15, seed)
        };
        assert_eq!(run(3), run(3));
    }
}

#[test]
fn mppi_reaches_the_goal_in_open_space() {
    let task = open_task([0.5, 0.5, 0.0, 0.0], [3.5, 3.5, 0.0, 0.0]);
    let mut successes = 0;
    for seed in 0..4 {
        let mut planner = Planner::for_task(config(ControllerKind::Mppi, 256), &task, None).unwrap();
        let r = run_trial(&task, &mut planner, 100, seed);
        assert!(r.max_rollouts <= 256);
        successes += r.success as usize;
    }
    assert!(successes >= 3, "{successes}/4");
}
