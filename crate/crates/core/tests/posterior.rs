mod common;

use common::rel_err;
use flowmpc::dataset::{generate_env, EnvRecord, GenSpec};
use flowmpc::dynamics::{rollout_cost, CostParams, State, System};
use flowmpc::envgen::EnvKind;
use flowmpc::flow::{standard_normal_log_prob, Flow, FlowConfig};
use flowmpc::grid::{GridSpec, OccupancyGrid};
use flowmpc::nn::{jitter_params, numeric_gradient, Mat, Parameterized};
use flowmpc::posterior::{
    flow_nll_loss, importance_weights, sample_pert_u, ContextNet, Model, ModelConfig, PosteriorPass, TrainSchedule, Trainer,
};
use flowmpc::vae::VaeConfig;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[test]
fn weights_symmetry_and_shift_invariance() {
    let w = importance_weights(&[-3.0; 5], &[7.0; 5], 2.0, 1.0).unwrap();
    assert!(w.iter().all(|v| (v - 1.0).abs() < 1e-15));

    let lq = [-1.0, -2.5, 0.3, -0.7];
    let j = [10.0, 12.0, 9.5, 30.0];
    let base = importance_weights(&lq, &j, 3.0, 0.5).unwrap();
    let shifted: Vec<f64> = j.iter().map(|c| c + 1234.5).collect();
    let moved = importance_weights(&lq, &shifted, 3.0, 0.5).unwrap();
    for (a, b) in base.iter().zip(&moved) {
        assert!((a - b).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn weights_have_unit_mean(
        pairs in prop::collection::vec((-500.0f64..500.0, 0.0f64..1e6), 1..200),
        alpha in 1e-3f64..1e3,
        beta in 0.0f64..2.0,
    ) {
        let (lq, j): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let w = importance_weights(&lq, &j, alpha, beta).unwrap();
        prop_assert!(w.iter().all(|v| v.is_finite() && *v >= 0.0));
        prop_assert!((mean(&w) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn uniform_weights_give_summed_nll() {
    let lq = [-1.0, -2.0, -4.5];
    assert!((flow_nll_loss(&lq, &[1.0; 3]) - 7.5).abs() < 1e-15);
    assert_eq!(flow_nll_loss(&lq, &[0.0, 3.0, 0.0]), 6.0);
}

fn tiny_posterior(rng: &mut ChaCha8Rng) -> (ContextNet, Flow) {
    let mut context = ContextNet::new(2, 3, 8, 4, rng);
    let mut flow = Flow::new(FlowConfig { dim: 3, depth: 2, context_dim: 4, hidden: vec![6] }, rng).unwrap();
    jitter_params(&mut context, 0.1, rng);
    jitter_params(&mut flow, 0.3, rng);
    (context, flow)
}

/// Weighted loss on a fixed batch as a function of every input.
fn pipeline_loss(context: &ContextNet, flow: &Flow, x0: &[f64], xg: &[f64], h: &[f64], u: &Mat, w: &[f64]) -> f64 {
    let c = context.forward(x0, xg, h).unwrap();
    let lq = flow.log_prob(u, Some(&Mat::broadcast_row(&c, u.rows))).unwrap();
    flow_nll_loss(&lq, w)
}

#[test]
fn pipeline_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for probe in 0..20 {
        let (mut context, mut flow) = tiny_posterior(&mut rng);
        let x0: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let xg: Vec<f64> = (0..2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let h: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let u = Mat::from_vec(5, 3, (0..15).map(|_| rng.sample(StandardNormal)).collect());
        let w: Vec<f64> = (0..5).map(|_| rng.random_range(0.0..2.0)).collect();

        context.zero_grad();
        flow.zero_grad();
        let pass = PosteriorPass::forward(&context, &flow, &x0, &xg, &h, &u).unwrap();
        assert!((flow_nll_loss(&pass.log_q, &w) - pipeline_loss(&context, &flow, &x0, &xg, &h, &u, &w)).abs() < 1e-12);
        let g: Vec<f64> = w.iter().map(|v| -v).collect();
        let gh = pass.backward(&mut context, &mut flow, &g);

        let mut scratch = flow.clone();
        let numeric = numeric_gradient(&flow.flat_values(), 1e-6, |t| {
            scratch.load_flat(t).unwrap();
            pipeline_loss(&context, &scratch, &x0, &xg, &h, &u, &w)
        });
        for (i, (a, n)) in flow.flat_grads().iter().zip(&numeric).enumerate() {
            assert!(rel_err(*a, *n) < 1e-3, "probe {probe} flow param {i}: {a} vs {n}");
        }
        let mut scratch = context.clone();
        let numeric = numeric_gradient(&context.flat_values(), 1e-6, |t| {
            scratch.load_flat(t).unwrap();
            pipeline_loss(&scratch, &flow, &x0, &xg, &h, &u, &w)
        });
        for (i, (a, n)) in context.flat_grads().iter().zip(&numeric).enumerate() {
            assert!(rel_err(*a, *n) < 1e-3, "probe {probe} context param {i}: {a} vs {n}");
        }
        let numeric = numeric_gradient(&h, 1e-6, |v| pipeline_loss(&context, &flow, &x0, &xg, v, &u, &w));
        for (a, n) in gh.iter().zip(&numeric) {
            assert!(rel_err(*a, *n) < 1e-3, "probe {probe} h grad: {a} vs {n}");
        }
    }
}

#[test]
fn context_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (context, _) = tiny_posterior(&mut rng);
    let a = context.forward(&[0.1, 0.2], &[1.0, -1.0], &[0.0, 0.5, 1.0]).unwrap();
    let b = context.forward(&[0.1, 0.2], &[1.0, -1.0], &[0.0, 0.5, 1.0]).unwrap();
    assert_eq!(a, b);
    assert!(context.forward(&[0.1], &[1.0, -1.0], &[0.0, 0.5, 1.0]).is_err());
}

#[test]
fn unperturbed_samples_keep_their_generative_density() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (_, flow) = tiny_posterior(&mut rng);
    let ctx = [0.3, -0.2, 0.9, 0.0];
    let seed_rng = ChaCha8Rng::seed_from_u64(99);
    let samples = sample_pert_u(&flow, &ctx, 0.0, 50, &mut seed_rng.clone()).unwrap();

    // same stream: latent draws come first
    let mut r = seed_rng;
    let z = Mat::from_vec(50, 3, (0..150).map(|_| r.sample(StandardNormal)).collect());
    let (y, ld) = flow.forward(&z, Some(&Mat::broadcast_row(&ctx, 50))).unwrap();
    let direct: Vec<f64> = standard_normal_log_prob(&z).iter().zip(&ld).map(|(a, b)| a - b).collect();
    assert_eq!(samples.u, y);
    for (a, b) in samples.log_q.iter().zip(&direct) {
        assert!((a - b).abs() < 1e-6, "{a} vs {b}");
    }
}

#[test]
fn perturbed_log_densities_are_self_consistent() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let (_, flow) = tiny_posterior(&mut rng);
    let ctx = [1.0, 0.0, -0.5, 0.25];
    let s = sample_pert_u(&flow, &ctx, 0.7, 40, &mut rng).unwrap();
    let again = flow.log_prob(&s.u, Some(&Mat::broadcast_row(&ctx, 40))).unwrap();
    for (a, b) in s.log_q.iter().zip(&again) {
        assert!((a - b).abs() < 1e-6);
    }
}

#[test]
fn identity_flow_samples_are_standard_normal() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let flow = Flow::new(FlowConfig { dim: 6, depth: 3, context_dim: 2, hidden: vec![8] }, &mut rng).unwrap();
    let n = 20000;
    let s = sample_pert_u(&flow, &[0.4, -2.0], 0.0, n, &mut rng).unwrap();
    for c in 0..6 {
        let col: Vec<f64> = (0..n).map(|r| s.u.row(r)[c]).collect();
        let m = mean(&col);
        let var = col.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n as f64;
        assert!(m.abs() < 4.0 / (n as f64).sqrt(), "mean {m}");
        assert!((var - 1.0).abs() < 0.05, "variance {var}");
    }
    assert!(sample_pert_u(&flow, &[0.0, 0.0], 0.0, 0, &mut rng).is_err());
}

#[test]
fn a_gradient_step_raises_the_weighted_likelihood() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let (mut context, mut flow) = tiny_posterior(&mut rng);
    let (x0, xg, h) = ([0.5, 0.0], [-1.0, 1.0], [0.2, 0.1, -0.3]);
    let u = Mat::from_vec(8, 3, (0..24).map(|_| rng.sample(StandardNormal)).collect());
    let w = importance_weights(&[0.0; 8], &[3.0, 1.0, 0.5, 7.0, 2.0, 2.5, 0.1, 4.0], 1.0, 0.0).unwrap();
    let before = -pipeline_loss(&context, &flow, &x0, &xg, &h, &u, &w);
    flow.zero_grad();
    context.zero_grad();
    let pass = PosteriorPass::forward(&context, &flow, &x0, &xg, &h, &u).unwrap();
    let g: Vec<f64> = w.iter().map(|v| -v).collect();
    pass.backward(&mut context, &mut flow, &g);
    let lr = 1e-3;
    flow.visit_params_mut(&mut |p| {
        for (v, g) in p.value.iter_mut().zip(&p.grad) {
            *v -= lr * g;
        }
    });
    let after = -pipeline_loss(&context, &flow, &x0, &xg, &h, &u, &w);
    assert!(after > before, "{after} <= {before}");
}

fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        system: System::Planar,
        horizon: 6,
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
    }
}

fn tiny_envs() -> Vec<EnvRecord> {
    let mut spec = GenSpec::new(System::Planar, EnvKind::Cluttered, 3, 4);
    spec.cells = 16;
    spec.tasks_per_env = 5;
    (0..3).map(|i| generate_env(&spec, i).unwrap()).collect()
}

fn tiny_schedule() -> TrainSchedule {
    TrainSchedule { epochs: 4, vae_epochs: 2, lr_decay_every: 2, samples: 8, batch_envs: 2, ..TrainSchedule::desk(System::Planar) }
}

fn tiny_trainer(seed: u64) -> Trainer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = Model::new(tiny_model_config(), &mut rng).unwrap();
    Trainer::new(model, tiny_schedule(), "fp".into(), seed).unwrap()
}

#[test]
fn training_is_bit_reproducible() {
    let envs = tiny_envs();
    let mut a = tiny_trainer(3);
    let mut b = tiny_trainer(3);
    for _ in 0..4 {
        let ma = a.run_epoch(&envs).unwrap();
        let mb = b.run_epoch(&envs).unwrap();
        assert_eq!(ma.csv_row(), mb.csv_row());
    }
    assert_eq!(a.model.flat_values(), b.model.flat_values());
    assert!(a.finished());
    assert!(a.run_epoch(&envs).is_err());
    assert!(a.state.log[0].vae_loss.is_finite() && a.state.log[3].vae_loss.is_nan());
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let envs = tiny_envs();
    let mut straight = tiny_trainer(9);
    for _ in 0..4 {
        straight.run_epoch(&envs).unwrap();
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.bin");
    let mut first = tiny_trainer(9);
    first.run_epoch(&envs).unwrap();
    first.save(&path).unwrap();
    drop(first);
    let mut resumed = Trainer::load(&path).unwrap();
    assert_eq!(resumed.state.epoch, 1);
    for _ in 0..3 {
        resumed.run_epoch(&envs).unwrap();
    }
    let rows = |t: &Trainer| t.state.log.iter().map(|m| m.csv_row()).collect::<Vec<_>>();
    assert_eq!(rows(&straight), rows(&resumed));
    assert_eq!(straight.model.flat_values(), resumed.model.flat_values());

    straight.save(&path).unwrap();
    // the frozen-VAE epochs log a NaN loss, which must survive the round trip
    let reloaded = Trainer::load(&path).unwrap();
    assert_eq!(rows(&reloaded), rows(&straight));
    let model = Model::load(&path).unwrap();
    assert_eq!(model.config, straight.model.config);
    assert_eq!(model.flat_values(), straight.model.flat_values());
}

#[test]
fn training_leaves_the_dataset_untouched() {
    let envs = tiny_envs();
    let snapshot: Vec<_> = envs.iter().map(|e| (e.sdf.values.clone(), e.tasks.clone())).collect();
    let mut t = tiny_trainer(1);
    t.run_epoch(&envs).unwrap();
    let after: Vec<_> = envs.iter().map(|e| (e.sdf.values.clone(), e.tasks.clone())).collect();
    assert_eq!(snapshot, after);
}

#[test]
fn mismatched_environments_are_rejected() {
    let mut t = tiny_trainer(1);
    assert!(t.run_epoch(&[]).is_err());
    let mut spec = GenSpec::new(System::Planar, EnvKind::Cluttered, 1, 4);
    spec.cells = 32;
    let env = generate_env(&spec, 0).unwrap();
    assert!(t.run_epoch(&[env]).is_err());
}

/// One obstacle-free environment with a single task.
fn open_env(cells: usize) -> EnvRecord {
    let grid = GridSpec::new(2, cells, 4.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut env = EnvRecord::from_occupancy(
        0,
        System::Planar,
        EnvKind::Cluttered,
        OccupancyGrid::empty(grid),
        1,
        &Default::default(),
        &mut rng,
    )
    .unwrap();
    env.tasks = vec![(
        State::from_slice(System::Planar, &[0.5, 0.5, 0.0, 0.0]).unwrap(),
        State::from_slice(System::Planar, &[3.5, 3.5, 0.0, 0.0]).unwrap(),
    )];
    env
}

/// Test-side optimum of the convex open-loop problem by gradient descent
/// on central finite differences.
fn open_loop_optimum(env: &EnvRecord) -> f64 {
    let task = env.task(0);
    let params = CostParams::for_system(System::Planar);
    let cost = |u: &[f64]| rollout_cost(&task, &task.start, u, &params).unwrap();
    let mut u = vec![0.0; 80];
    for _ in 0..3000 {
        let g = numeric_gradient(&u, 1e-6, cost);
        for (v, d) in u.iter_mut().zip(&g) {
            *v -= 0.02 * d;
        }
    }
    cost(&u)
}

#[test]
fn single_environment_overfit_closes_the_gap_to_the_optimum() {
    let envs = vec![open_env(64)];
    let optimum = open_loop_optimum(&envs[0]);
    assert!((optimum - 1523.73).abs() < 1.0, "reference optimum {optimum}");

    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = Model::new(ModelConfig::for_system(System::Planar), &mut rng).unwrap();
    // concentrating settings: constant alpha = 1 and no perturbation
    let schedule =
        TrainSchedule { batch_envs: 1, alpha_end: 1.0, sigma_eps_start: 0.0, ..TrainSchedule::desk(System::Planar) };
    let mut t = Trainer::new(model, schedule, "open".into(), 2).unwrap();
    let best: Vec<f64> = (0..200).map(|_| t.run_epoch(&envs).unwrap().best_cost).collect();
    let early = mean(&best[..10]);
    let late = mean(&best[190..]);
    assert!(early - late >= 0.5 * (early - optimum), "best-sample cost {early} -> {late}, optimum {optimum}");
}

fn mean_pairwise_distance(u: &Mat) -> f64 {
    let mut total = 0.0;
    let mut n = 0;
    for a in 0..u.rows {
        for b in a + 1..u.rows {
            total += u.row(a).iter().zip(u.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            n += 1;
        }
    }
    total / n as f64
}

#[test]
fn larger_alpha_keeps_samples_more_diverse() {
    let envs = vec![open_env(64)];
    let spread = |alpha: f64| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = Model::new(ModelConfig::for_system(System::Planar), &mut rng).unwrap();
        let schedule = TrainSchedule {
            epochs: 60,
            batch_envs: 1,
            alpha_start: alpha,
            alpha_end: alpha,
            sigma_eps_start: 0.0,
            ..TrainSchedule::desk(System::Planar)
        };
        let mut t = Trainer::new(model, schedule, "open".into(), 4).unwrap();
        for _ in 0..60 {
            t.run_epoch(&envs).unwrap();
        }
        let task = envs[0].task(0);
        let h = t.model.embed(&envs[0].sdf).unwrap();
        let c = t.model.context.forward(task.start.as_slice(), task.goal.as_slice(), &h).unwrap();
        let s = sample_pert_u(&t.model.flow, &c, 0.0, 64, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        mean_pairwise_distance(&s.u)
    };
    let (narrow, wide) = (spread(1.0), spread(500.0));
    assert!(narrow < wide, "alpha 1 spread {narrow}, alpha 500 spread {wide}");
}
