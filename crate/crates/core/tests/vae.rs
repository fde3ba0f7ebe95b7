mod common;

use common::{dot, rel_err};
use flowmpc::dynamics::System;
use flowmpc::envgen::{gen_cluttered, occupancy_to_sdf, ObstacleParams};
use flowmpc::grid::{GridSpec, SdfGrid};
use flowmpc::nn::{jitter_params, numeric_gradient, Adam, Parameterized};
use flowmpc::vae::{Vae, VaeConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny_config() -> VaeConfig {
    VaeConfig { dim: 2, cells: 16, h_dim: 3, channels: [4, 4, 6, 6], prior_depth: 2, prior_hidden: vec![5], sdf_clip: 1.0 }
}

fn random_sdf(dim: usize, cells: usize, rng: &mut ChaCha8Rng) -> SdfGrid {
    let spec = GridSpec::new(dim, cells, 4.0).unwrap();
    let values = (0..spec.len()).map(|_| rng.random_range(-1.5..1.5)).collect();
    SdfGrid::from_values(spec, values).unwrap()
}

#[test]
fn planar_shapes_and_determinism() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let vae = Vae::new(VaeConfig::for_system(System::Planar), &mut rng).unwrap();
    let sdf = random_sdf(2, 64, &mut rng);
    let (out, h) = vae.encode::<ChaCha8Rng>(&sdf, None).unwrap();
    assert_eq!(h.len(), 64);
    assert_eq!(h, out.mean);
    let (_, again) = vae.encode::<ChaCha8Rng>(&sdf, None).unwrap();
    assert_eq!(h, again);
    let recon = vae.decode(&h).unwrap();
    assert_eq!(recon.len(), 64 * 64);
    assert!(recon.iter().all(|v| v.is_finite()));
    assert!(vae.encode::<ChaCha8Rng>(&random_sdf(2, 32, &mut rng), None).is_err());
    assert!(vae.decode(&[0.0; 63]).is_err());
}

#[test]
fn quadrotor_grid_encodes_to_256() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let vae = Vae::new(VaeConfig::for_system(System::Quadrotor), &mut rng).unwrap();
    let sdf = random_sdf(3, 64, &mut rng);
    let (_, h) = vae.encode::<ChaCha8Rng>(&sdf, None).unwrap();
    assert_eq!(h.len(), 256);
    assert_eq!(vae.decode(&h).unwrap().len(), 64 * 64 * 64);
}

#[test]
fn sampled_embeddings_average_to_the_mean() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let vae = Vae::new(tiny_config(), &mut rng).unwrap();
    let sdf = random_sdf(2, 16, &mut rng);
    let n = 10_000;
    let mut acc = vec![0.0; 3];
    let mut out = None;
    for _ in 0..n {
        let (o, h) = vae.encode(&sdf, Some(&mut rng)).unwrap();
        for (a, v) in acc.iter_mut().zip(&h) {
            *a += v / n as f64;
        }
        out = Some(o);
    }
    let out = out.unwrap();
    for ((a, m), lv) in acc.iter().zip(&out.mean).zip(&out.logvar) {
        let sigma = (0.5 * lv).exp();
        assert!((a - m).abs() < 3.0 * sigma / 100.0, "{a} vs {m}");
    }
}

#[test]
fn reconstruction_gradient_wrt_h() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let vae = Vae::new(tiny_config(), &mut rng).unwrap();
    let input = vae.prepare(&random_sdf(2, 16, &mut rng)).unwrap();
    let h = [0.3, -0.7, 1.1];
    let analytic = vae.reconstruction_grad_h(&input, &h);
    let numeric = numeric_gradient(&h, 1e-6, |hv| {
        vae.decode(hv).unwrap().iter().zip(&input).map(|(r, x)| (r - x).powi(2)).sum()
    });
    assert!(analytic.iter().any(|g| *g != 0.0), "decoder is dead at this h");
    for (a, n) in analytic.iter().zip(&numeric) {
        assert!(rel_err(*a, *n) < 1e-3, "{a} vs {n}");
    }
}

#[test]
fn training_loss_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut vae = Vae::new(tiny_config(), &mut rng).unwrap();
    jitter_params(&mut vae.prior, 0.2, &mut rng);
    let input = vae.prepare(&random_sdf(2, 16, &mut rng)).unwrap();
    let extra = [0.4, -0.3, 0.9];
    let scale = 5.0;
    let objective = |v: &Vae| {
        let f = v.forward_train_prepared(input.clone(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
        scale * f.loss.total + dot(&extra, &f.h)
    };

    vae.zero_grad();
    let fwd = vae.forward_train_prepared(input.clone(), &mut ChaCha8Rng::seed_from_u64(99)).unwrap();
    vae.backward_train(&fwd, scale, Some(&extra));
    let analytic = vae.flat_grads();
    let theta = vae.flat_values();
    let mut scratch = vae.clone();
    let mut probe = theta.clone();
    let ne = vae.encoder.param_count();
    let live: Vec<usize> = (ne..ne + vae.decoder.param_count()).filter(|&i| analytic[i] != 0.0).collect();
    assert!(10 * live.len() > vae.decoder.param_count(), "only {} live decoder gradients", live.len());
    let mut checked = 0;
    while checked < 30 {
        // every third probe lands on an active decoder weight
        let i = if checked % 3 == 0 { live[rng.random_range(0..live.len())] } else { rng.random_range(0..theta.len()) };
        let h = 1e-6;
        probe[i] = theta[i] + h;
        scratch.load_flat(&probe).unwrap();
        let up = objective(&scratch);
        probe[i] = theta[i] - h;
        scratch.load_flat(&probe).unwrap();
        let down = objective(&scratch);
        probe[i] = theta[i];
        let numeric = (up - down) / (2.0 * h);
        assert!(rel_err(analytic[i], numeric) < 1e-3, "param {i}: {} vs {numeric}", analytic[i]);
        checked += 1;
    }
}

#[test]
fn overfits_a_tiny_batch() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut vae = Vae::new(tiny_config(), &mut rng).unwrap();
    let spec = GridSpec::new(2, 16, 4.0).unwrap();
    let params = ObstacleParams { min_count: 2, max_count: 3, min_radius: 0.4, max_radius: 0.8 };
    let batch: Vec<Vec<f64>> = (0..2)
        .map(|_| {
            let occ = gen_cluttered(&mut rng, spec, &params).unwrap();
            vae.prepare(&occupancy_to_sdf(&occ)).unwrap()
        })
        .collect();
    let mut adam = Adam::new(1e-2);
    let eval = |v: &Vae| -> f64 {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        batch.iter().map(|x| v.forward_train_prepared(x.clone(), &mut r).unwrap().loss.total).sum()
    };
    let before = eval(&vae);
    for _ in 0..200 {
        vae.zero_grad();
        for x in &batch {
            let f = vae.forward_train_prepared(x.clone(), &mut rng).unwrap();
            vae.backward_train(&f, 1.0, None);
        }
        adam.step(&mut vae);
    }
    let after = eval(&vae);
    assert!(after < 0.5 * before, "{before} -> {after}");
}
