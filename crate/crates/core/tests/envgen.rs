use std::sync::Arc;

use flowmpc::dataset::{generate_env, GenSpec};
use flowmpc::dynamics::{in_collision, step_planar, System};
use flowmpc::envgen::{gen_cluttered, gen_rooms, ingest_points, occupancy_to_sdf, EnvKind, ObstacleParams, PassageParams};
use flowmpc::grid::GridSpec;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(20))]

    /// 20 environments with 50 tasks each: 1000 sampled pairs.
    #[test]
    fn sampled_tasks_respect_the_task_invariants(seed in any::<u64>(), rooms in any::<bool>()) {
        let kind = if rooms { EnvKind::Rooms } else { EnvKind::Cluttered };
        let mut spec = GenSpec::new(System::Planar, kind, 1, seed);
        spec.tasks_per_env = 50;
        let env = generate_env(&spec, 0).unwrap();
        for (start, goal) in &env.tasks {
            let (p, q) = (start.position(), goal.position());
            let sep = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
            prop_assert!(sep >= 4.0, "separation {sep}");
            prop_assert!(env.sdf.spec.contains(p) && env.sdf.spec.contains(q));
            prop_assert!(!in_collision(&env.sdf, start) && !in_collision(&env.sdf, goal));
            prop_assert_eq!(&goal.as_slice()[2..], &[0.0, 0.0]);
        }
    }

    #[test]
    fn generators_are_pure_functions_of_seed_and_params(seed in any::<u64>(), dim in 2usize..=3) {
        let spec = GridSpec::new(dim, 16, 4.0).unwrap();
        let obstacles = if dim == 2 { ObstacleParams::planar() } else { ObstacleParams::quadrotor() };
        let a = gen_cluttered(&mut ChaCha8Rng::seed_from_u64(seed), spec, &obstacles).unwrap();
        let b = gen_cluttered(&mut ChaCha8Rng::seed_from_u64(seed), spec, &obstacles).unwrap();
        prop_assert_eq!(a, b);
        let passages = PassageParams::default();
        let a = gen_rooms(&mut ChaCha8Rng::seed_from_u64(seed), GridSpec::new(dim, 32, 4.0).unwrap(), &passages).unwrap();
        let b = gen_rooms(&mut ChaCha8Rng::seed_from_u64(seed), GridSpec::new(dim, 32, 4.0).unwrap(), &passages).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn sdf_is_lipschitz_up_to_discretization(seed in any::<u64>()) {
        let spec = GridSpec::new(2, 32, 4.0).unwrap();
        let occ = gen_cluttered(&mut ChaCha8Rng::seed_from_u64(seed), spec, &ObstacleParams::planar()).unwrap();
        let sdf = occupancy_to_sdf(&occ);
        let res = spec.resolution();
        for i in (0..spec.len()).step_by(7) {
            for j in (0..spec.len()).step_by(13) {
                let (a, b) = (spec.unravel(i), spec.unravel(j));
                let dist = (((a[0] as f64 - b[0] as f64).powi(2) + (a[1] as f64 - b[1] as f64).powi(2)).sqrt()) * res;
                prop_assert!((sdf.values[i] - sdf.values[j]).abs() <= dist + 2.0 * res + 1e-12);
            }
        }
    }

    #[test]
    fn planar_step_is_linear(
        x in prop::array::uniform4(-10.0f64..10.0),
        y in prop::array::uniform4(-10.0f64..10.0),
        u in prop::array::uniform2(-10.0f64..10.0),
        v in prop::array::uniform2(-10.0f64..10.0),
    ) {
        let dt = System::Planar.dt();
        let mut fx = [0.0; 4];
        let mut fy = [0.0; 4];
        let mut fs = [0.0; 4];
        step_planar(&x, &u, dt, &mut fx);
        step_planar(&y, &v, dt, &mut fy);
        let xs: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a + b).collect();
        let us: Vec<f64> = u.iter().zip(&v).map(|(a, b)| a + b).collect();
        step_planar(&xs, &us, dt, &mut fs);
        for i in 0..4 {
            prop_assert!((fs[i] - fx[i] - fy[i]).abs() < 1e-12);
        }
    }
}

#[test]
fn corner_points_of_one_cell_occupy_exactly_that_cell() {
    let spec = GridSpec::new(3, 8, 4.0).unwrap();
    let r = spec.resolution();
    let (lo, hi) = (2.0 * r + 1e-6, 3.0 * r - 1e-6);
    let mut points = Vec::new();
    for &x in &[lo, hi] {
        for &y in &[lo, hi] {
            for &z in &[lo, hi] {
                points.push([x, y, z]);
            }
        }
    }
    let (grid, report) = ingest_points(&points, spec).unwrap();
    assert_eq!((grid.occupied_count(), report.accepted, report.dropped), (1, 8, 0));
    assert!(grid.get(&[2, 2, 2]));
    assert!(ingest_points(&[[10.0, 10.0, 10.0]], spec).is_err());
}

#[test]
fn environments_share_their_sdf_between_tasks() {
    let mut spec = GenSpec::new(System::Planar, EnvKind::Cluttered, 1, 2);
    spec.tasks_per_env = 3;
    let env = generate_env(&spec, 0).unwrap();
    assert!(Arc::ptr_eq(&env.task(0).sdf, &env.task(2).sdf));
}
