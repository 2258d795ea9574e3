use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rtopt::constraints::{ConstraintSet, ConstraintSpec};
use rtopt::lintraj::{linearize_dynamics, stacked_response, PolicyMatrix};
use rtopt::models::DynamicsModel;
use rtopt::monte::{linearization_errors, run_monte_carlo, sample_disturbances, simulate_closed_loop, Policy};
use rtopt::uncertainty::UncertaintySet;

fn random_policy(rng: &mut ChaCha8Rng, model: &DynamicsModel, x0: &DVector<f64>, t: usize, u_scale: f64, k_scale: f64) -> Policy {
    let (n_x, n_u) = (model.n_x(), model.n_u());
    let u_bar = (0..t).map(|_| DVector::from_fn(n_u, |_, _| rng.gen_range(-u_scale..u_scale))).collect();
    let gains = PolicyMatrix { blocks: (0..t).map(|_| DMatrix::from_fn(n_u, n_x, |_, _| rng.gen_range(-k_scale..k_scale))).collect() };
    Policy::new(model, x0, u_bar, gains).unwrap()
}

fn random_zeta(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    /// The closed loop on a linear model matches the compact-form response.
    #[test]
    fn linear_closed_loop_matches_compact_form(seed in 0u64..10_000, t in 1usize..12, dt in 0.01f64..0.5) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DynamicsModel::double_integrator(dt).unwrap();
        let x0 = random_zeta(&mut rng, 4, 1.0);
        let policy = random_policy(&mut rng, &model, &x0, t, 1.0, 1.0);
        let zeta = random_zeta(&mut rng, (t + 1) * 4, 0.3);
        let rec = simulate_closed_loop(&model, &policy, &zeta, &x0).unwrap();
        let blocks = linearize_dynamics(&model, &policy.nominal).unwrap();
        let resp = stacked_response(&blocks, &policy.gains, &DVector::zeros(t * 2), &zeta).unwrap();
        for k in 0..=t {
            let dev = &rec.states[k] - &policy.nominal.states[k];
            prop_assert!((dev - resp.rows(k * 4, 4)).amax() < 1e-10);
        }
        let errs = linearization_errors(&blocks, &policy, &rec).unwrap();
        prop_assert!(errs.iter().all(|e| e.amax() < 1e-10));
    }

    /// Zero disturbance reproduces the nominal trajectory exactly; otherwise the
    /// controller recovers the injected disturbances.
    #[test]
    fn unicycle_rollout_reconstruction(seed in 0u64..10_000, t in 1usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = DynamicsModel::unicycle(0.05).unwrap();
        let x0 = random_zeta(&mut rng, 3, 1.0);
        let policy = random_policy(&mut rng, &model, &x0, t, 5.0, 2.0);
        let rec = simulate_closed_loop(&model, &policy, &DVector::zeros((t + 1) * 3), &x0).unwrap();
        prop_assert_eq!(&rec.states, &policy.nominal.states);
        let zeta = random_zeta(&mut rng, (t + 1) * 3, 0.1);
        let rec = simulate_closed_loop(&model, &policy, &zeta, &x0).unwrap();
        for (k, d) in rec.reconstructed.iter().enumerate() {
            prop_assert!((d - zeta.rows(k * 3, 3)).amax() < 1e-12);
        }
    }

    /// Every sampled disturbance respects the analytic support bound.
    #[test]
    fn support_bounds_every_sample(seed in 0u64..10_000, n_z in 1usize..6, tau in 0.001f64..2.0, boundary in any::<bool>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dim = n_z + rng.gen_range(0..6);
        let gamma = UncertaintySet::random_gamma(&mut rng, dim, n_z);
        let set = UncertaintySet::new(gamma, DMatrix::identity(n_z, n_z), tau).unwrap();
        let c = random_zeta(&mut rng, dim, 1.0);
        let bound = set.support(&c).unwrap();
        for z in set.sample(&mut rng, 200, boundary) {
            prop_assert!(c.dot(&z) <= bound * (1.0 + 1e-12) + 1e-15);
        }
    }

    /// Sample streams do not depend on how many samples are drawn.
    #[test]
    fn sample_streams_are_prefix_stable(seed in 0u64..1_000, n in 1usize..40) {
        let gamma = UncertaintySet::random_gamma(&mut ChaCha8Rng::seed_from_u64(1), 12, 3);
        let set = UncertaintySet::new(gamma, DMatrix::identity(3, 3), 0.1).unwrap();
        let short = sample_disturbances(&set, n, seed, 0, false);
        let long = sample_disturbances(&set, n + 7, seed, 0, false);
        prop_assert_eq!(&short[..], &long[..n]);
    }
}

#[test]
fn parallel_and_serial_monte_carlo_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let model = DynamicsModel::unicycle(0.05).unwrap();
    let t = 20;
    let x0 = DVector::zeros(3);
    let policy = random_policy(&mut rng, &model, &x0, t, 3.0, 0.5);
    let specs = vec![
        ConstraintSpec::CircularObstacle { center: [0.5, 0.0], radius: 0.3, timesteps: None },
        ConstraintSpec::TerminalBox { components: vec![0, 1], lower: vec![-1.0, -1.0], upper: vec![1.0, 1.0] },
    ];
    let cs = ConstraintSet::from_specs(&specs, 3, 2, t, None).unwrap();
    let gamma = UncertaintySet::random_gamma(&mut rng, (t + 1) * 3, 3);
    let set = UncertaintySet::new(gamma, DMatrix::identity(3, 3), 0.01).unwrap();
    let zetas = sample_disturbances(&set, 500, 9, 0, false);
    let (rp, par) = run_monte_carlo(&model, &policy, &cs, &x0, &zetas, true).unwrap();
    let (rs, ser) = run_monte_carlo(&model, &policy, &cs, &x0, &zetas, false).unwrap();
    assert_eq!(par, ser);
    assert!(rp.iter().zip(&rs).all(|(a, b)| a.states == b.states));
}
