use super::*;
use crate::convex_sets::ConvexSet;
use crate::model::ScalarInstance;
use crate::oracles::{solve_discrete_riccati, solve_riccati};

fn config(paths: usize) -> PicardConfig {
    PicardConfig {
        paths,
        tol_u: 1e-6,
        ..Default::default()
    }
}

fn bank(model: &Model, paths: usize, seed: u64) -> NoiseBank {
    NoiseBank::new(seed, paths, model.grid()).unwrap()
}

fn zeros(model: &Model) -> MeanPath {
    MeanPath::zeros(model.n(), model.grid().nodes())
}

#[test]
fn frozen_state_without_dynamics() {
    let model = ScalarInstance {
        b_ctrl: 0.0,
        x0: 0.3,
        steps: 10,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let noise = bank(&model, 50, 1);
    let u = vec![1.0; 10 * 50];
    let ens = simulate_forward(&model, &zeros(&model), Policy::Paths(&u), &noise).unwrap();
    assert!(ens.x.iter().all(|&v| v == 0.3));
}

#[test]
fn constant_drift_reaches_one() {
    let model = ScalarInstance {
        b_ctrl: 0.0,
        drift: 1.0,
        steps: 64,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let noise = bank(&model, 4, 1);
    let u = vec![0.0; 64 * 4];
    let ens = simulate_forward(&model, &zeros(&model), Policy::Paths(&u), &noise).unwrap();
    for j in 0..4 {
        assert_eq!(ens.state(64, j)[0], 1.0);
    }
}

#[test]
fn brownian_terminal_variance() {
    let model = ScalarInstance {
        b_ctrl: 0.0,
        sigma: 1.0,
        steps: 50,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let paths = 20_000;
    let noise = bank(&model, paths, 5);
    let u = vec![0.0; 50 * paths];
    let ens = simulate_forward(&model, &zeros(&model), Policy::Paths(&u), &noise).unwrap();
    let xt = ens.node_states(50);
    let mean = xt.iter().sum::<f64>() / paths as f64;
    let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (paths - 1) as f64;
    assert!((var - 1.0).abs() <= 3.0 * (2.0 / paths as f64).sqrt());
}

#[test]
fn unstable_dynamics_report_step_and_path() {
    let model = ScalarInstance {
        a: 1e300,
        x0: 1.0,
        steps: 10,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let noise = bank(&model, 3, 1);
    let u = vec![0.0; 30];
    let err = simulate_forward(&model, &zeros(&model), Policy::Paths(&u), &noise).unwrap_err();
    assert!(matches!(err, Error::NonFiniteState { step: 2, path: 0 }));
}

#[test]
fn zero_costs_give_zero_adjoint() {
    let model = ScalarInstance {
        q: 0.0,
        sigma: 0.4,
        steps: 20,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let noise = bank(&model, 500, 2);
    let u = vec![0.2; 20 * 500];
    let ens = simulate_forward(&model, &zeros(&model), Policy::Paths(&u), &noise).unwrap();
    let basis = MonomialBasis::new(1, 3).unwrap();
    let back = backward_pass(&model, &zeros(&model), &ens, &noise, &basis).unwrap();
    assert!(back.p.iter().all(|&v| v == 0.0));
    assert!(back.q.iter().all(|&v| v == 0.0));
}

#[test]
fn deterministic_terminal_penalty_propagates_unchanged() {
    let model = ScalarInstance {
        q: 0.0,
        g: 1.0,
        x0: 0.5,
        steps: 20,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let noise = bank(&model, 8, 2);
    let u = vec![0.3; 20 * 8];
    let z = MeanPath::constant(&[0.1], 21);
    let ens = simulate_forward(&model, &z, Policy::Paths(&u), &noise).unwrap();
    let basis = MonomialBasis::new(1, 3).unwrap();
    let back = backward_pass(&model, &z, &ens, &noise, &basis).unwrap();
    let target = -(ens.state(20, 0)[0] - 0.1);
    for v in &back.p {
        assert!((v - target).abs() < 1e-12);
    }
    assert!(back.q.iter().all(|v| v.abs() < 1e-10));
}

fn tanh_instance(sigma: f64) -> Model {
    ScalarInstance {
        sigma,
        x0: 1.0,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap()
}

#[test]
fn regression_adjoint_matches_riccati() {
    let model = tanh_instance(0.5);
    let z = zeros(&model);
    let sol = solve_riccati(&model, &z).unwrap();
    let paths = 20_000;
    let noise = bank(&model, paths, 7);
    let policy = |k: usize, x: &[f64], out: &mut [f64]| {
        out.copy_from_slice(&sol.control(k, x));
        Ok(())
    };
    let ens = simulate_forward(&model, &z, Policy::Feedback(&policy), &noise).unwrap();
    let basis = MonomialBasis::new(1, 3).unwrap();
    let back = backward_pass(&model, &z, &ens, &noise, &basis).unwrap();
    for k in [0, 25, 50, 75, 99] {
        let mut err = 0.0;
        let mut scale = 0.0;
        for j in 0..paths {
            let exact = sol.adjoint(k, ens.state(k, j))[0];
            err += (back.p[k * paths + j] - exact).abs();
            scale += exact.abs();
        }
        let (err, scale) = (err / paths as f64, scale / paths as f64);
        assert!(err <= 2e-2 * (1.0 + scale), "node {k}: {err}");
    }
}

#[test]
fn null_costs_converge_in_one_iteration() {
    let model = ScalarInstance {
        q: 0.0,
        sigma: 0.3,
        steps: 20,
        ..Default::default()
    }
    .model(ConvexSet::interval(0.2, 1.0).unwrap())
    .unwrap();
    let noise = bank(&model, 200, 3);
    let sol = picard_solve_frozen(&model, &zeros(&model), &config(200), &noise).unwrap();
    assert_eq!(sol.log, vec![0.0]);
    assert!(sol.converged);
    assert!(sol.ensemble.u.iter().all(|&v| v == 0.2));
}

#[test]
fn singleton_control_is_fixed() {
    let model = ScalarInstance {
        sigma: 0.3,
        g: 1.0,
        steps: 20,
        ..Default::default()
    }
    .model(ConvexSet::singleton(vec![0.7]).unwrap())
    .unwrap();
    let noise = bank(&model, 200, 3);
    let sol = picard_solve_frozen(&model, &zeros(&model), &config(200), &noise).unwrap();
    assert_eq!(sol.iterations(), 1);
    assert!(sol.ensemble.u.iter().all(|&v| v == 0.7));
}

/// `(E Σ_k |u − u_ref|² dt / E Σ_k |u_ref|² dt)^{1/2}` on the ensemble.
fn control_relative_error(model: &Model, sol: &FbsdeSolution, reference: &crate::oracles::RiccatiSolution) -> f64 {
    let paths = sol.ensemble.paths;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..model.grid().steps() {
        for j in 0..paths {
            let r = reference.control(k, sol.ensemble.state(k, j))[0];
            num += (sol.ensemble.control(k, j)[0] - r).powi(2);
            den += r * r;
        }
    }
    (num / den).sqrt()
}

#[test]
fn unconstrained_picard_matches_riccati_feedback() {
    let model = tanh_instance(0.5);
    let z = zeros(&model);
    let noise = bank(&model, 20_000, 11);
    let sol = picard_solve_frozen(&model, &z, &config(20_000), &noise).unwrap();
    let exact = solve_discrete_riccati(&model, &z).unwrap();
    let err = control_relative_error(&model, &sol, &exact);
    assert!(err <= 0.02, "relative control error {err}");
    let cont = solve_riccati(&model, &z).unwrap();
    assert!(control_relative_error(&model, &sol, &cont) <= 0.02);
}

#[test]
fn repeated_solves_are_bit_identical() {
    let model = ScalarInstance {
        sigma: 0.5,
        f: 0.5,
        g: 0.5,
        steps: 30,
        ..Default::default()
    }
    .model(ConvexSet::interval(0.0, 0.5).unwrap())
    .unwrap();
    let z = MeanPath::constant(&[0.2], 31);
    let noise = bank(&model, 3000, 21);
    let a = picard_solve_frozen(&model, &z, &config(3000), &noise).unwrap();
    let b = picard_solve_frozen(&model, &z, &config(3000), &NoiseBank::new(21, 3000, model.grid()).unwrap()).unwrap();
    assert_eq!(a, b);
}

fn boxed_instance() -> Model {
    ScalarInstance {
        sigma: 0.5,
        g: 0.5,
        x0: -0.5,
        steps: 40,
        ..Default::default()
    }
    .model(ConvexSet::interval(0.0, 0.5).unwrap())
    .unwrap()
}

#[test]
fn terminal_condition_and_feasibility_hold() {
    let model = boxed_instance();
    let z = MeanPath::constant(&[0.1], 41);
    let noise = bank(&model, 2000, 4);
    let sol = picard_solve_frozen(&model, &z, &config(2000), &noise).unwrap();
    let paths = 2000;
    for j in 0..paths {
        let xt = sol.ensemble.state(40, j)[0];
        assert_eq!(sol.backward.p[40 * paths + j] + 0.5 * (xt - 0.1), 0.0);
    }
    assert!(sol.ensemble.u.iter().all(|&v| (0.0..=0.5).contains(&v)));
    assert!(sol.log.last().copied().unwrap() <= 1e-6);
    // Some controls should be on each side of the box for this test to bite.
    assert!(sol.ensemble.u.iter().any(|&v| v == 0.0));
    assert!(sol.ensemble.u.iter().any(|&v| v > 0.0 && v < 0.5));
}

#[test]
fn different_initial_guesses_reach_the_same_solution() {
    let model = boxed_instance();
    let z = MeanPath::constant(&[0.1], 41);
    let paths = 2000;
    let noise = bank(&model, paths, 4);
    let cfg = config(paths);
    let a = picard_solve_frozen(&model, &z, &cfg, &noise).unwrap();
    let init: Vec<f64> = (0..40 * paths).map(|i| 0.5 * ((i * 7919) % 101) as f64 / 100.0).collect();
    let b = picard_solve_from(&model, &z, &cfg, &noise, Some(&init)).unwrap();
    let diff: f64 = a.ensemble.u.iter().zip(&b.ensemble.u).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / paths as f64
        * model.grid().dt();
    assert!(diff.sqrt() <= 2.0 * cfg.tol_u, "{}", diff.sqrt());
    let scale = a.ensemble.u.iter().map(|v| v * v).sum::<f64>() / paths as f64 * model.grid().dt();
    assert!(monotonicity_diagnostic(&model, &a, &b).unwrap() >= -1e-3 * scale);
    assert_eq!(monotonicity_diagnostic(&model, &a, &a).unwrap(), 0.0);
}

#[test]
fn monotonicity_is_nonnegative_across_mean_paths() {
    let model = boxed_instance();
    let paths = 2000;
    let noise = bank(&model, paths, 8);
    let a = picard_solve_frozen(&model, &MeanPath::constant(&[0.4], 41), &config(paths), &noise).unwrap();
    let b = picard_solve_frozen(&model, &MeanPath::constant(&[-0.4], 41), &config(paths), &noise).unwrap();
    assert!(monotonicity_diagnostic(&model, &a, &b).unwrap() >= 0.0);
    let other = bank(&model, paths, 9);
    let c = picard_solve_frozen(&model, &MeanPath::constant(&[0.4], 41), &config(paths), &other).unwrap();
    assert!(matches!(monotonicity_diagnostic(&model, &a, &c), Err(Error::MismatchedNoise)));
}

#[test]
fn feedback_reproduces_in_sample_controls() {
    let model = boxed_instance();
    let z = MeanPath::constant(&[0.1], 41);
    let paths = 2000;
    let noise = bank(&model, paths, 4);
    let sol = picard_solve_frozen(&model, &z, &config(paths), &noise).unwrap();
    // The stored controls are φ of the regression adjoint of the previous
    // iterate, so they agree with the feedback law up to the Picard tolerance.
    let mut out = [0.0];
    let mut worst = 0.0f64;
    for k in 0..40 {
        for j in (0..paths).step_by(97) {
            sol.feedback_control(&model, k, sol.ensemble.state(k, j), &mut out).unwrap();
            worst = worst.max((out[0] - sol.ensemble.control(k, j)[0]).abs());
        }
    }
    assert!(worst < 1e-4, "{worst}");
    let (cost, se) = sol.feedback_cost(&model, &bank(&model, paths, 99)).unwrap();
    let (in_sample, _) = sol.ensemble.limit_cost(&model, &z);
    assert!((cost - in_sample).abs() <= 5.0 * se + 1e-3);
}

#[test]
fn halving_the_step_halves_the_cost_change() {
    let cost = |steps: usize| {
        let model = ScalarInstance {
            x0: 1.0,
            steps,
            ..Default::default()
        }
        .model(ConvexSet::full(1))
        .unwrap();
        let noise = bank(&model, 16, 1);
        let z = zeros(&model);
        let sol = picard_solve_frozen(&model, &z, &config(16), &noise).unwrap();
        sol.ensemble.limit_cost(&model, &z).0
    };
    let (c1, c2, c3) = (cost(50), cost(100), cost(200));
    let ratio = (c2 - c3) / (c1 - c2);
    assert!((0.3..=0.7).contains(&ratio), "ratio {ratio}");
}

#[test]
fn config_validation() {
    assert!(PicardConfig::default().validate().is_ok());
    for bad in [
        PicardConfig { theta: 0.0, ..Default::default() },
        PicardConfig { theta: 1.5, ..Default::default() },
        PicardConfig { tol_u: 0.0, ..Default::default() },
        PicardConfig { basis_degree: 0, ..Default::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}
