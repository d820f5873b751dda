use super::*;
use crate::convex_sets::ConvexSet;
use crate::model::ScalarInstance;
use crate::oracles::riccati_fixed_point;

fn solve(model: &Model, paths: usize, seed: u64) -> (MeanPath, FbsdeSolution, FixedPointDiagnostics) {
    let inner = PicardConfig {
        paths,
        ..Default::default()
    };
    let config = FixedPointConfig::for_model(model, inner);
    let noise = NoiseBank::new(seed, paths, model.grid()).unwrap();
    fixed_point_solve(model, &config, &noise).unwrap()
}

fn singleton_exponential_error(steps: usize) -> f64 {
    let model = ScalarInstance {
        a: -1.0,
        f: 0.3,
        x0: 1.0,
        steps,
        ..Default::default()
    }
    .model(ConvexSet::singleton(vec![0.0]).unwrap())
    .unwrap();
    let (z, sol, diag) = solve(&model, 64, 1);
    assert_eq!(z.at(0), &[1.0]);
    assert!(diag.consistency_residual < 1e-12);
    assert!(mean_ode_check(&model, &z, &sol) < 1e-12);
    let grid = model.grid();
    (0..grid.nodes())
        .map(|k| (z.at(k)[0] - (-0.7 * grid.t(k)).exp()).abs())
        .fold(0.0, f64::max)
}

#[test]
fn fixed_control_gives_the_exponential_mean() {
    let e1 = singleton_exponential_error(100);
    let e2 = singleton_exponential_error(200);
    // Euler error of x0·e^{at}: first order with constant ≤ a²·T·max|x|/2.
    assert!(e1 <= 0.5 * 0.49 * 0.01, "{e1}");
    let ratio = e2 / e1;
    assert!((0.45..=0.55).contains(&ratio), "{ratio}");
}

#[test]
fn unconstrained_fixed_point_matches_riccati() {
    let model = ScalarInstance {
        f: 0.5,
        sigma: 0.5,
        x0: 1.0,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let (z, _, diag) = solve(&model, 20_000, 3);
    let (exact, _) = riccati_fixed_point(&model, 1e-12, 500, true).unwrap();
    let rel = z.max_abs_diff(&exact) / exact.max_abs();
    assert!(rel <= 0.02, "{rel}");
    assert!(diag.history.last().copied().unwrap() <= 1e-4 * 2.0);
}

#[test]
fn without_interaction_the_unconstrained_mean_follows_the_drift() {
    // At the unconstrained fixed point the optimal control is −K(x − z),
    // so E u = 0 and z solves ż = A z + b once F = 0.
    let model = ScalarInstance {
        a: -0.5,
        drift: 0.4,
        sigma: 0.5,
        x0: 1.0,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let (z, sol, diag) = solve(&model, 10_000, 5);
    let target = initial_mean_path(&model).unwrap();
    let bound = diag.consistency_residual + 5.0 * diag.mean_stderr.iter().fold(0.0, |a: f64, b| a.max(*b));
    assert!(z.max_abs_diff(&target) <= bound, "{} vs {bound}", z.max_abs_diff(&target));
    assert!(mean_ode_check(&model, &z, &sol) <= bound);
}

fn boxed_default() -> Model {
    ScalarInstance {
        f: 0.5,
        sigma: 0.5,
        g: 0.5,
        ..Default::default()
    }
    .model(ConvexSet::interval(0.0, 0.5).unwrap())
    .unwrap()
}

#[test]
fn z_star_is_reproduced_by_one_more_solve() {
    let model = boxed_default();
    let (z, sol, diag) = solve(&model, 5000, 7);
    let tol = 1e-4;
    let se = diag.mean_stderr.iter().fold(0.0, |a: f64, b| a.max(*b));
    assert!(diag.consistency_residual <= tol / 0.5 + 3.0 * se);
    assert_eq!(z.at(0), &[0.0]);
    // Zero-mean adjoint under consistency. The regression keeps sample
    // means exactly, so mean(p_k) = −G·d_K − Σ_{l≥k} Q·d_l·dt with
    // d = mean(x) − z*, bounded by (G + Q·T)·residual.
    let paths = sol.ensemble.paths;
    let drift_bound = (0.5 + 1.0) * diag.consistency_residual;
    let (_, se_terminal) = mean_stderr(&sol.backward.p[100 * paths..]);
    for k in (0..=100).step_by(10) {
        let col = &sol.backward.p[k * paths..(k + 1) * paths];
        let (m, se) = mean_stderr(col);
        assert!(m.abs() <= 5.0 * se.max(se_terminal) + drift_bound * (1.0 + 1e-9), "node {k}: {m} vs {se}");
        assert!(m.abs() <= drift_bound * (1.0 + 1e-9) + 1e-12, "node {k}: {m} vs {drift_bound}");
    }
    let residual = mean_ode_check(&model, &z, &sol);
    let u_se = (0..100)
        .map(|k| mean_stderr(sol.ensemble.node_controls(k)).1)
        .fold(0.0, f64::max);
    assert!(residual <= 3.0 * (tol / 0.5 + 5.0 * u_se), "{residual}");
}

#[test]
fn independent_seeds_agree_within_monte_carlo_error() {
    let model = boxed_default();
    let (za, _, da) = solve(&model, 5000, 11);
    let (zb, _, db) = solve(&model, 5000, 12);
    for k in 0..za.nodes() {
        let se = (da.mean_stderr[k].powi(2) + db.mean_stderr[k].powi(2)).sqrt();
        assert!((za.at(k)[0] - zb.at(k)[0]).abs() <= 3.0 * se + 2e-4, "node {k}");
    }
}

#[test]
fn costless_control_gives_a_deterministic_mean() {
    let model = ScalarInstance {
        q: 0.0,
        f: 0.5,
        sigma: 0.5,
        x0: 0.5,
        ..Default::default()
    }
    .model(ConvexSet::interval(0.2, 1.0).unwrap())
    .unwrap();
    let (z, sol, diag) = solve(&model, 5000, 13);
    assert!(sol.ensemble.u.iter().all(|&u| u == 0.2));
    let se = diag.mean_stderr.iter().fold(0.0, |a: f64, b| a.max(*b));
    // ż = F z + 0.2 from x0 = 0.5, Euler on the grid.
    let exact = initial_mean_path(&model).unwrap();
    assert!(mean_ode_check(&model, &z, &sol) <= 1e-4 * 1.5 / 0.5 + 5.0 * se);
    assert!(z.max_abs_diff(&exact) <= 1e-4 * 1.5 / 0.5 + 5.0 * se);
}

#[test]
fn translating_the_drift_only_shifts_the_mean() {
    let solve_b = |drift: f64| {
        let model = ScalarInstance {
            f: 0.5,
            sigma: 0.5,
            drift,
            ..Default::default()
        }
        .model(ConvexSet::full(1))
        .unwrap();
        solve(&model, 5000, 17)
    };
    let (za, a, _) = solve_b(0.0);
    let (zb, b, _) = solve_b(1.0);
    assert!((zb.at(100)[0] - za.at(100)[0]).abs() > 0.5);
    let paths = 5000;
    for k in [25, 50, 100] {
        let centered = |sol: &FbsdeSolution, z: &MeanPath| -> Vec<f64> {
            sol.ensemble.node_states(k).iter().map(|x| x - z.at(k)[0]).collect()
        };
        let (ca, cb) = (centered(&a, &za), centered(&b, &zb));
        let var = |c: &[f64]| c.iter().map(|v| v * v).sum::<f64>() / paths as f64;
        assert!((var(&ca) / var(&cb) - 1.0).abs() < 1e-2, "node {k}");
        let (ma, sa) = mean_stderr(&ca);
        let (mb, _) = mean_stderr(&cb);
        assert!((ma - mb).abs() <= 3.0 * sa + 1e-3);
    }
}

#[test]
fn config_validation() {
    let model = boxed_default();
    let mut c = FixedPointConfig::for_model(&model, PicardConfig::default());
    assert!(c.validate().is_ok());
    assert_eq!(c.tol_z, 1e-4);
    c.rho = 0.0;
    assert!(c.validate().is_err());
}

#[test]
fn outer_failure_keeps_the_history() {
    let model = boxed_default();
    let inner = PicardConfig {
        paths: 200,
        ..Default::default()
    };
    let config = FixedPointConfig {
        max_outer: 2,
        ..FixedPointConfig::for_model(&model, inner)
    };
    let noise = NoiseBank::new(1, 200, model.grid()).unwrap();
    match fixed_point_solve(&model, &config, &noise) {
        Err(Error::OuterNotConverged { history }) => assert_eq!(history.len(), 2),
        other => panic!("unexpected {other:?}"),
    }
    let tight = FixedPointConfig {
        inner: PicardConfig { max_iter: 1, ..inner },
        ..config
    };
    assert!(matches!(
        fixed_point_solve(&model, &tight, &noise),
        Err(Error::Inner { outer: 0, .. })
    ));
}
