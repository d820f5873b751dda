use super::*;
use crate::convex_sets::ConvexSet;
use crate::fbsde::{NoiseBank, PicardConfig};
use crate::mean_field::{fixed_point_solve, FixedPointConfig};
use crate::model::ScalarInstance;

fn solved(instance: ScalarInstance, gamma: ConvexSet, paths: usize) -> (Model, MeanPath, FbsdeSolution) {
    let model = instance.model(gamma).unwrap();
    let inner = PicardConfig {
        paths,
        ..Default::default()
    };
    let config = FixedPointConfig::for_model(&model, inner);
    let noise = NoiseBank::new(1, paths, model.grid()).unwrap();
    let (z, sol, _) = fixed_point_solve(&model, &config, &noise).unwrap();
    (model, z, sol)
}

fn default_instance(f: f64) -> ScalarInstance {
    ScalarInstance {
        f,
        sigma: 0.5,
        g: 0.5,
        steps: 50,
        ..Default::default()
    }
}

fn boxed() -> ConvexSet {
    ConvexSet::interval(0.0, 0.5).unwrap()
}

#[test]
fn without_interaction_coupled_equals_limit() {
    let (model, z, sol) = solved(default_instance(0.0), boxed(), 2000);
    for agents in [1, 7] {
        let run = simulate_population(&model, &z, &sol, agents, 3, 5).unwrap();
        for rep in &run.reps {
            assert_eq!(rep.coupled, rep.limit);
            assert_eq!(coupling_gap(rep), 0.0);
        }
    }
}

#[test]
fn brownian_average_has_the_right_law() {
    let instance = ScalarInstance {
        sigma: 1.0,
        x0: 0.3,
        steps: 20,
        ..Default::default()
    };
    let (model, z, sol) = solved(instance, ConvexSet::singleton(vec![0.0]).unwrap(), 200);
    let reps = 2000;
    let agents = 10;
    let run = simulate_population(&model, &z, &sol, agents, reps, 9).unwrap();
    let xt: Vec<f64> = run.reps.iter().map(|r| r.average_at(20)[0]).collect();
    let (mean, se) = mean_stderr(&xt);
    assert!((mean - 0.3).abs() <= 4.0 * se);
    let var = xt.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
    let target = 1.0 / agents as f64;
    assert!((var / target - 1.0).abs() <= 4.0 * (2.0 / reps as f64).sqrt());
}

/// `E max_k B_{t_k}²` on the grid by direct simulation.
fn discrete_sup_brownian(steps: usize, dt: f64, paths: usize) -> (f64, f64) {
    let mut rng = crate::rng::stream(77, 1, 2);
    let vals: Vec<f64> = (0..paths)
        .map(|_| {
            let mut b = 0.0f64;
            let mut sup = 0.0f64;
            for _ in 0..steps {
                let xi: f64 = StandardNormal.sample(&mut rng);
                b += xi * dt.sqrt();
                sup = sup.max(b * b);
            }
            sup
        })
        .collect();
    mean_stderr(&vals)
}

#[test]
fn average_gap_matches_the_brownian_closed_form() {
    let instance = ScalarInstance {
        sigma: 0.8,
        steps: 20,
        ..Default::default()
    };
    let (model, _, sol) = solved(instance, ConvexSet::singleton(vec![0.0]).unwrap(), 200);
    // The exact mean rather than its 200-path estimate.
    let z = MeanPath::zeros(1, 21);
    let ns = [4, 16, 64, 256];
    let table = rate_average_gap(&model, &z, &sol, &ns, 400, 3).unwrap();
    let (sup_b, sup_se) = discrete_sup_brownian(20, 0.05, 200_000);
    assert!(sup_b <= 4.0);
    let fit = table.fit("average_gap").unwrap();
    for &(n, value, se) in &fit.summary {
        let exact = 0.64 * sup_b / n as f64;
        let tol = 4.0 * (se * se + (0.64 * sup_se / n as f64).powi(2)).sqrt();
        assert!((value - exact).abs() <= tol, "N = {n}: {value} vs {exact}");
    }
    let slope = fit.fit.unwrap().slope;
    assert!((slope + 1.0).abs() < 0.1, "{slope}");
}

#[test]
fn doubling_replications_shrinks_the_standard_error() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let ns = [10, 20, 40, 80];
    let a = rate_average_gap(&model, &z, &sol, &ns, 200, 1).unwrap();
    let b = rate_average_gap(&model, &z, &sol, &ns, 400, 1).unwrap();
    let (sa, sb) = (&a.fit("average_gap").unwrap().summary, &b.fit("average_gap").unwrap().summary);
    let ratio: f64 = sa.iter().zip(sb.iter()).map(|(x, y)| y.2 / x.2).sum::<f64>() / 4.0;
    assert!((0.6..=0.85).contains(&ratio), "{ratio}");
}

#[test]
fn coupling_gap_falls_tenfold_over_a_decade() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let table = rate_coupling_gap(&model, &z, &sol, &[10, 20, 50, 100], 128, 4).unwrap();
    let s = &table.fit("coupling_gap").unwrap().summary;
    let ratio = s[3].1 / s[0].1;
    assert!((0.05..=0.2).contains(&ratio), "{ratio}");
}

#[test]
fn costless_problems_have_no_cost_gap() {
    let instance = ScalarInstance {
        q: 0.0,
        sigma: 0.5,
        steps: 20,
        ..Default::default()
    };
    let (model, z, sol) = solved(instance, ConvexSet::interval(0.1, 0.5).unwrap(), 500);
    let table = rate_cost_gap(&model, &z, &sol, &[2, 4, 8, 16], 8, 2).unwrap();
    assert!(table.rows.iter().all(|r| r.value.abs() < 1e-15));
}

#[test]
fn averaged_dynamics_match_the_mean_of_agents() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let run = simulate_population(&model, &z, &sol, 37, 2, 8).unwrap();
    for rep in &run.reps {
        let direct = rep.averaged_recursion(&model);
        for (a, b) in direct.iter().zip(&rep.average) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        for k in [0, 10, 50] {
            let mean = (0..37).map(|i| rep.coupled_state(k, i)[0]).sum::<f64>() / 37.0;
            assert!((mean - rep.average_at(k)[0]).abs() < 1e-14);
        }
    }
}

#[test]
fn agents_are_exchangeable() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let run = simulate_population(&model, &z, &sol, 20, 400, 12).unwrap();
    let diffs: Vec<f64> = run
        .reps
        .iter()
        .map(|r| r.coupled_cost(&model, 0).unwrap() - r.coupled_cost(&model, 19).unwrap())
        .collect();
    let (m, se) = mean_stderr(&diffs);
    assert!(m.abs() <= 3.0 * se, "{m} vs {se}");
}

#[test]
fn permuting_noise_permutes_agents() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let agents = 12;
    let dw = population_noise(&model, agents, 3, 0);
    let perm: Vec<usize> = (0..agents).map(|i| (i * 5 + 3) % agents).collect();
    let mut permuted = vec![0.0; dw.len()];
    for k in 0..50 {
        for i in 0..agents {
            permuted[k * agents + i] = dw[k * agents + perm[i]];
        }
    }
    let a = simulate_replication(&model, &z, &sol, agents, 0, dw, None).unwrap();
    let b = simulate_replication(&model, &z, &sol, agents, 0, permuted, None).unwrap();
    for i in 0..agents {
        let ca = a.coupled_cost(&model, perm[i]).unwrap();
        let cb = b.coupled_cost(&model, i).unwrap();
        assert!((ca - cb).abs() < 1e-12);
        assert_eq!(a.control(30, perm[i]), b.control(30, i));
    }
}

#[test]
fn equilibrium_member_reproduces_the_equilibrium_bitwise() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let eq = simulate_population(&model, &z, &sol, 25, 2, 6).unwrap();
    for r in 0..2 {
        let dev = deviation_run(&model, &z, &sol, 25, 0, &Deviation::Scaled(1.0), 6, r).unwrap();
        let e = &eq.reps[r];
        assert_eq!(dev.replication.coupled, e.coupled);
        assert_eq!(dev.replication.controls, e.controls);
        assert_eq!(dev.coupled_cost.to_bits(), e.coupled_cost(&model, 0).unwrap().to_bits());
        assert_eq!(dev.limit_cost.to_bits(), e.limit_cost(&model, &z, 0).unwrap().to_bits());
    }
}

#[test]
fn deviations_leave_the_others_controls_alone() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let eq = simulate_population(&model, &z, &sol, 10, 1, 6).unwrap();
    for d in DeviationFamily::standard(1).members() {
        let dev = deviation_run(&model, &z, &sol, 10, 3, &d, 6, 0).unwrap();
        for k in 0..50 {
            for i in (0..10).filter(|&i| i != 3) {
                assert_eq!(dev.replication.control(k, i), eq.reps[0].control(k, i));
            }
            assert!((0.0..=0.5).contains(&dev.replication.control(k, 3)[0]));
        }
        assert!(dev.control_energy.is_finite() && dev.control_energy <= 0.25);
    }
}

#[test]
fn without_interaction_the_deviation_limit_is_exact() {
    let (model, z, sol) = solved(default_instance(0.0), boxed(), 2000);
    for d in [Deviation::Scaled(0.5), Deviation::TimeReversed, Deviation::Constant(vec![0.3])] {
        let dev = deviation_run(&model, &z, &sol, 15, 2, &d, 1, 0).unwrap();
        assert_eq!(dev.limit_gap, 0.0);
    }
}

#[test]
fn nonfinite_deviation_is_rejected() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 500);
    let err = deviation_run(&model, &z, &sol, 4, 0, &Deviation::Constant(vec![f64::NAN]), 1, 0).unwrap_err();
    assert!(matches!(err, Error::InfeasibleDeviation { step: 0, .. }));
}

#[test]
fn coupled_cost_examples() {
    let model = ScalarInstance {
        steps: 1000,
        ..Default::default()
    }
    .model(ConvexSet::full(1))
    .unwrap();
    let steps = 1000;
    // Two deterministic agents at 1 and 0 with no control.
    let mut coupled = Vec::new();
    for _ in 0..=steps {
        coupled.extend_from_slice(&[1.0, 0.0]);
    }
    let rep = Replication {
        agents: 2,
        rep: 0,
        n: 1,
        m: 1,
        steps,
        dw: vec![0.0; 2 * steps],
        limit: coupled.clone(),
        coupled,
        controls: vec![0.0; 2 * steps],
        average: vec![0.5; steps + 1],
        deviation: None,
    };
    assert!((rep.coupled_cost(&model, 0).unwrap() - 0.125).abs() < 1e-12);
    assert!(matches!(rep.coupled_cost(&model, 2), Err(Error::IndexOutOfRange { index: 2, len: 2 })));
    // A single agent only pays for its control.
    let single = Replication {
        agents: 1,
        rep: 0,
        n: 1,
        m: 1,
        steps,
        dw: vec![0.0; steps],
        coupled: (0..=steps).map(|k| k as f64).collect(),
        limit: vec![0.0; steps + 1],
        controls: vec![2.0; steps],
        average: (0..=steps).map(|k| k as f64).collect(),
        deviation: None,
    };
    assert!((single.coupled_cost(&model, 0).unwrap() - 2.0).abs() < 1e-12);
}

#[test]
fn nash_table_contains_the_equilibrium_anchor() {
    let (model, z, sol) = solved(default_instance(0.5), boxed(), 2000);
    let family = DeviationFamily::standard(1);
    let table = nash_gap(&model, &z, &sol, &[5, 10, 20, 40], &family, 8, 2).unwrap();
    let anchor: Vec<&NashRow> = table.rows.iter().filter(|r| r.deviation_id == "scaled[1]").collect();
    assert_eq!(anchor.len(), 4 * 8);
    assert!(anchor.iter().all(|r| r.gap == 0.0));
    assert!(table.epsilon.iter().all(|e| e.1 >= 0.0));
    assert!(table.c_bound.is_finite());
    let bad = DeviationFamily {
        scales: vec![0.5],
        ..family
    };
    assert!(nash_gap(&model, &z, &sol, &[5, 10, 20, 40], &bad, 2, 2).is_err());
    assert!(nash_gap(&model, &z, &sol, &[5, 10, 20], &DeviationFamily::standard(1), 2, 2).is_err());
}

#[test]
fn noise_streams_are_reproducible() {
    let model = default_instance(0.5).model(boxed()).unwrap();
    assert_eq!(population_noise(&model, 10, 1, 2), population_noise(&model, 10, 1, 2));
    assert_ne!(population_noise(&model, 10, 1, 2), population_noise(&model, 10, 1, 3));
}
