use mfglab::fbsde::{NoiseBank, PicardConfig};
use mfglab::mean_field::{fixed_point_solve, FixedPointConfig};
use mfglab::model::{ScalarInstance, FEASIBILITY_TOL};
use mfglab::oracles::{solve_dp_1d, Lattice};
use mfglab::population::{nash_gap, population_rates, simulate_population, DeviationFamily};
use mfglab::ConvexSet;
use proptest::prelude::*;

fn small_solve(gamma: ConvexSet, f: f64, seed: u64) -> (mfglab::model::Model, mfglab::mean_field::MeanPath, mfglab::fbsde::FbsdeSolution) {
    let model = ScalarInstance {
        f,
        sigma: 0.5,
        g: 0.5,
        steps: 20,
        ..Default::default()
    }
    .model(gamma)
    .unwrap();
    let paths = 2000;
    let config = FixedPointConfig::for_model(
        &model,
        PicardConfig {
            paths,
            ..Default::default()
        },
    );
    let noise = NoiseBank::new(seed, paths, model.grid()).unwrap();
    let (z, sol, _) = fixed_point_solve(&model, &config, &noise).unwrap();
    (model, z, sol)
}

#[test]
fn solve_then_population_then_tables() {
    let (model, z, sol) = small_solve(ConvexSet::interval(0.0, 0.5).unwrap(), 0.5, 3);
    let run = simulate_population(&model, &z, &sol, 16, 4, 9).unwrap();
    assert_eq!(run.reps.len(), 4);
    let (cost, se) = run.coupled_cost(&model, 3).unwrap();
    assert!(cost > 0.0 && se.is_finite());

    let ns = [4, 8, 16, 32];
    let rates = population_rates(&model, &z, &sol, &ns, 4, 9).unwrap();
    assert_eq!(rates.rows.len(), ns.len() * 4 * 4);
    for metric in ["state_bound", "average_gap", "coupling_gap", "cost_gap"] {
        let fit = rates.fit(metric).unwrap();
        assert_eq!(fit.summary.len(), ns.len());
        assert!(fit.c_bound.is_finite());
    }

    let nash = nash_gap(&model, &z, &sol, &ns, &DeviationFamily::standard(1), 4, 9).unwrap();
    assert_eq!(nash.epsilon.len(), ns.len());
    assert!(nash.epsilon.iter().all(|e| e.1 >= 0.0));
    for row in nash.rows.iter().filter(|r| r.deviation_id == "scaled[1]") {
        assert_eq!(row.cost_dev.to_bits(), row.cost_eq.to_bits());
    }
}

#[test]
fn solver_feedback_is_no_better_than_the_dp_optimum() {
    // The DP is optimal on the frozen mean, so the solver's feedback cost
    // cannot fall below it by more than Monte Carlo and lattice error.
    let (model, z, sol) = small_solve(ConvexSet::interval(0.0, 0.5).unwrap(), 0.0, 5);
    let dp = solve_dp_1d(&model, &z, Lattice::covering(&model, &z, 401).unwrap()).unwrap();
    let v0 = dp.value_at(0, 0.0);
    let fresh = NoiseBank::new(77, 20_000, model.grid()).unwrap();
    let (j, se) = sol.feedback_cost(&model, &fresh).unwrap();
    assert!(j >= v0 - 3.0 * se - 1e-3 * v0, "{j} vs {v0}");
    assert!((j - v0).abs() / v0 <= 0.05, "{j} vs {v0}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn equilibrium_controls_stay_in_any_interval(lo in -1.0f64..0.5, width in 0.05f64..1.0, seed in 0u64..1000) {
        let gamma = ConvexSet::interval(lo, lo + width).unwrap();
        let (_, _, sol) = small_solve(gamma.clone(), 0.5, seed);
        for u in sol.ensemble.u.chunks(1) {
            prop_assert!(gamma.contains(u, FEASIBILITY_TOL));
        }
    }

    #[test]
    fn population_costs_are_nonnegative_and_reproducible(agents in 1usize..12, seed in 0u64..1000) {
        let (model, z, sol) = small_solve(ConvexSet::orthant(1), 0.5, 1);
        let a = simulate_population(&model, &z, &sol, agents, 2, seed).unwrap();
        let b = simulate_population(&model, &z, &sol, agents, 2, seed).unwrap();
        prop_assert_eq!(&a, &b);
        for rep in &a.reps {
            for i in 0..agents {
                prop_assert!(rep.coupled_cost(&model, i).unwrap() >= 0.0);
                prop_assert!(rep.limit_cost(&model, &z, i).unwrap() >= 0.0);
            }
        }
    }
}
