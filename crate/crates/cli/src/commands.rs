//! Subcommand implementations.

use std::fs;
use std::path::{Path, PathBuf};

use mfglab::fbsde::{FbsdeSolution, NoiseBank};
use mfglab::mean_field::{fixed_point_solve, FixedPointDiagnostics, MeanPath};
use mfglab::model::Model;
use mfglab::oracles::dp::control_interval;
use mfglab::oracles::{riccati_fixed_point, solve_dp_1d, Lattice, RiccatiSolution};
use mfglab::population::{nash_gap, population_rates, simulate_population, MetricFit, RateTable};
use mfglab::ConvexSet;
use serde_json::{json, Value};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::run::{f, fresh_run_dir, read_manifest, sha256_hex, u, write_csv, write_json, MANIFEST};

/// Relative tolerance of the Riccati cross-check recorded for unconstrained
/// solves.
pub const ORACLE_TOLERANCE: f64 = 0.02;

/// Stream offsets separating the solver noise from population noise.
const POPULATION_SEED: u64 = 0x706f_7075;
const NASH_SEED: u64 = 0x6e61_7368;

pub struct Context {
    pub config: ExperimentConfig,
    /// SHA-256 of the config file as read from disk.
    pub file_sha256: String,
    pub root: PathBuf,
    pub from: Option<PathBuf>,
}

impl Context {
    /// SHA-256 of the effective configuration after command-line overrides.
    pub fn config_sha256(&self) -> String {
        sha256_hex(self.config.to_json().as_bytes())
    }

    fn start(&self, command: &str) -> CliResult<PathBuf> {
        let dir = fresh_run_dir(&self.root, command)?;
        let path = dir.join("config.json");
        fs::write(&path, self.config.to_json() + "\n").map_err(CliError::io(&path))?;
        Ok(dir)
    }

    fn manifest(&self, command: &str) -> serde_json::Map<String, Value> {
        let c = &self.config;
        let mut m = serde_json::Map::new();
        m.insert("command".into(), json!(command));
        m.insert("seed".into(), json!(c.seed));
        m.insert("config_sha256".into(), json!(self.config_sha256()));
        m.insert("config_file_sha256".into(), json!(self.file_sha256));
        m.insert("n".into(), json!(c.model.n));
        m.insert("m".into(), json!(c.model.m));
        m.insert("K".into(), json!(c.model.steps));
        m.insert("T".into(), json!(c.model.horizon));
        m.insert("paths".into(), json!(c.solver.paths));
        m.insert("basis_degree".into(), json!(c.solver.basis_degree));
        m.insert("theta".into(), json!(c.solver.theta));
        m.insert("rho".into(), json!(c.solver.rho));
        m.insert("tol_u".into(), json!(c.solver.tol_u));
        m.insert("max_picard".into(), json!(c.solver.max_picard));
        m.insert("max_outer".into(), json!(c.solver.max_outer));
        m.insert("version".into(), json!(env!("CARGO_PKG_VERSION")));
        m
    }
}

pub fn validate(ctx: &Context) -> CliResult<()> {
    let spec = ctx.config.spec()?;
    let report = spec.validate(ctx.config.model.strict_h1);
    if report.is_empty() {
        println!(
            "ok: n={} m={} K={} gamma={} strict_h1={}",
            spec.n,
            spec.m,
            spec.grid.steps(),
            spec.gamma.kind(),
            ctx.config.model.strict_h1
        );
        Ok(())
    } else {
        Err(CliError::Validation(crate::config::summarize(&report)))
    }
}

type Equilibrium = (MeanPath, FbsdeSolution, FixedPointDiagnostics);

fn solve_equilibrium(ctx: &Context, model: &Model) -> CliResult<std::result::Result<Equilibrium, mfglab::Error>> {
    let config = ctx.config.fixed_point(model)?;
    let noise = NoiseBank::new(ctx.config.seed, config.inner.paths, model.grid())?;
    Ok(fixed_point_solve(model, &config, &noise))
}

fn write_mean_path(dir: &Path, model: &Model, z: &MeanPath, stderr: &[f64]) -> CliResult<()> {
    let n = z.dim();
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..n).map(|i| format!("z_{i}")));
    header.push("mean_stderr".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..z.nodes()).map(|k| {
        let mut row = vec![f(model.grid().t(k))];
        row.extend(z.at(k).iter().map(|&v| f(v)));
        row.push(f(stderr[k]));
        row
    });
    write_csv(&dir.join("z_star.csv"), &header, rows)
}

fn write_diagnostics(dir: &Path, history: &[f64], inner: &[usize]) -> CliResult<()> {
    let rows = history.iter().enumerate().map(|(i, &r)| {
        vec![
            u(i + 1),
            f(r),
            inner.get(i).map_or_else(String::new, |&v| u(v)),
        ]
    });
    write_csv(
        &dir.join("diagnostics.csv"),
        &["outer_iteration", "residual", "inner_iterations"],
        rows,
    )
}

fn write_policy(dir: &Path, sol: &FbsdeSolution) -> CliResult<()> {
    let mut rows = Vec::new();
    for (k, fit) in sol.backward.fits.iter().enumerate() {
        let mut push = |kind: &str, values: &[f64], outputs: usize| {
            for (idx, &v) in values.iter().enumerate() {
                rows.push(vec![u(k), kind.to_string(), u(idx % outputs), u(idx / outputs), f(v)]);
            }
        };
        let n = fit.center.len();
        push("center", &fit.center, n);
        push("scale", &fit.scale, n);
        push("p_coef", &fit.p_coef, n);
        push("q_coef", &fit.q_coef, n);
    }
    write_csv(&dir.join("policy.csv"), &["node", "kind", "output", "term", "value"], rows)
}

fn write_picard_log(dir: &Path, log: &[f64]) -> CliResult<()> {
    let rows = log.iter().enumerate().map(|(i, &v)| vec![u(i + 1), f(v)]);
    write_csv(&dir.join("picard_log.csv"), &["iteration", "control_change"], rows)
}

/// Relative `L²(dt × paths)` control error and relative mean-path error
/// against the Riccati feedback at the Riccati fixed point.
fn riccati_cross_check(model: &Model, z: &MeanPath, sol: &FbsdeSolution) -> CliResult<Value> {
    let free = model.with_gamma(ConvexSet::full(model.m()))?;
    let (z_ric, ric) = riccati_fixed_point(&free, 1e-12, 1000, false)?;
    let ens = &sol.ensemble;
    let (mut num, mut den) = (0.0, 0.0);
    for k in 0..ens.steps {
        for j in 0..ens.paths {
            let reference = ric.control(k, ens.state(k, j));
            for (a, b) in ens.control(k, j).iter().zip(&reference) {
                num += (a - b).powi(2);
                den += b * b;
            }
        }
    }
    let control = if den > 0.0 { (num / den).sqrt() } else { num.sqrt() };
    let scale = z_ric.max_abs();
    let mean = if scale > 0.0 { z.max_abs_diff(&z_ric) / scale } else { z.max_abs_diff(&z_ric) };
    let pass = control <= ORACLE_TOLERANCE && mean <= ORACLE_TOLERANCE;
    Ok(json!({
        "oracle": "riccati",
        "control_relative_l2": control,
        "mean_path_relative": mean,
        "tolerance": ORACLE_TOLERANCE,
        "status": if pass { "pass" } else { "fail" },
    }))
}

fn is_full(set: &ConvexSet) -> bool {
    set.kind() == "full"
}

pub fn solve(ctx: &Context) -> CliResult<PathBuf> {
    let model = ctx.config.model()?;
    let dir = ctx.start("solve")?;
    let mut manifest = ctx.manifest("solve");
    match solve_equilibrium(ctx, &model)? {
        Ok((z, sol, diag)) => {
            write_mean_path(&dir, &model, &z, &diag.mean_stderr)?;
            write_diagnostics(&dir, &diag.history, &diag.inner_iterations)?;
            write_policy(&dir, &sol)?;
            write_picard_log(&dir, &sol.log)?;
            manifest.insert("converged".into(), json!(true));
            manifest.insert("outer_history".into(), json!(diag.history));
            manifest.insert("inner_iterations".into(), json!(diag.inner_iterations));
            manifest.insert("picard_log".into(), json!(sol.log));
            manifest.insert("consistency_residual".into(), json!(diag.consistency_residual));
            manifest.insert("tol_z".into(), json!(ctx.config.fixed_point(&model)?.tol_z));
            manifest.insert("basis_terms".into(), json!(sol.basis.len()));
            if is_full(model.gamma()) {
                let check = riccati_cross_check(&model, &z, &sol)?;
                println!("riccati cross-check: {check}");
                manifest.insert("oracle_cross_check".into(), check);
            }
            write_json(&dir.join(MANIFEST), &Value::Object(manifest))?;
            println!(
                "converged after {} outer iterations (residual {:.3e}); artifacts in {}",
                diag.history.len(),
                diag.history.last().copied().unwrap_or(0.0),
                dir.display()
            );
            Ok(dir)
        }
        Err(e) => {
            let history = match &e {
                mfglab::Error::OuterNotConverged { history } => history.clone(),
                _ => Vec::new(),
            };
            write_diagnostics(&dir, &history, &[])?;
            manifest.insert("converged".into(), json!(false));
            manifest.insert("outer_history".into(), json!(history));
            manifest.insert("error".into(), json!(e.to_string()));
            write_json(&dir.join(MANIFEST), &Value::Object(manifest))?;
            Err(CliError::NotConverged(format!("{e}; diagnostics in {}", dir.display())))
        }
    }
}

/// Recomputes the equilibrium of a prior `solve` run (or solves afresh when
/// no run is given), writes its `z_star.csv` into `dir`, and checks that the
/// prior run reproduces byte for byte.
fn equilibrium_for(ctx: &Context, model: &Model, dir: &Path) -> CliResult<Equilibrium> {
    if let Some(prior) = &ctx.from {
        let manifest = read_manifest(prior)?;
        let mismatch = |message: String| CliError::PriorRun {
            path: prior.clone(),
            message,
        };
        if manifest.get("command").and_then(Value::as_str) != Some("solve") {
            return Err(mismatch("not a solve run".into()));
        }
        if manifest.get("converged").and_then(Value::as_bool) != Some(true) {
            return Err(mismatch("the solve did not converge".into()));
        }
        let recorded = manifest.get("config_sha256").and_then(Value::as_str).unwrap_or("");
        if recorded != ctx.config_sha256() {
            return Err(mismatch(format!(
                "config hash {recorded} does not match the current effective config {}",
                ctx.config_sha256()
            )));
        }
    }
    let (z, sol, diag) = solve_equilibrium(ctx, model)?.map_err(|e| CliError::NotConverged(e.to_string()))?;
    write_mean_path(dir, model, &z, &diag.mean_stderr)?;
    if let Some(prior) = &ctx.from {
        let read = |p: PathBuf| fs::read(&p).map_err(CliError::io(p));
        if read(prior.join("z_star.csv"))? != read(dir.join("z_star.csv"))? {
            return Err(CliError::PriorRun {
                path: prior.clone(),
                message: "recomputed z_star.csv differs from the recorded one".into(),
            });
        }
    }
    Ok((z, sol, diag))
}

fn write_fits(path: &Path, fits: &[&MetricFit]) -> CliResult<()> {
    let rows = fits.iter().map(|fit| match fit.fit {
        Some(lf) => vec![fit.metric.clone(), f(lf.slope), f(lf.slope_stderr), f(lf.intercept), f(fit.c_bound)],
        None => vec![fit.metric.clone(), String::new(), String::new(), String::new(), f(fit.c_bound)],
    });
    write_csv(path, &["metric", "slope", "stderr", "intercept", "C_bound"], rows)
}

fn write_summary(path: &Path, table: &RateTable) -> CliResult<()> {
    let rows = table
        .fits
        .iter()
        .flat_map(|fit| fit.summary.iter().map(move |&(n, v, se)| vec![fit.metric.clone(), u(n), f(v), f(se)]));
    write_csv(path, &["metric", "N", "value", "stderr"], rows)
}

fn print_fits(fits: &[&MetricFit]) {
    for fit in fits {
        match fit.fit {
            Some(lf) => println!(
                "{:<28} slope {:>8.4} ± {:.4}   C_bound {:.4e}",
                fit.metric, lf.slope, lf.slope_stderr, fit.c_bound
            ),
            None => println!("{:<28} slope n/a (fewer than two positive values)", fit.metric),
        }
    }
}

pub fn rates(ctx: &Context) -> CliResult<PathBuf> {
    let model = ctx.config.model()?;
    let dir = ctx.start("rates")?;
    let (z, sol, _) = equilibrium_for(ctx, &model, &dir)?;
    let e = &ctx.config.experiment;
    let seed = mfglab::rng::stream_seed(ctx.config.seed, POPULATION_SEED, 0);
    let table = population_rates(&model, &z, &sol, &e.agents, e.reps, seed)?;
    let rows = table
        .rows
        .iter()
        .map(|r| vec![u(r.agents), u(r.rep), r.metric.clone(), f(r.value)]);
    write_csv(&dir.join("rates.csv"), &["N", "rep", "metric", "value"], rows)?;
    let fits: Vec<&MetricFit> = table.fits.iter().collect();
    write_fits(&dir.join("fits.csv"), &fits)?;
    write_summary(&dir.join("summary.csv"), &table)?;
    let mut manifest = ctx.manifest("rates");
    manifest.insert("agents".into(), json!(e.agents));
    manifest.insert("reps".into(), json!(e.reps));
    manifest.insert("population_seed".into(), json!(seed));
    manifest.insert("from".into(), json!(ctx.from.as_ref().map(|p| p.display().to_string())));
    write_json(&dir.join(MANIFEST), &Value::Object(manifest))?;
    print_fits(&fits);
    println!("artifacts in {}", dir.display());
    Ok(dir)
}

pub fn nash(ctx: &Context) -> CliResult<PathBuf> {
    let model = ctx.config.model()?;
    let dir = ctx.start("nash")?;
    let (z, sol, _) = equilibrium_for(ctx, &model, &dir)?;
    let e = &ctx.config.experiment;
    let family = ctx.config.family();
    let seed = mfglab::rng::stream_seed(ctx.config.seed, NASH_SEED, 0);
    let table = nash_gap(&model, &z, &sol, &e.nash_agents, &family, e.reps, seed)?;
    let rows = table.rows.iter().map(|r| {
        vec![
            u(r.agents),
            u(r.rep),
            r.deviation_id.clone(),
            f(r.cost_dev),
            f(r.cost_eq),
            f(r.gap),
        ]
    });
    write_csv(
        &dir.join("nash.csv"),
        &["N", "rep", "deviation_id", "cost_dev", "cost_eq", "gap"],
        rows,
    )?;
    write_csv(
        &dir.join("epsilon.csv"),
        &["N", "epsilon"],
        table.epsilon.iter().map(|&(n, eps)| vec![u(n), f(eps)]),
    )?;
    let epsilon_fit = MetricFit {
        metric: "epsilon".into(),
        summary: table.epsilon.iter().map(|&(n, eps)| (n, eps, 0.0)).collect(),
        fit: table.fit,
        power: -0.5,
        c_bound: table.c_bound,
    };
    let mut fits = vec![&epsilon_fit];
    fits.extend(table.deviation_rates.fits.iter());
    write_fits(&dir.join("fits.csv"), &fits)?;
    write_summary(&dir.join("summary.csv"), &table.deviation_rates)?;
    let mut manifest = ctx.manifest("nash");
    manifest.insert("agents".into(), json!(e.nash_agents));
    manifest.insert("reps".into(), json!(e.reps));
    manifest.insert(
        "deviations".into(),
        json!(family.members().iter().map(|d| d.id()).collect::<Vec<_>>()),
    );
    manifest.insert("population_seed".into(), json!(seed));
    manifest.insert("from".into(), json!(ctx.from.as_ref().map(|p| p.display().to_string())));
    write_json(&dir.join(MANIFEST), &Value::Object(manifest))?;
    print_fits(&fits);
    println!("artifacts in {}", dir.display());
    Ok(dir)
}

pub fn population(ctx: &Context) -> CliResult<PathBuf> {
    let model = ctx.config.model()?;
    let dir = ctx.start("population")?;
    let (z, sol, _) = equilibrium_for(ctx, &model, &dir)?;
    let e = &ctx.config.experiment;
    let seed = mfglab::rng::stream_seed(ctx.config.seed, POPULATION_SEED, 0);
    let run = simulate_population(&model, &z, &sol, e.population_agents, e.reps, seed)?;
    let mut rows = Vec::new();
    for rep in &run.reps {
        for i in 0..rep.agents {
            rows.push(vec![
                u(rep.rep),
                u(i),
                f(rep.coupled_cost(&model, i)?),
                f(rep.limit_cost(&model, &z, i)?),
            ]);
        }
    }
    write_csv(
        &dir.join("population.csv"),
        &["rep", "agent", "coupled_cost", "limit_cost"],
        rows,
    )?;
    let n = model.n();
    let mut header: Vec<String> = vec!["rep".into(), "t".into()];
    header.extend((0..n).map(|i| format!("average_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut rows = Vec::new();
    for rep in &run.reps {
        for k in 0..=rep.steps {
            let mut row = vec![u(rep.rep), f(model.grid().t(k))];
            row.extend(rep.average_at(k).iter().map(|&v| f(v)));
            rows.push(row);
        }
    }
    write_csv(&dir.join("average.csv"), &header, rows)?;
    let (mean, se) = run.coupled_cost(&model, 0)?;
    let mut manifest = ctx.manifest("population");
    manifest.insert("agents".into(), json!(e.population_agents));
    manifest.insert("reps".into(), json!(e.reps));
    manifest.insert("population_seed".into(), json!(seed));
    manifest.insert("from".into(), json!(ctx.from.as_ref().map(|p| p.display().to_string())));
    write_json(&dir.join(MANIFEST), &Value::Object(manifest))?;
    println!(
        "N={} reps={}: agent 0 coupled cost {mean:.6} ± {se:.2e}; artifacts in {}",
        e.population_agents,
        e.reps,
        dir.display()
    );
    Ok(dir)
}

fn write_riccati(dir: &Path, model: &Model, ric: &RiccatiSolution) -> CliResult<()> {
    let (n, m) = (model.n(), model.m());
    let mut header: Vec<String> = vec!["t".into()];
    header.extend((0..n).flat_map(|i| (0..n).map(move |j| format!("P_{i}_{j}"))));
    header.extend((0..n).map(|i| format!("s_{i}")));
    header.extend((0..m).flat_map(|i| (0..n).map(move |j| format!("K_fb_{i}_{j}"))));
    header.extend((0..m).map(|i| format!("k_ff_{i}")));
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = (0..model.grid().nodes()).map(|k| {
        let mut row = vec![f(model.grid().t(k))];
        row.extend((0..n).flat_map(|i| (0..n).map(move |j| f(ric.p[k][(i, j)]))));
        row.extend(ric.s[k].iter().map(|&v| f(v)));
        row.extend((0..m).flat_map(|i| (0..n).map(move |j| f(ric.gain[k][(i, j)]))));
        row.extend(ric.offset[k].iter().map(|&v| f(v)));
        row
    });
    write_csv(&dir.join("riccati.csv"), &header, rows)
}

pub fn oracle(ctx: &Context) -> CliResult<PathBuf> {
    let model = ctx.config.model()?;
    let dir = ctx.start("oracle")?;
    let mut manifest = ctx.manifest("oracle");
    // The Riccati reference ignores the constraint set.
    let free = model.with_gamma(ConvexSet::full(model.m()))?;
    let (_, ric) = riccati_fixed_point(&free, 1e-12, 1000, false)?;
    write_riccati(&dir, &model, &ric)?;
    println!("riccati: P(0) = {:?}", ric.p[0].as_slice());
    let scalar = model.n() == 1 && model.m() == 1;
    let bounded = scalar && !is_full(model.gamma()) && control_interval(model.gamma()).is_ok();
    if bounded {
        let (z, _, _) = equilibrium_for(ctx, &model, &dir)?;
        let lattice = Lattice::covering(&model, &z, ctx.config.experiment.dp_points)?;
        let dp = solve_dp_1d(&model, &z, lattice)?;
        let mut rows = Vec::new();
        for k in 0..model.grid().nodes() {
            for j in 0..lattice.points {
                rows.push(vec![
                    f(model.grid().t(k)),
                    f(lattice.x(j)),
                    f(dp.values[k][j]),
                    dp.policy.get(k).map_or_else(String::new, |p| f(p[j])),
                ]);
            }
        }
        write_csv(&dir.join("dp.csv"), &["t", "x", "value", "policy"], rows)?;
        let v0 = dp.value_at(0, model.x0()[0]);
        manifest.insert("dp_points".into(), json!(lattice.points));
        manifest.insert("dp_lattice".into(), json!([lattice.lower, lattice.upper]));
        manifest.insert("dp_value_x0".into(), json!(v0));
        println!("dp: V_0(x0) = {v0:.6} on [{:.3}, {:.3}] with {} points", lattice.lower, lattice.upper, lattice.points);
    }
    write_json(&dir.join(MANIFEST), &Value::Object(manifest))?;
    println!("artifacts in {}", dir.display());
    Ok(dir)
}
