//! Finite populations driven by the decentralised mean-field strategy.
//!
//! Agent `i` of an `N`-agent replication owns one scalar Brownian motion
//! `W_i`. Its limit state `α^i` follows the solved feedback against the frozen
//! mean `z*`, and its control `ū_i = φ(p̂(α^i), q̂(α^i))` is therefore a
//! function of `W_i` alone. The coupled state `x̌^i` uses the same control and
//! noise but feels the empirical average `x̌^{(N)}` through `F`.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fbsde::{euler_step, FbsdeSolution};
use crate::linalg::pairwise_sum;
use crate::mean_field::MeanPath;
use crate::model::{Model, FEASIBILITY_TOL, MAX_DIM};
use crate::rng::{stream, stream_seed};
use crate::stats::{envelope_constant, fit_log_log, mean_stderr, LogLogFit};

const REPLICATION_STREAM: u64 = 0x5245_504C;
const AGENT_STREAM: u64 = 0x4147_4E54;

/// Default population sizes for rate fits.
pub const DEFAULT_AGENT_COUNTS: [usize; 7] = [10, 25, 50, 100, 200, 400, 1000];
/// Default population sizes for the ε-Nash experiment.
pub const DEFAULT_NASH_AGENT_COUNTS: [usize; 5] = [25, 50, 100, 200, 400];
pub const DEFAULT_REPS: usize = 64;

/// Brownian increments of replication `rep` of an `agents`-agent population,
/// node-major (`dw[k * agents + i]`).
pub fn population_noise(model: &Model, agents: usize, seed: u64, rep: usize) -> Vec<f64> {
    let steps = model.grid().steps();
    let sq = model.grid().dt().sqrt();
    let rep_seed = stream_seed(seed, REPLICATION_STREAM ^ ((agents as u64) << 32), rep as u64);
    let mut dw = vec![0.0; steps * agents];
    for i in 0..agents {
        let mut rng = stream(rep_seed, AGENT_STREAM, i as u64);
        for k in 0..steps {
            let xi: f64 = StandardNormal.sample(&mut rng);
            dw[k * agents + i] = xi * sq;
        }
    }
    dw
}

/// A unilateral deviation of one agent. Every member is an open-loop
/// function of the agent's own noise.
#[derive(Debug, Clone, PartialEq)]
pub enum Deviation {
    /// `u ≡ P_Γ[c]`.
    Constant(Vec<f64>),
    /// `u = P_Γ^R[λ R⁻¹(Bᵀp + Dᵀq)]` with `(p, q)` the agent's equilibrium
    /// adjoint; `λ = 1` is the equilibrium control itself.
    Scaled(f64),
    /// `u_k = P_Γ[φ(t_{K−1−k}, p̂_{K−1−k}(α_k), q̂_{K−1−k}(α_k))]`: the
    /// equilibrium feedback run backwards in time along the agent's own
    /// limit state.
    TimeReversed,
}

impl Deviation {
    pub fn id(&self) -> String {
        match self {
            Deviation::Constant(c) => {
                let parts: Vec<String> = c.iter().map(|v| format!("{v}")).collect();
                format!("constant[{}]", parts.join(";"))
            }
            Deviation::Scaled(l) => format!("scaled[{l}]"),
            Deviation::TimeReversed => "time_reversed".into(),
        }
    }

    fn control(
        &self,
        model: &Model,
        sol: &FbsdeSolution,
        k: usize,
        alpha: &[f64],
        p: &[f64],
        q: &[f64],
        out: &mut [f64],
    ) -> Result<()> {
        let (n, m) = (model.n(), model.m());
        match self {
            Deviation::Constant(c) => {
                if c.len() != m {
                    return Err(Error::ShapeMismatch(format!("constant deviation has length {}, expected {m}", c.len())));
                }
                if c.iter().any(|v| !v.is_finite()) {
                    return Err(Error::InfeasibleDeviation {
                        step: k,
                        violation: f64::INFINITY,
                    });
                }
                model.gamma().project_into(c, out);
            }
            Deviation::Scaled(lambda) => {
                let mut raw = [0.0; MAX_DIM];
                model.unconstrained_control_into(k, p, q, &mut raw[..m]);
                for v in &mut raw[..m] {
                    *v *= lambda;
                }
                model.gamma().project_weighted_into(&raw[..m], model.r_weight(k), out)?;
            }
            Deviation::TimeReversed => {
                let kr = model.grid().steps() - 1 - k;
                let mut pr = [0.0; MAX_DIM];
                let mut qr = [0.0; MAX_DIM];
                sol.adjoint_at(model, kr, alpha, &mut pr[..n], &mut qr[..n]);
                let mut u = [0.0; MAX_DIM];
                model.control_map_into(kr, &pr[..n], &qr[..n], &mut u[..m])?;
                model.gamma().project_into(&u[..m], out);
            }
        }
        let violation = model.gamma().violation(out);
        if violation > FEASIBILITY_TOL || out.iter().any(|v| !v.is_finite()) {
            return Err(Error::InfeasibleDeviation { step: k, violation });
        }
        Ok(())
    }
}

/// Built-in deviation family: constants, scalings of the equilibrium
/// control (which must include `λ = 1`) and the time-reversed control.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationFamily {
    pub constants: Vec<Vec<f64>>,
    pub scales: Vec<f64>,
    pub time_reversed: bool,
}

impl DeviationFamily {
    pub fn standard(m: usize) -> Self {
        Self {
            constants: vec![vec![0.0; m], vec![0.25; m]],
            scales: vec![0.0, 0.5, 1.0, 1.5],
            time_reversed: true,
        }
    }

    pub fn members(&self) -> Vec<Deviation> {
        let mut out: Vec<Deviation> = self.constants.iter().cloned().map(Deviation::Constant).collect();
        out.extend(self.scales.iter().map(|&l| Deviation::Scaled(l)));
        if self.time_reversed {
            out.push(Deviation::TimeReversed);
        }
        out
    }
}

/// Trajectories of the deviating agent that have no equilibrium counterpart.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationPaths {
    pub agent: usize,
    pub deviation: Deviation,
    /// Limit state under the deviation, driven by `z*`; `(K+1) × n`.
    pub limit: Vec<f64>,
}

/// One replication of an `N`-agent population.
#[derive(Debug, Clone, PartialEq)]
pub struct Replication {
    pub agents: usize,
    pub rep: usize,
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    /// `dw[k * N + i]`.
    pub dw: Vec<f64>,
    /// Coupled states `x̌[(k * N + i) * n + d]`.
    pub coupled: Vec<f64>,
    /// Equilibrium limit states `α`, same layout.
    pub limit: Vec<f64>,
    /// Controls actually applied, `u[(k * N + i) * m + d]`.
    pub controls: Vec<f64>,
    /// Empirical average `x̌^{(N)}_k`, `(K+1) × n`.
    pub average: Vec<f64>,
    pub deviation: Option<DeviationPaths>,
}

impl Replication {
    pub fn coupled_state(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.agents + i) * self.n;
        &self.coupled[o..o + self.n]
    }

    pub fn limit_state(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.agents + i) * self.n;
        &self.limit[o..o + self.n]
    }

    pub fn control(&self, k: usize, i: usize) -> &[f64] {
        let o = (k * self.agents + i) * self.m;
        &self.controls[o..o + self.m]
    }

    pub fn average_at(&self, k: usize) -> &[f64] {
        &self.average[k * self.n..(k + 1) * self.n]
    }

    fn agent_path(&self, states: &[f64], i: usize) -> Vec<f64> {
        (0..=self.steps)
            .flat_map(|k| {
                let o = (k * self.agents + i) * self.n;
                states[o..o + self.n].to_vec()
            })
            .collect()
    }

    fn agent_controls(&self, i: usize) -> Vec<f64> {
        (0..self.steps).flat_map(|k| self.control(k, i).to_vec()).collect()
    }

    /// Cost of agent `i` against the empirical average of this replication.
    pub fn coupled_cost(&self, model: &Model, i: usize) -> Result<f64> {
        if i >= self.agents {
            return Err(Error::IndexOutOfRange { index: i, len: self.agents });
        }
        Ok(model.path_cost(&self.average, &self.agent_path(&self.coupled, i), &self.agent_controls(i)))
    }

    /// Cost of agent `i`'s limit state against `z*` under the applied control.
    /// For the deviating agent this uses its deviation limit state.
    pub fn limit_cost(&self, model: &Model, z: &MeanPath, i: usize) -> Result<f64> {
        if i >= self.agents {
            return Err(Error::IndexOutOfRange { index: i, len: self.agents });
        }
        let states = match &self.deviation {
            Some(d) if d.agent == i => d.limit.clone(),
            _ => self.agent_path(&self.limit, i),
        };
        Ok(model.path_cost(z.as_slice(), &states, &self.agent_controls(i)))
    }

    /// Average stepped directly by the averaged dynamics
    /// `x̄_{k+1} = x̄_k + (A x̄_k + B ū_k + F x̄_k + b)dt + mean_i (D u_k^i + σ)ΔW_k^i`.
    pub fn averaged_recursion(&self, model: &Model) -> Vec<f64> {
        let (n, m, agents) = (self.n, self.m, self.agents);
        let c = model.coeffs();
        let mut out = Vec::with_capacity((self.steps + 1) * n);
        out.extend_from_slice(model.x0());
        let mut col = vec![0.0; agents];
        for k in 0..self.steps {
            let mean_u: Vec<f64> = (0..m)
                .map(|d| {
                    for (i, v) in col.iter_mut().enumerate() {
                        *v = self.control(k, i)[d];
                    }
                    pairwise_sum(&col) / agents as f64
                })
                .collect();
            let mut noise_term = vec![0.0; n];
            let mut vol = [0.0; MAX_DIM];
            for (d, nt) in noise_term.iter_mut().enumerate() {
                for (i, v) in col.iter_mut().enumerate() {
                    crate::linalg::matvec_into(&c.d[k], self.control(k, i), &mut vol[..n]);
                    *v = (vol[d] + c.sigma[k][d]) * self.dw[k * agents + i];
                }
                *nt = pairwise_sum(&col) / agents as f64;
            }
            let cur = out[k * n..(k + 1) * n].to_vec();
            let mut next = vec![0.0; n];
            euler_step(model, k, &cur, &mean_u, &cur, 0.0, &mut next);
            for d in 0..n {
                next[d] += noise_term[d];
            }
            out.extend_from_slice(&next);
        }
        out
    }
}

fn mean_rows(block: &[f64], rows: usize, width: usize, out: &mut [f64]) {
    let mut col = vec![0.0; rows];
    for d in 0..width {
        for (i, v) in col.iter_mut().enumerate() {
            *v = block[i * width + d];
        }
        out[d] = pairwise_sum(&col) / rows as f64;
    }
}

/// Simulates one replication from explicit node-major increments. Agent `i`
/// uses column `i` of `dw`; an optional deviation replaces one agent's
/// control.
pub fn simulate_replication(
    model: &Model,
    z: &MeanPath,
    sol: &FbsdeSolution,
    agents: usize,
    rep: usize,
    dw: Vec<f64>,
    deviation: Option<(usize, &Deviation)>,
) -> Result<Replication> {
    let (n, m) = (model.n(), model.m());
    let steps = model.grid().steps();
    if agents == 0 || dw.len() != steps * agents {
        return Err(Error::ShapeMismatch(format!("{} increments for {agents} agents", dw.len())));
    }
    if z.nodes() != steps + 1 || z.dim() != n {
        return Err(Error::ShapeMismatch("mean path does not match the grid".into()));
    }
    if let Some((i, _)) = deviation {
        if i >= agents {
            return Err(Error::IndexOutOfRange { index: i, len: agents });
        }
    }
    let mut coupled = vec![0.0; (steps + 1) * agents * n];
    let mut limit = vec![0.0; (steps + 1) * agents * n];
    let mut controls = vec![0.0; steps * agents * m];
    let mut average = vec![0.0; (steps + 1) * n];
    for i in 0..agents {
        coupled[i * n..(i + 1) * n].copy_from_slice(model.x0());
        limit[i * n..(i + 1) * n].copy_from_slice(model.x0());
    }
    let mut dev_limit = Vec::new();
    if deviation.is_some() {
        dev_limit.extend_from_slice(model.x0());
    }
    let mut p = [0.0; MAX_DIM];
    let mut q = [0.0; MAX_DIM];
    let mut u_eq = [0.0; MAX_DIM];
    for k in 0..steps {
        let row = k * agents * n;
        mean_rows(&coupled[row..row + agents * n], agents, n, &mut average[k * n..(k + 1) * n]);
        let (cur_c, next_c) = coupled.split_at_mut(row + agents * n);
        let (cur_l, next_l) = limit.split_at_mut(row + agents * n);
        let xbar = &average[k * n..(k + 1) * n];
        let zk = z.at(k);
        for i in 0..agents {
            let alpha = &cur_l[row + i * n..row + (i + 1) * n];
            sol.adjoint_at(model, k, alpha, &mut p[..n], &mut q[..n]);
            model.control_map_into(k, &p[..n], &q[..n], &mut u_eq[..m])?;
            let w = dw[k * agents + i];
            let uo = &mut controls[(k * agents + i) * m..(k * agents + i + 1) * m];
            match deviation {
                Some((d, dev)) if d == i => {
                    dev.control(model, sol, k, alpha, &p[..n], &q[..n], uo)?;
                    let mut next = [0.0; MAX_DIM];
                    euler_step(model, k, &dev_limit[k * n..(k + 1) * n], uo, zk, w, &mut next[..n]);
                    dev_limit.extend_from_slice(&next[..n]);
                }
                _ => uo.copy_from_slice(&u_eq[..m]),
            }
            euler_step(model, k, &cur_c[row + i * n..row + (i + 1) * n], uo, xbar, w, &mut next_c[i * n..(i + 1) * n]);
            euler_step(model, k, alpha, &u_eq[..m], zk, w, &mut next_l[i * n..(i + 1) * n]);
        }
        let next_row = &coupled[(k + 1) * agents * n..(k + 2) * agents * n];
        if let Some(j) = next_row.chunks(n).position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteState { step: k + 1, path: j });
        }
        let next_row = &limit[(k + 1) * agents * n..(k + 2) * agents * n];
        if let Some(j) = next_row.chunks(n).position(|x| x.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFiniteState { step: k + 1, path: j });
        }
    }
    let row = steps * agents * n;
    mean_rows(&coupled[row..], agents, n, &mut average[steps * n..]);
    Ok(Replication {
        agents,
        rep,
        n,
        m,
        steps,
        dw,
        coupled,
        limit,
        controls,
        average,
        deviation: deviation.map(|(agent, d)| DeviationPaths {
            agent,
            deviation: d.clone(),
            limit: dev_limit,
        }),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationRun {
    pub agents: usize,
    pub seed: u64,
    pub reps: Vec<Replication>,
}

impl PopulationRun {
    /// Mean over replications of agent `i`'s coupled cost, with its standard
    /// error.
    pub fn coupled_cost(&self, model: &Model, i: usize) -> Result<(f64, f64)> {
        let costs = self.reps.iter().map(|r| r.coupled_cost(model, i)).collect::<Result<Vec<_>>>()?;
        Ok(mean_stderr(&costs))
    }
}

/// `reps` independent replications of the equilibrium population.
pub fn simulate_population(
    model: &Model,
    z: &MeanPath,
    sol: &FbsdeSolution,
    agents: usize,
    reps: usize,
    seed: u64,
) -> Result<PopulationRun> {
    let reps = (0..reps)
        .into_par_iter()
        .map(|r| simulate_replication(model, z, sol, agents, r, population_noise(model, agents, seed, r), None))
        .collect::<Result<Vec<_>>>()?;
    Ok(PopulationRun { agents, seed, reps })
}

fn sup_sq(steps: usize, n: usize, diff: impl Fn(usize, usize) -> f64) -> f64 {
    (0..=steps)
        .map(|k| (0..n).map(|d| diff(k, d).powi(2)).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `sup_k |x̌^{(N)}_k − z*_k|²`.
pub fn average_gap(rep: &Replication, z: &MeanPath) -> f64 {
    sup_sq(rep.steps, rep.n, |k, d| rep.average_at(k)[d] - z.at(k)[d])
}

/// Agent-averaged `sup_k |x̌^i_k − α^i_k|²`.
pub fn coupling_gap(rep: &Replication) -> f64 {
    let vals: Vec<f64> = (0..rep.agents)
        .map(|i| sup_sq(rep.steps, rep.n, |k, d| rep.coupled_state(k, i)[d] - rep.limit_state(k, i)[d]))
        .collect();
    pairwise_sum(&vals) / rep.agents as f64
}

/// Agent-averaged `sup_k |x̌^i_k|²`.
pub fn state_bound(rep: &Replication) -> f64 {
    let vals: Vec<f64> = (0..rep.agents)
        .map(|i| sup_sq(rep.steps, rep.n, |k, d| rep.coupled_state(k, i)[d]))
        .collect();
    pairwise_sum(&vals) / rep.agents as f64
}

/// Agent-averaged coupled cost minus limit cost.
pub fn cost_difference(rep: &Replication, model: &Model, z: &MeanPath) -> Result<f64> {
    let vals = (0..rep.agents)
        .map(|i| Ok(rep.coupled_cost(model, i)? - rep.limit_cost(model, z, i)?))
        .collect::<Result<Vec<f64>>>()?;
    Ok(pairwise_sum(&vals) / rep.agents as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateRow {
    pub agents: usize,
    pub rep: usize,
    pub metric: String,
    pub value: f64,
}

/// Per-`N` summary and log-log fit of one metric.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricFit {
    pub metric: String,
    /// `(N, summary, stderr)` rows, the summary being the replication mean
    /// (its absolute value for signed metrics).
    pub summary: Vec<(usize, f64, f64)>,
    /// Fit over the rows with a positive summary; `None` with fewer than two.
    pub fit: Option<LogLogFit>,
    /// Exponent of the bound `summary ≤ C·N^{power}`.
    pub power: f64,
    /// Smallest such `C`.
    pub c_bound: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RateTable {
    pub rows: Vec<RateRow>,
    pub fits: Vec<MetricFit>,
}

impl RateTable {
    pub fn fit(&self, metric: &str) -> Option<&MetricFit> {
        self.fits.iter().find(|f| f.metric == metric)
    }
}

/// Names, bound exponents and sign handling of the population metrics.
pub const METRICS: [(&str, f64, bool); 4] = [
    ("state_bound", 0.0, false),
    ("average_gap", -1.0, false),
    ("coupling_gap", -1.0, false),
    ("cost_gap", -0.5, true),
];

pub const DEVIATION_METRICS: [(&str, f64, bool); 3] = [
    ("deviation_average_gap", -1.0, false),
    ("deviation_limit_gap", -1.0, false),
    ("deviation_cost_gap", -0.5, true),
];

fn check_agent_counts(ns: &[usize]) -> Result<()> {
    if ns.len() < 4 || ns.windows(2).any(|w| w[0] >= w[1]) || ns[0] == 0 {
        return Err(Error::InvalidInput(format!(
            "rate fits need at least 4 strictly increasing positive agent counts, got {ns:?}"
        )));
    }
    Ok(())
}

fn summarise(rows: &[RateRow], metric: &str, ns: &[usize], power: f64, signed: bool) -> Result<MetricFit> {
    let summary: Vec<(usize, f64, f64)> = ns
        .iter()
        .map(|&n| {
            let vals: Vec<f64> = rows
                .iter()
                .filter(|r| r.agents == n && r.metric == metric)
                .map(|r| r.value)
                .collect();
            let (m, se) = mean_stderr(&vals);
            (n, if signed { m.abs() } else { m }, se)
        })
        .collect();
    let positive: Vec<&(usize, f64, f64)> = summary.iter().filter(|r| r.1 > 0.0).collect();
    let fit = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|r| r.0 as f64).collect();
        let ys: Vec<f64> = positive.iter().map(|r| r.1).collect();
        Some(fit_log_log(&xs, &ys)?)
    } else {
        None
    };
    let xs: Vec<f64> = summary.iter().map(|r| r.0 as f64).collect();
    let ys: Vec<f64> = summary.iter().map(|r| r.1).collect();
    Ok(MetricFit {
        metric: metric.into(),
        summary,
        fit,
        power,
        c_bound: envelope_constant(&xs, &ys, power),
    })
}

fn table(rows: Vec<RateRow>, ns: &[usize], metrics: &[(&str, f64, bool)]) -> Result<RateTable> {
    let fits = metrics
        .iter()
        .map(|&(name, power, signed)| summarise(&rows, name, ns, power, signed))
        .collect::<Result<Vec<_>>>()?;
    Ok(RateTable { rows, fits })
}

/// Like [`table`] for rows named `metric:member`: each member is summarised
/// separately and the fitted summary is the largest one at each `N`.
fn grouped_table(rows: Vec<RateRow>, ns: &[usize], metrics: &[(&str, f64, bool)]) -> Result<RateTable> {
    let mut fits = Vec::new();
    for &(name, power, signed) in metrics {
        let prefix = format!("{name}:");
        let mut groups: Vec<&str> = rows
            .iter()
            .filter(|r| r.metric.starts_with(&prefix))
            .map(|r| r.metric.as_str())
            .collect();
        groups.sort_unstable();
        groups.dedup();
        let per_group = groups
            .iter()
            .map(|g| summarise(&rows, g, ns, power, signed))
            .collect::<Result<Vec<_>>>()?;
        let summary: Vec<(usize, f64, f64)> = (0..ns.len())
            .map(|j| {
                per_group
                    .iter()
                    .map(|g| g.summary[j])
                    .fold((ns[j], 0.0, 0.0), |a, b| if b.1 > a.1 { b } else { a })
            })
            .collect();
        let positive: Vec<&(usize, f64, f64)> = summary.iter().filter(|r| r.1 > 0.0).collect();
        let fit = if positive.len() >= 2 {
            let xs: Vec<f64> = positive.iter().map(|r| r.0 as f64).collect();
            let ys: Vec<f64> = positive.iter().map(|r| r.1).collect();
            Some(fit_log_log(&xs, &ys)?)
        } else {
            None
        };
        let xs: Vec<f64> = summary.iter().map(|r| r.0 as f64).collect();
        let ys: Vec<f64> = summary.iter().map(|r| r.1).collect();
        fits.push(MetricFit {
            metric: name.into(),
            summary,
            fit,
            power,
            c_bound: envelope_constant(&xs, &ys, power),
        });
    }
    Ok(RateTable { rows, fits })
}

/// Equilibrium population metrics for every `N` in `ns`:
///
/// - `state_bound`: `E sup_t |x̌^i|²`;
/// - `average_gap`: `E sup_t |x̌^{(N)} − z*|²`;
/// - `coupling_gap`: `E sup_t |x̌^i − α^i|²`;
/// - `cost_gap`: `|𝒥_i(ū) − J_i(ū)|`.
///
/// Agents are exchangeable, so per-agent expectations are estimated by
/// averaging over agents and replications.
pub fn population_rates(
    model: &Model,
    z: &MeanPath,
    sol: &FbsdeSolution,
    ns: &[usize],
    reps: usize,
    seed: u64,
) -> Result<RateTable> {
    check_agent_counts(ns)?;
    let mut rows = Vec::new();
    for &agents in ns {
        let per_rep = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<[f64; 4]> {
                let rep = simulate_replication(model, z, sol, agents, r, population_noise(model, agents, seed, r), None)?;
                Ok([state_bound(&rep), average_gap(&rep, z), coupling_gap(&rep), cost_difference(&rep, model, z)?])
            })
            .collect::<Result<Vec<_>>>()?;
        for (r, vals) in per_rep.iter().enumerate() {
            for (&(name, _, _), &value) in METRICS.iter().zip(vals) {
                rows.push(RateRow {
                    agents,
                    rep: r,
                    metric: name.into(),
                    value,
                });
            }
        }
    }
    table(rows, ns, &METRICS)
}

fn only(table: RateTable, metric: &str) -> RateTable {
    RateTable {
        rows: table.rows.into_iter().filter(|r| r.metric == metric).collect(),
        fits: table.fits.into_iter().filter(|f| f.metric == metric).collect(),
    }
}

/// `E sup_t |x̌^{(N)} − z*|²` against `N`.
pub fn rate_average_gap(model: &Model, z: &MeanPath, sol: &FbsdeSolution, ns: &[usize], reps: usize, seed: u64) -> Result<RateTable> {
    Ok(only(population_rates(model, z, sol, ns, reps, seed)?, "average_gap"))
}

/// `sup_i E sup_t |x̌^i − α^i|²` against `N`.
pub fn rate_coupling_gap(model: &Model, z: &MeanPath, sol: &FbsdeSolution, ns: &[usize], reps: usize, seed: u64) -> Result<RateTable> {
    Ok(only(population_rates(model, z, sol, ns, reps, seed)?, "coupling_gap"))
}

/// `|𝒥_i(ū_i, ū_{−i}) − J_i(ū_i)|` against `N`.
pub fn rate_cost_gap(model: &Model, z: &MeanPath, sol: &FbsdeSolution, ns: &[usize], reps: usize, seed: u64) -> Result<RateTable> {
    Ok(only(population_rates(model, z, sol, ns, reps, seed)?, "cost_gap"))
}

/// Outcome of one deviation replication.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationRun {
    pub agent: usize,
    pub deviation: Deviation,
    pub replication: Replication,
    /// `𝒥_i(u_i, ū_{−i})`.
    pub coupled_cost: f64,
    /// `J_i(u_i)` against `z*`.
    pub limit_cost: f64,
    /// `sup_t |y^{(N)} − z*|²`.
    pub average_gap: f64,
    /// `sup_t |y^i − ȳ^i|²`.
    pub limit_gap: f64,
    /// `E ∫ |u_i|² dt` along this replication.
    pub control_energy: f64,
}

/// Agent `i` switches to `deviation`; all others keep the equilibrium
/// control on the same noise as the equilibrium replication `rep`.
#[allow(clippy::too_many_arguments)]
pub fn deviation_run(
    model: &Model,
    z: &MeanPath,
    sol: &FbsdeSolution,
    agents: usize,
    i: usize,
    deviation: &Deviation,
    seed: u64,
    rep: usize,
) -> Result<DeviationRun> {
    let replication = simulate_replication(
        model,
        z,
        sol,
        agents,
        rep,
        population_noise(model, agents, seed, rep),
        Some((i, deviation)),
    )?;
    let coupled_cost = replication.coupled_cost(model, i)?;
    let limit_cost = replication.limit_cost(model, z, i)?;
    let average_gap = average_gap(&replication, z);
    let dev = replication.deviation.as_ref().expect("deviation paths");
    let n = replication.n;
    let limit_gap = sup_sq(replication.steps, n, |k, d| replication.coupled_state(k, i)[d] - dev.limit[k * n + d]);
    let dt = model.grid().dt();
    let control_energy = (0..replication.steps)
        .map(|k| replication.control(k, i).iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        * dt;
    Ok(DeviationRun {
        agent: i,
        deviation: deviation.clone(),
        replication,
        coupled_cost,
        limit_cost,
        average_gap,
        limit_gap,
        control_energy,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashRow {
    pub agents: usize,
    pub rep: usize,
    pub deviation_id: String,
    pub cost_dev: f64,
    pub cost_eq: f64,
    /// `cost_eq − cost_dev`; positive when the deviation pays off.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NashTable {
    pub rows: Vec<NashRow>,
    /// `(N, ε̂(N))` with `ε̂ = max(0, mean 𝒥_i(ū) − min_dev mean 𝒥_i(u_dev, ū_{−i}))`.
    pub epsilon: Vec<(usize, f64)>,
    /// Fit of the positive `ε̂` values; `None` when fewer than two are positive.
    pub fit: Option<LogLogFit>,
    /// Smallest `C` with `ε̂(N) ≤ C/√N` on every row.
    pub c_bound: f64,
    /// Deviation statistics per replication and family member (rows named
    /// `deviation_average_gap:<member>` and so on). Each fit follows the
    /// largest member summary at every `N`.
    pub deviation_rates: RateTable,
}

/// Agent 0 tries every member of `family` in every replication; the
/// equilibrium cost comes from the same replication without deviation.
pub fn nash_gap(
    model: &Model,
    z: &MeanPath,
    sol: &FbsdeSolution,
    ns: &[usize],
    family: &DeviationFamily,
    reps: usize,
    seed: u64,
) -> Result<NashTable> {
    check_agent_counts(ns)?;
    if !family.scales.contains(&1.0) {
        return Err(Error::InvalidInput("the deviation family must contain the scaling 1".into()));
    }
    let members = family.members();
    let mut rows = Vec::new();
    let mut rate_rows = Vec::new();
    let mut epsilon = Vec::new();
    for &agents in ns {
        let per_rep = (0..reps)
            .into_par_iter()
            .map(|r| -> Result<(f64, Vec<DeviationRun>)> {
                let eq = simulate_replication(model, z, sol, agents, r, population_noise(model, agents, seed, r), None)?;
                let cost_eq = eq.coupled_cost(model, 0)?;
                let runs = members
                    .iter()
                    .map(|d| deviation_run(model, z, sol, agents, 0, d, seed, r))
                    .collect::<Result<Vec<_>>>()?;
                Ok((cost_eq, runs))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut eq_costs = Vec::with_capacity(reps);
        let mut dev_costs = vec![Vec::with_capacity(reps); members.len()];
        for (r, (cost_eq, runs)) in per_rep.into_iter().enumerate() {
            eq_costs.push(cost_eq);
            for (d, run) in runs.into_iter().enumerate() {
                dev_costs[d].push(run.coupled_cost);
                rows.push(NashRow {
                    agents,
                    rep: r,
                    deviation_id: run.deviation.id(),
                    cost_dev: run.coupled_cost,
                    cost_eq,
                    gap: cost_eq - run.coupled_cost,
                });
                for (name, value) in [
                    ("deviation_average_gap", run.average_gap),
                    ("deviation_limit_gap", run.limit_gap),
                    ("deviation_cost_gap", run.coupled_cost - run.limit_cost),
                ] {
                    rate_rows.push(RateRow {
                        agents,
                        rep: r,
                        metric: format!("{name}:{}", members[d].id()),
                        value,
                    });
                }
            }
        }
        let eq_mean = mean_stderr(&eq_costs).0;
        let best = dev_costs.iter().map(|c| mean_stderr(c).0).fold(f64::INFINITY, f64::min);
        epsilon.push((agents, (eq_mean - best).max(0.0)));
    }
    let positive: Vec<&(usize, f64)> = epsilon.iter().filter(|e| e.1 > 0.0).collect();
    let fit = if positive.len() >= 2 {
        let xs: Vec<f64> = positive.iter().map(|e| e.0 as f64).collect();
        let ys: Vec<f64> = positive.iter().map(|e| e.1).collect();
        Some(fit_log_log(&xs, &ys)?)
    } else {
        None
    };
    let xs: Vec<f64> = epsilon.iter().map(|e| e.0 as f64).collect();
    let ys: Vec<f64> = epsilon.iter().map(|e| e.1).collect();
    let c_bound = envelope_constant(&xs, &ys, -0.5);
    Ok(NashTable {
        rows,
        epsilon,
        fit,
        c_bound,
        deviation_rates: grouped_table(rate_rows, ns, &DEVIATION_METRICS)?,
    })
}

#[cfg(test)]
mod tests;
