//! Experiment runners behind the command-line tool: parameter sweeps,
//! achievable regions, run-time benchmarks and the single-user distortion
//! study. Every runner returns typed rows in grid order and has a matching
//! CSV writer.

use std::io::Write;
use std::time::Instant;

use crate::config::ExperimentSpec;
use crate::dual::{fmt6, solve, RandomizedPolicy, SolveMode};
use crate::error::{Error, Result};
use crate::model::SystemConfig;
use crate::par;
use crate::policies::{PolicyKind, SlotPolicy, SrpPolicy};
use crate::simulator::{self, MeanStd, RunOptions, SimulationSummary};

/// Relative gap between analytic and simulated VAoI above which a row is
/// flagged.
pub const SIM_AGREEMENT: f64 = 0.03;
/// Absolute floor for that comparison, for near-zero VAoI.
pub const SIM_AGREEMENT_FLOOR: f64 = 1e-3;

fn opt(x: Option<f64>) -> String {
    x.map(fmt6).unwrap_or_default()
}

fn csv_writer<W: Write>(w: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().has_headers(false).from_writer(w)
}

fn write_records<W: Write>(w: W, header: &[&str], rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut out = csv_writer(w);
    out.write_record(header).map_err(csv_error)?;
    for r in rows {
        out.write_record(&r).map_err(csv_error)?;
    }
    out.flush().map_err(|e| Error::Io(e.to_string()))?;
    Ok(())
}

fn csv_error(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Access scheme label of a heuristic.
fn heuristic_mode(kind: PolicyKind) -> &'static str {
    match kind {
        PolicyKind::Greedy | PolicyKind::Srp => "noma",
        PolicyKind::MaxVaoiFirst | PolicyKind::RoundRobin => "tdma",
    }
}

/// Simulates `kind` (with `policy` for the stationary one).
pub fn simulate(
    cfg: &SystemConfig,
    kind: PolicyKind,
    policy: Option<&RandomizedPolicy>,
    options: RunOptions,
) -> Result<SimulationSummary> {
    match (kind, policy) {
        (PolicyKind::Srp, Some(p)) => {
            simulator::run(cfg, || Ok(Box::new(SrpPolicy::new(p)) as Box<dyn SlotPolicy>), options)
        }
        (PolicyKind::Srp, None) => Err(Error::Config("simulating the stationary policy needs a solved policy".into())),
        (k, _) => simulator::run(cfg, || k.heuristic(cfg), options),
    }
}

/// Per-user summary of solved policies, one row per `(mode, user)`.
pub fn write_solve_csv<W: Write>(policies: &[RandomizedPolicy], w: W) -> Result<()> {
    const HEADER: [&str; 12] = [
        "mode",
        "objective",
        "dual_value",
        "iterations",
        "converged",
        "feasible",
        "max_violation",
        "user",
        "delivery",
        "vaoi",
        "power",
        "distortion",
    ];
    let rows = policies.iter().flat_map(|p| {
        (0..p.space.num_users()).map(move |i| {
            vec![
                p.mode.to_string(),
                fmt6(p.objective),
                fmt6(p.dual_value),
                p.iterations.to_string(),
                p.converged.to_string(),
                p.feasible.to_string(),
                fmt6(p.max_violation),
                (i + 1).to_string(),
                fmt6(p.metrics.delivery[i]),
                fmt6(p.metrics.vaoi[i]),
                fmt6(p.metrics.power.average[i]),
                fmt6(p.metrics.distortion.average[i]),
            ]
        })
    });
    write_records(w, &HEADER, rows)
}

fn join<T: ToString>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// The action table of solved policies: per state, each action with its
/// probability. Decoding orders are 1-based.
pub fn write_policy_csv<W: Write>(policies: &[RandomizedPolicy], w: W) -> Result<()> {
    const HEADER: [&str; 7] = ["mode", "state", "gains", "rates", "order", "power", "prob"];
    let rows = policies.iter().flat_map(|p| {
        p.actions.iter().enumerate().flat_map(move |(s, acts)| {
            acts.iter().map(move |a| {
                vec![
                    p.mode.to_string(),
                    s.to_string(),
                    join(p.space.states[s].gains.iter().map(|&g| fmt6(g))),
                    join(&a.rates),
                    join(a.order.iter().map(|&i| i + 1)),
                    join(a.power.iter().map(|&x| fmt6(x))),
                    fmt6(a.prob),
                ]
            })
        })
    });
    write_records(w, &HEADER, rows)
}

/// One `(grid point, policy, mode)` result.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub variable: String,
    pub value: f64,
    pub policy: PolicyKind,
    pub mode: String,
    pub vaoi_analytic: Option<f64>,
    pub vaoi_sim: Option<MeanStd>,
    /// Largest per-user simulated average power.
    pub power_sim: Option<f64>,
    /// Largest per-user simulated average distortion.
    pub distortion_sim: Option<f64>,
    pub converged: bool,
    pub feasible: bool,
    /// Analytic and simulated VAoI disagree.
    pub flagged: bool,
}

impl SweepRow {
    pub const HEADER: [&'static str; 12] = [
        "sweep_var",
        "value",
        "policy",
        "mode",
        "vaoi_analytic",
        "vaoi_sim_mean",
        "vaoi_sim_std",
        "power_sim",
        "distortion_sim",
        "converged",
        "feasible",
        "flagged",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.variable.clone(),
            fmt6(self.value),
            self.policy.to_string(),
            self.mode.clone(),
            opt(self.vaoi_analytic),
            opt(self.vaoi_sim.map(|s| s.mean)),
            opt(self.vaoi_sim.map(|s| s.std)),
            opt(self.power_sim),
            opt(self.distortion_sim),
            self.converged.to_string(),
            self.feasible.to_string(),
            self.flagged.to_string(),
        ]
    }
}

/// Whether an analytic value and its simulated counterpart disagree.
pub fn disagrees(analytic: f64, simulated: f64) -> bool {
    (analytic - simulated).abs() > SIM_AGREEMENT * analytic.abs() + SIM_AGREEMENT_FLOOR
}

fn evaluate_point(
    spec: &ExperimentSpec,
    cfg: &SystemConfig,
    variable: &str,
    value: f64,
    kind: PolicyKind,
    mode: Option<SolveMode>,
) -> Result<SweepRow> {
    let options = RunOptions::new(spec.simulation.slots, spec.simulation.paths, spec.seed);
    let mut row = SweepRow {
        variable: variable.to_string(),
        value,
        policy: kind,
        mode: mode.map_or_else(|| heuristic_mode(kind).to_string(), |m| m.to_string()),
        vaoi_analytic: None,
        vaoi_sim: None,
        power_sim: None,
        distortion_sim: None,
        converged: true,
        feasible: true,
        flagged: false,
    };
    let policy = match mode {
        Some(m) => {
            let p = solve(cfg, &spec.solver, m)?;
            row.vaoi_analytic = Some(p.objective);
            row.converged = p.converged;
            row.feasible = p.feasible;
            Some(p)
        }
        None => None,
    };
    let simulate_it = spec.simulation.slots > 0 && !mode.is_some_and(|m| m.lower_bound) && row.feasible;
    if simulate_it {
        let s = simulate(cfg, kind, policy.as_ref(), options)?;
        row.vaoi_sim = Some(s.weighted_vaoi);
        row.power_sim = s.power.iter().map(|x| x.mean).reduce(f64::max);
        row.distortion_sim = s.distortion.iter().map(|x| x.mean).reduce(f64::max);
        if let Some(a) = row.vaoi_analytic {
            row.flagged = disagrees(a, s.weighted_vaoi.mean);
        }
    }
    Ok(row)
}

/// Work items of a sweep in output order.
fn sweep_tasks(spec: &ExperimentSpec) -> Vec<(f64, PolicyKind, Option<SolveMode>)> {
    let values = spec.sweep.as_ref().map_or_else(Vec::new, |s| s.values.clone());
    let mut tasks = Vec::new();
    for &v in &values {
        for &k in &spec.policies {
            if k == PolicyKind::Srp {
                tasks.extend(spec.modes.iter().map(|&m| (v, k, Some(m))));
            } else {
                tasks.push((v, k, None));
            }
        }
    }
    tasks
}

/// Solves and simulates every grid point; infeasible points yield rows with
/// `feasible = false` and the sweep carries on.
pub fn run_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    let sweep = spec.sweep.as_ref().ok_or_else(|| Error::Spec("sweep spec has no `sweep` section".into()))?;
    let base = spec.config()?;
    let tasks = sweep_tasks(spec);
    par::map_indexed(tasks.len(), |k| {
        let (v, kind, mode) = tasks[k];
        let cfg = sweep.variable.apply(&base, v)?;
        evaluate_point(spec, &cfg, sweep.variable.name(), v, kind, mode)
    })
    .into_iter()
    .collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], w: W) -> Result<()> {
    write_records(w, &SweepRow::HEADER, rows.iter().map(SweepRow::record))
}

/// A point of a two-user achievable region.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionRow {
    pub mode: SolveMode,
    pub w1: f64,
    pub w2: f64,
    pub vaoi1: f64,
    pub vaoi2: f64,
    pub converged: bool,
    pub feasible: bool,
}

impl RegionRow {
    pub const HEADER: [&'static str; 7] = ["mode", "w1", "w2", "vaoi_1", "vaoi_2", "converged", "feasible"];

    fn record(&self) -> Vec<String> {
        vec![
            self.mode.to_string(),
            fmt6(self.w1),
            fmt6(self.w2),
            fmt6(self.vaoi1),
            fmt6(self.vaoi2),
            self.converged.to_string(),
            self.feasible.to_string(),
        ]
    }
}

/// Traces per-user VAoI over the weight pairs for every mode in the spec.
pub fn run_region(spec: &ExperimentSpec) -> Result<Vec<RegionRow>> {
    let base = spec.config()?;
    if base.num_users != 2 {
        return Err(Error::Spec(format!("region tracing needs exactly two users, got {}", base.num_users)));
    }
    if spec.weight_pairs.is_empty() {
        return Err(Error::Spec("region spec has no weight pairs".into()));
    }
    let tasks: Vec<(SolveMode, [f64; 2])> =
        spec.modes.iter().flat_map(|&m| spec.weight_pairs.iter().map(move |&w| (m, w))).collect();
    par::map_indexed(tasks.len(), |k| {
        let (mode, [w1, w2]) = tasks[k];
        let mut cfg = base.clone();
        cfg.weight = vec![w1, w2];
        let p = solve(&cfg, &spec.solver, mode)?;
        Ok(RegionRow {
            mode,
            w1,
            w2,
            vaoi1: p.metrics.vaoi[0],
            vaoi2: p.metrics.vaoi[1],
            converged: p.converged,
            feasible: p.feasible,
        })
    })
    .into_iter()
    .collect()
}

pub fn write_region_csv<W: Write>(rows: &[RegionRow], w: W) -> Result<()> {
    write_records(w, &RegionRow::HEADER, rows.iter().map(RegionRow::record))
}

/// Timing and performance of one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRow {
    pub policy: PolicyKind,
    pub mode: String,
    pub offline_seconds: f64,
    pub online_nanos_per_slot: f64,
    pub vaoi_sim: MeanStd,
    pub vaoi_analytic: Option<f64>,
    pub feasible: bool,
}

impl BenchmarkRow {
    pub const HEADER: [&'static str; 8] = [
        "policy",
        "mode",
        "offline_s",
        "online_ns_per_slot",
        "vaoi_sim_mean",
        "vaoi_sim_std",
        "vaoi_analytic",
        "feasible",
    ];

    fn record(&self) -> Vec<String> {
        vec![
            self.policy.to_string(),
            self.mode.clone(),
            fmt6(self.offline_seconds),
            fmt6(self.online_nanos_per_slot),
            fmt6(self.vaoi_sim.mean),
            fmt6(self.vaoi_sim.std),
            opt(self.vaoi_analytic),
            self.feasible.to_string(),
        ]
    }
}

/// Runs each policy in turn (not concurrently, so timings do not compete)
/// with per-slot decision timing.
pub fn run_benchmark(spec: &ExperimentSpec) -> Result<Vec<BenchmarkRow>> {
    let cfg = spec.config()?;
    if spec.simulation.slots == 0 {
        return Err(Error::Spec("benchmark needs simulation slots".into()));
    }
    let mut options = RunOptions::new(spec.simulation.slots, spec.simulation.paths, spec.seed);
    options.time_decisions = true;
    let mut rows = Vec::new();
    for &kind in &spec.policies {
        if kind == PolicyKind::Srp {
            for &mode in &spec.modes {
                let start = Instant::now();
                let p = solve(&cfg, &spec.solver, mode)?;
                let offline = start.elapsed().as_secs_f64();
                let s = simulate(&cfg, kind, Some(&p), options)?;
                rows.push(BenchmarkRow {
                    policy: kind,
                    mode: mode.to_string(),
                    offline_seconds: offline,
                    online_nanos_per_slot: s.decision_nanos_per_slot,
                    vaoi_sim: s.weighted_vaoi,
                    vaoi_analytic: Some(p.objective),
                    feasible: p.feasible,
                });
            }
        } else {
            let s = simulate(&cfg, kind, None, options)?;
            rows.push(BenchmarkRow {
                policy: kind,
                mode: heuristic_mode(kind).to_string(),
                offline_seconds: 0.0,
                online_nanos_per_slot: s.decision_nanos_per_slot,
                vaoi_sim: s.weighted_vaoi,
                vaoi_analytic: None,
                feasible: true,
            });
        }
    }
    Ok(rows)
}

pub fn write_benchmark_csv<W: Write>(rows: &[BenchmarkRow], w: W) -> Result<()> {
    write_records(w, &BenchmarkRow::HEADER, rows.iter().map(BenchmarkRow::record))
}

/// Scheduling distribution of one channel state in the single-user study.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionRow {
    pub label: String,
    pub distortion_bound: f64,
    pub mode: SolveMode,
    pub gain: f64,
    /// `mu(h, rho)` for `rho = 0..=r_max`.
    pub mu: Vec<f64>,
    pub vaoi: f64,
    pub feasible: bool,
}

impl DistortionRow {
    fn record(&self) -> Vec<String> {
        let mut r = vec![self.label.clone(), fmt6(self.distortion_bound), self.mode.to_string(), fmt6(self.gain)];
        r.extend(self.mu.iter().map(|&x| fmt6(x)));
        r.push(fmt6(self.vaoi));
        r.push(self.feasible.to_string());
        r
    }
}

/// Solves the single-user system for every `(distortion function, bound)`
/// pair in the spec and reports `mu(h, rho)` per channel state.
pub fn run_distortion_study(spec: &ExperimentSpec) -> Result<Vec<DistortionRow>> {
    let base = spec.config()?;
    if base.num_users != 1 {
        return Err(Error::Spec(format!("the distortion study is single-user, got M = {}", base.num_users)));
    }
    let mode = *spec.modes.first().ok_or_else(|| Error::Spec("no solve mode given".into()))?;
    let tasks: Vec<(usize, f64)> = spec
        .distortion_cases
        .iter()
        .enumerate()
        .flat_map(|(c, case)| case.bounds.iter().map(move |&b| (c, b)))
        .collect();
    if tasks.is_empty() {
        return Err(Error::Spec("distortion study lists no cases".into()));
    }
    let per_task: Vec<Result<Vec<DistortionRow>>> = par::map_indexed(tasks.len(), |k| {
        let (c, bound) = tasks[k];
        let case = &spec.distortion_cases[c];
        let mut cfg = base.clone().with_distortion(case.function.clone());
        cfg.distortion_bound = vec![bound];
        cfg.validate()?;
        let p = solve(&cfg, &spec.solver, mode)?;
        let space = &p.space;
        Ok((0..space.num_states())
            .map(|s| {
                let mut mu = vec![0.0; cfg.r_max as usize + 1];
                for (r, rho) in space.rates.iter().enumerate() {
                    mu[rho.0[0] as usize] += p.scheduling.get(s, r);
                }
                DistortionRow {
                    label: case.label.clone(),
                    distortion_bound: bound,
                    mode,
                    gain: space.states[s].gains[0],
                    mu,
                    vaoi: p.objective,
                    feasible: p.feasible,
                }
            })
            .collect())
    });
    let mut rows = Vec::new();
    for r in per_task {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn write_distortion_csv<W: Write>(rows: &[DistortionRow], r_max: u32, w: W) -> Result<()> {
    let mut header: Vec<String> = ["distortion", "distortion_bound", "mode", "h"].map(String::from).to_vec();
    header.extend((0..=r_max).map(|r| format!("mu_rho{r}")));
    header.push("vaoi".into());
    header.push("feasible".into());
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    write_records(w, &header, rows.iter().map(DistortionRow::record))
}
