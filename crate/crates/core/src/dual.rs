//! Lagrangian dual decomposition of the stationary scheduling program.
//!
//! The power, distortion and linking constraints are dualized with
//! multipliers `(beta, alpha, nu)`. For fixed multipliers the Lagrangian
//! separates: per channel state the scheduling distribution puts its mass on
//! the rate vectors of least cost `A(h, rho)`, the power of each rate vector
//! is the SIC vertex selected by the optimal decoding order, and each
//! auxiliary `eta_i` has a closed form. The multipliers follow projected
//! subgradient ascent with step `s0 / k`; a feasible primal point is recovered
//! by averaging the primal minimizers over the tail of the run.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::analytics::{
    self, occupancy_denominator, PowerAccounting, PowerTable, SchedulingDistribution, StationaryMetrics,
};
use crate::convex::{AffineRow, BarrierSettings, Program, ReciprocalTerm};
use crate::error::{Error, Result};
use crate::model::{RateFunction, RateSet, RateVector, StateSpace, SystemConfig};
use crate::par;
use crate::sic::{self, DecodingOrder, PowerAllocation};

/// Constraint violation above which a solved policy is flagged infeasible.
pub const FEASIBILITY_TOL: f64 = 1e-3;

/// States times rate vectors below which the inner loop stays sequential.
const PARALLEL_MIN_WORK: usize = 4096;

/// Which rate vectors are allowed, how power is charged, and whether the
/// objective is halved (the lower-bound variant).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SolveMode {
    pub rate_set: RateSet,
    pub accounting: PowerAccounting,
    pub lower_bound: bool,
}

impl SolveMode {
    pub const NOMA_NO_PA: SolveMode =
        SolveMode { rate_set: RateSet::Full, accounting: PowerAccounting::WithoutAdjustment, lower_bound: false };
    pub const NOMA_PA: SolveMode =
        SolveMode { rate_set: RateSet::Full, accounting: PowerAccounting::WithAdjustment, lower_bound: false };
    pub const TDMA_NO_PA: SolveMode =
        SolveMode { rate_set: RateSet::Tdma, accounting: PowerAccounting::WithoutAdjustment, lower_bound: false };
    pub const TDMA_PA: SolveMode =
        SolveMode { rate_set: RateSet::Tdma, accounting: PowerAccounting::WithAdjustment, lower_bound: false };

    pub const ALL: [SolveMode; 4] = [Self::NOMA_NO_PA, Self::NOMA_PA, Self::TDMA_NO_PA, Self::TDMA_PA];

    /// Same mode with the objective halved.
    pub fn lower_bound(self) -> Self {
        SolveMode { lower_bound: true, ..self }
    }

    pub fn objective_scale(self) -> f64 {
        if self.lower_bound {
            0.5
        } else {
            1.0
        }
    }
}

impl fmt::Display for SolveMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let access = match self.rate_set {
            RateSet::Full => "noma",
            RateSet::Tdma => "tdma",
        };
        let pa = match self.accounting {
            PowerAccounting::WithAdjustment => "pa",
            PowerAccounting::WithoutAdjustment => "no-pa",
        };
        if self.lower_bound {
            write!(f, "{access}-{pa}-lower-bound")
        } else {
            write!(f, "{access}-{pa}")
        }
    }
}

impl FromStr for SolveMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('_', "-");
        let (base, lb) = match norm.strip_suffix("-lower-bound") {
            Some(b) => (b, true),
            None if norm == "lower-bound" => ("noma-pa", true),
            None => (norm.as_str(), false),
        };
        let mode = match base {
            "noma-no-pa" | "noma" => Self::NOMA_NO_PA,
            "noma-pa" => Self::NOMA_PA,
            "tdma-no-pa" | "tdma" => Self::TDMA_NO_PA,
            "tdma-pa" => Self::TDMA_PA,
            _ => return Err(Error::Config(format!("unknown solve mode `{s}`"))),
        };
        Ok(if lb { mode.lower_bound() } else { mode })
    }
}

impl Serialize for SolveMode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for SolveMode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Subgradient-ascent settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    /// `s0` in the step rule `s_k = s0 / k`.
    pub step_scale: f64,
    /// Stop once the running-best dual value gains less than this over
    /// `convergence_window` iterations.
    pub tolerance: f64,
    /// Floor `eps_r` inside the closed-form `eta` update.
    pub regularization: f64,
    /// Minimum number of iterations whose primal minimizers are averaged.
    pub averaging_window: usize,
    pub max_iterations: usize,
    /// Rate vectors whose cost is within this of the minimum share the mass.
    pub tie_tolerance: f64,
    pub convergence_window: usize,
    /// Stand-in for `w_i lambda_i` when it is zero.
    pub min_weight: f64,
    /// Keep a per-iteration log.
    pub record_log: bool,
    /// How the deployable policy is recovered from the dual run.
    pub recovery: Recovery,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            step_scale: 1.0,
            tolerance: 1e-6,
            regularization: 1e-8,
            averaging_window: 500,
            max_iterations: 50_000,
            tie_tolerance: 1e-9,
            convergence_window: 50,
            min_weight: 1e-6,
            record_log: false,
            recovery: Recovery::Refined,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("step_scale", self.step_scale),
            ("tolerance", self.tolerance),
            ("regularization", self.regularization),
            ("tie_tolerance", self.tie_tolerance),
            ("min_weight", self.min_weight),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("solver {name} must be positive and finite, got {v}")));
            }
        }
        if self.averaging_window == 0 || self.max_iterations == 0 || self.convergence_window == 0 {
            return Err(Error::Config("solver iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

/// Primal recovery after the subgradient run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Recovery {
    /// Ergodic average of the primal minimizers over the averaging window.
    Ergodic,
    /// Re-optimize the mixture weights over the actions seen in the
    /// averaging window, pricing in further actions with the same per-state
    /// subproblem until none improves.
    Refined,
}

/// Power, distortion and linking multipliers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualVariables {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub nu: Vec<f64>,
}

impl DualVariables {
    pub fn constant(m: usize, v: f64) -> Self {
        DualVariables { beta: vec![v; m], alpha: vec![v; m], nu: vec![v; m] }
    }

    pub fn is_nonnegative(&self) -> bool {
        self.beta.iter().chain(&self.alpha).chain(&self.nu).all(|&x| x >= 0.0)
    }
}

/// Subgradient of the dual function, one component per multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Subgradient {
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
    pub nu: Vec<f64>,
}

impl Subgradient {
    /// Largest positive component: the worst constraint violation.
    pub fn max_violation(&self) -> f64 {
        self.beta.iter().chain(&self.alpha).chain(&self.nu).fold(f64::NEG_INFINITY, |a, &b| a.max(b))
    }
}

/// `[x + s zeta]^+` component-wise.
pub fn update_duals(duals: &DualVariables, g: &Subgradient, step: f64) -> DualVariables {
    let up = |x: &[f64], z: &[f64]| -> Vec<f64> { x.iter().zip(z).map(|(a, b)| (a + step * b).max(0.0)).collect() };
    DualVariables { beta: up(&duals.beta, &g.beta), alpha: up(&duals.alpha, &g.alpha), nu: up(&duals.nu, &g.nu) }
}

/// One scheduled rate vector in a state, with the decoding order and powers
/// that realize it.
#[derive(Debug, Clone, PartialEq)]
pub struct ScheduledAction {
    pub rate_index: usize,
    pub order: DecodingOrder,
    pub power: PowerAllocation,
}

/// Lagrangian minimizer for one set of multipliers.
#[derive(Debug, Clone)]
pub struct PrimalSolution {
    pub mu: SchedulingDistribution,
    /// Minimizing rate vectors per state; `mu` is uniform over them.
    pub support: Vec<Vec<ScheduledAction>>,
    /// Least action cost per state.
    pub min_cost: Vec<f64>,
    pub eta: Vec<f64>,
}

impl PrimalSolution {
    /// `pi_i(h, rho) = mu(h, rho) f_i(h, rho)` summed over states and rates,
    /// weighted by the state probabilities.
    pub fn expected_power(&self, space: &StateSpace) -> Vec<f64> {
        let mut e = vec![0.0; space.num_users()];
        for (s, acts) in self.support.iter().enumerate() {
            let w = space.states[s].prob / acts.len() as f64;
            for a in acts {
                for (ei, f) in e.iter_mut().zip(&a.power.0) {
                    *ei += w * f;
                }
            }
        }
        e
    }
}

/// Dual problem for one configuration and mode.
#[derive(Debug, Clone)]
pub struct DualProblem<'a> {
    cfg: &'a SystemConfig,
    space: StateSpace,
    mode: SolveMode,
    solver: SolverConfig,
    /// Scaled `w_i lambda_i`, as it enters the objective.
    obj_weight: Vec<f64>,
    /// Scaled `max(w_i lambda_i, min_weight)`, as it enters the `eta` update.
    eta_weight: Vec<f64>,
    /// `g^-1(b)` for every integer `b` up to `M r_max`.
    ginv: Vec<f64>,
    exhaustive_orders: bool,
    tie_tolerance: f64,
    regularization: f64,
}

impl<'a> DualProblem<'a> {
    pub fn new(cfg: &'a SystemConfig, solver: &SolverConfig, mode: SolveMode) -> Result<Self> {
        solver.validate()?;
        let space = StateSpace::new(cfg, mode.rate_set)?;
        let scale = mode.objective_scale();
        let m = cfg.num_users;
        let obj_weight: Vec<f64> = (0..m).map(|i| scale * (cfg.weight[i] * cfg.arrival_prob[i])).collect();
        let eta_weight =
            (0..m).map(|i| scale * (cfg.weight[i] * cfg.arrival_prob[i]).max(solver.min_weight)).collect();
        let max_bits = m as u32 * cfg.r_max;
        let ginv = (0..=max_bits).map(|b| cfg.rate.inverse(f64::from(b))).collect();
        let exhaustive_orders = !cfg.rate.is_default_shannon() && m <= sic::BRUTE_FORCE_MAX_USERS;
        Ok(DualProblem {
            cfg,
            space,
            mode,
            solver: solver.clone(),
            obj_weight,
            eta_weight,
            ginv,
            exhaustive_orders,
            tie_tolerance: scale * solver.tie_tolerance,
            regularization: scale * solver.regularization,
        })
    }

    pub fn space(&self) -> &StateSpace {
        &self.space
    }

    pub fn mode(&self) -> SolveMode {
        self.mode
    }

    /// Initial multipliers (all ones, halved for the lower-bound variant).
    pub fn initial_duals(&self) -> DualVariables {
        DualVariables::constant(self.cfg.num_users, self.mode.objective_scale())
    }

    fn pa(&self) -> bool {
        self.mode.accounting == PowerAccounting::WithAdjustment
    }

    /// Weights on transmit power in the per-slot power subproblem.
    fn power_weights(&self, duals: &DualVariables) -> Vec<f64> {
        if self.pa() {
            duals.beta.iter().zip(&self.cfg.arrival_prob).map(|(b, l)| b * l).collect()
        } else {
            duals.beta.clone()
        }
    }

    /// Cost of scheduling user `i` at `bits > 0`, apart from its power.
    fn activation_costs(&self, duals: &DualVariables) -> Vec<Vec<f64>> {
        let cfg = self.cfg;
        (0..cfg.num_users)
            .map(|i| {
                let l = cfg.arrival_prob[i];
                let mut fixed = -duals.nu[i];
                if self.pa() {
                    fixed -= duals.beta[i] * cfg.power_bound[i] * (1.0 - l);
                }
                (0..=cfg.r_max as usize)
                    .map(|b| if b == 0 { 0.0 } else { fixed + duals.alpha[i] * l * self.space.distortion[b] })
                    .collect()
            })
            .collect()
    }

    fn vertex(&self, h: &[f64], rho: &[u32], weights: &[f64], order: &mut Vec<usize>, f: &mut [f64]) {
        if self.exhaustive_orders {
            let rv = RateVector(rho.to_vec());
            let (best, _) = sic::brute_force_decoding_order(h, &rv, weights, &self.cfg.rate)
                .expect("user count checked against the brute-force limit");
            *order = best.0;
        } else {
            sic::optimal_decoding_order_into(h, rho, weights, order);
        }
        self.vertex_powers(h, rho, order, f);
    }

    /// Vertex powers from the tabulated `g^-1`.
    fn vertex_powers(&self, h: &[f64], rho: &[u32], order: &[usize], f: &mut [f64]) {
        let mut tail_bits = 0usize;
        let mut tail_power = 0.0;
        for &u in order.iter().rev() {
            if rho[u] == 0 {
                f[u] = 0.0;
                continue;
            }
            tail_bits += rho[u] as usize;
            let need = self.ginv[tail_bits];
            f[u] = ((need - tail_power) / h[u]).max(0.0);
            tail_power = need;
        }
    }

    /// `A(h, rho)` for state `s` and rate vector `r`.
    pub fn action_cost(&self, s: usize, r: usize, duals: &DualVariables) -> f64 {
        let weights = self.power_weights(duals);
        let act = self.activation_costs(duals);
        let m = self.cfg.num_users;
        let mut order = Vec::with_capacity(m);
        let mut f = vec![0.0; m];
        self.cost_with(s, r, &weights, &act, &mut order, &mut f)
    }

    fn cost_with(
        &self,
        s: usize,
        r: usize,
        weights: &[f64],
        act: &[Vec<f64>],
        order: &mut Vec<usize>,
        f: &mut [f64],
    ) -> f64 {
        let rho = &self.space.rates[r].0;
        self.vertex(&self.space.states[s].gains, rho, weights, order, f);
        let mut a = 0.0;
        for i in 0..rho.len() {
            if rho[i] > 0 {
                a += weights[i] * f[i] + act[i][rho[i] as usize];
            }
        }
        a
    }

    fn column_cost(&self, c: &Column, weights: &[f64], act: &[Vec<f64>], f: &mut [f64]) -> f64 {
        let rho = &self.space.rates[c.rate_index].0;
        self.vertex_powers(&self.space.states[c.state].gains, rho, &c.order, f);
        (0..rho.len()).filter(|&i| rho[i] > 0).map(|i| weights[i] * f[i] + act[i][rho[i] as usize]).sum()
    }

    fn minimize_state(&self, s: usize, weights: &[f64], act: &[Vec<f64>]) -> (f64, Vec<ScheduledAction>) {
        let m = self.cfg.num_users;
        let nr = self.space.num_rates();
        let mut order = Vec::with_capacity(m);
        let mut f = vec![0.0; m];
        let mut costs = Vec::with_capacity(nr);
        for r in 0..nr {
            costs.push(self.cost_with(s, r, weights, act, &mut order, &mut f));
        }
        let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
        let support = (0..nr)
            .filter(|&r| costs[r] <= best + self.tie_tolerance)
            .map(|r| {
                self.cost_with(s, r, weights, act, &mut order, &mut f);
                ScheduledAction { rate_index: r, order: DecodingOrder(order.clone()), power: PowerAllocation(f.clone()) }
            })
            .collect();
        (best, support)
    }

    /// Scheduling distribution and vertex powers minimizing the Lagrangian.
    pub fn optimize_mu(&self, duals: &DualVariables) -> (SchedulingDistribution, Vec<Vec<ScheduledAction>>, Vec<f64>) {
        let weights = self.power_weights(duals);
        let act = self.activation_costs(duals);
        let ns = self.space.num_states();
        let nr = self.space.num_rates();
        let per_state = par::map_indexed_min(ns, PARALLEL_MIN_WORK / nr.max(1), |s| self.minimize_state(s, &weights, &act));
        let mut mu = SchedulingDistribution::zeros(ns, nr);
        let mut support = Vec::with_capacity(ns);
        let mut min_cost = Vec::with_capacity(ns);
        for (s, (c, acts)) in per_state.into_iter().enumerate() {
            let w = 1.0 / acts.len() as f64;
            for a in &acts {
                mu.set(s, a.rate_index, w);
            }
            support.push(acts);
            min_cost.push(c);
        }
        (mu, support, min_cost)
    }

    /// `eta_i = sqrt(max(nu_i - alpha_i Dbar_i (1 - lambda_i), eps_r) / (w_i lambda_i))`.
    pub fn optimize_eta(&self, duals: &DualVariables) -> Vec<f64> {
        let cfg = self.cfg;
        (0..cfg.num_users)
            .map(|i| {
                let c = duals.nu[i] - duals.alpha[i] * cfg.distortion_bound[i] * (1.0 - cfg.arrival_prob[i]);
                (c.max(self.regularization) / self.eta_weight[i]).sqrt()
            })
            .collect()
    }

    /// Lagrangian minimizer for the given multipliers.
    pub fn minimize(&self, duals: &DualVariables) -> PrimalSolution {
        let (mu, support, min_cost) = self.optimize_mu(duals);
        PrimalSolution { mu, support, min_cost, eta: self.optimize_eta(duals) }
    }

    /// Constraint residuals at `primal`; these are a subgradient of the dual
    /// function when `primal` minimizes the Lagrangian.
    pub fn subgradients(&self, primal: &PrimalSolution) -> Subgradient {
        let cfg = self.cfg;
        let p = analytics::delivery_probability(&self.space, &primal.mu);
        let dist = analytics::average_distortion(cfg, &self.space, &primal.mu);
        let epi = primal.expected_power(&self.space);
        let m = cfg.num_users;
        let mut g = Subgradient { beta: vec![0.0; m], alpha: vec![0.0; m], nu: vec![0.0; m] };
        for i in 0..m {
            let l = cfg.arrival_prob[i];
            g.beta[i] = if self.pa() {
                l * epi[i] - cfg.power_bound[i] * occupancy_denominator(l, p[i])
            } else {
                epi[i] - cfg.power_bound[i]
            };
            let inv_eta = 1.0 / primal.eta[i];
            g.alpha[i] = dist.primed[i] - cfg.distortion_bound[i] * (l + (1.0 - l) * inv_eta);
            g.nu[i] = inv_eta - p[i];
        }
        g
    }

    /// Lagrangian value at `(duals, primal)`.
    pub fn lagrangian(&self, duals: &DualVariables, primal: &PrimalSolution) -> f64 {
        let g = self.subgradients(primal);
        self.lagrangian_from(duals, primal, &g)
    }

    fn lagrangian_from(&self, duals: &DualVariables, primal: &PrimalSolution, g: &Subgradient) -> f64 {
        let mut z = 0.0;
        for i in 0..self.cfg.num_users {
            z += self.obj_weight[i] * (primal.eta[i] - 1.0);
            z += duals.nu[i] * g.nu[i] + duals.beta[i] * g.beta[i] + duals.alpha[i] * g.alpha[i];
        }
        z
    }

    /// Dual function `z(beta, alpha, nu)`.
    pub fn dual_value(&self, duals: &DualVariables) -> f64 {
        let primal = self.minimize(duals);
        self.lagrangian(duals, &primal)
    }
}

/// One row of the optional iteration log.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub dual_value: f64,
    pub best_dual_value: f64,
    pub max_violation: f64,
}

/// One action of a randomized policy: rate vector, decoding order, powers.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyAction {
    pub rates: Vec<u32>,
    pub order: Vec<usize>,
    pub power: Vec<f64>,
    pub prob: f64,
}

/// Deployable stationary randomized policy with its analytic performance.
#[derive(Debug, Clone)]
pub struct RandomizedPolicy {
    pub mode: SolveMode,
    pub space: StateSpace,
    /// Per state, a distribution over actions.
    pub actions: Vec<Vec<PolicyAction>>,
    pub scheduling: SchedulingDistribution,
    pub power: PowerTable,
    pub metrics: StationaryMetrics,
    /// Weighted VAoI of the policy (halved for the lower-bound variant).
    pub objective: f64,
    pub dual_value: f64,
    pub duals: DualVariables,
    pub iterations: usize,
    pub converged: bool,
    pub max_violation: f64,
    pub feasible: bool,
    pub log: Vec<IterationRecord>,
    /// Objective and worst violation of the plain ergodic average, before
    /// refinement.
    pub ergodic_objective: f64,
    pub ergodic_violation: f64,
    cumulative: Vec<Vec<f64>>,
}

impl RandomizedPolicy {
    /// Builds a policy from explicit per-state action lists. Probabilities
    /// are renormalized; powers are taken as given.
    pub fn from_actions(
        cfg: &SystemConfig,
        space: StateSpace,
        mode: SolveMode,
        actions: Vec<Vec<PolicyAction>>,
    ) -> Result<Self> {
        if actions.len() != space.num_states() {
            return Err(Error::Config(format!(
                "policy has {} states, the configuration has {}",
                actions.len(),
                space.num_states()
            )));
        }
        let m = space.num_users();
        let mut actions = actions;
        let mut mu = SchedulingDistribution::zeros(space.num_states(), space.num_rates());
        let mut power = PowerTable::zeros(space.num_states(), space.num_rates(), m);
        for (s, acts) in actions.iter_mut().enumerate() {
            let total: f64 = acts.iter().map(|a| a.prob).sum();
            if acts.is_empty() || total <= 0.0 {
                *acts = vec![PolicyAction { rates: vec![0; m], order: (0..m).collect(), power: vec![0.0; m], prob: 1.0 }];
            } else {
                for a in acts.iter_mut() {
                    a.prob /= total;
                }
            }
            for a in acts.iter() {
                let r = space
                    .rate_index(&RateVector(a.rates.clone()))
                    .ok_or_else(|| Error::Config(format!("rate vector {:?} not in the rate set", a.rates)))?;
                mu.set(s, r, mu.get(s, r) + a.prob);
                for (acc, f) in power.get_mut(s, r).iter_mut().zip(&a.power) {
                    *acc += a.prob * f;
                }
            }
            for r in 0..space.num_rates() {
                let q = mu.get(s, r);
                if q > 0.0 {
                    for x in power.get_mut(s, r) {
                        *x /= q;
                    }
                }
            }
        }
        let metrics = StationaryMetrics::evaluate(cfg, &space, &mu, &power, mode.accounting);
        let max_violation = metrics.max_violation();
        let cumulative = actions
            .iter()
            .map(|acts| {
                acts.iter()
                    .scan(0.0, |c, a| {
                        *c += a.prob;
                        Some(*c)
                    })
                    .collect()
            })
            .collect();
        Ok(RandomizedPolicy {
            mode,
            space,
            actions,
            objective: mode.objective_scale() * metrics.objective,
            scheduling: mu,
            power,
            metrics,
            dual_value: f64::NAN,
            duals: DualVariables::constant(m, 0.0),
            iterations: 0,
            converged: true,
            max_violation,
            feasible: max_violation <= FEASIBILITY_TOL,
            log: Vec::new(),
            ergodic_objective: f64::NAN,
            ergodic_violation: f64::NAN,
            cumulative,
        })
    }

    /// Action index for state `s` given a uniform draw `u` in `[0, 1)`.
    pub fn sample_action(&self, s: usize, u: f64) -> &PolicyAction {
        let cum = &self.cumulative[s];
        let k = cum.partition_point(|&c| c <= u).min(cum.len() - 1);
        &self.actions[s][k]
    }

    /// Writes the iteration log as CSV.
    pub fn write_log_csv<W: std::io::Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,dual_value,best_dual_value,max_violation")?;
        for r in &self.log {
            writeln!(
                w,
                "{},{},{},{}",
                r.iteration,
                fmt6(r.dual_value),
                fmt6(r.best_dual_value),
                fmt6(r.max_violation)
            )?;
        }
        Ok(())
    }
}

/// Six significant digits.
pub fn fmt6(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.5e}").parse::<f64>().map_or_else(|_| x.to_string(), |v| format!("{v}"))
    } else {
        x.to_string()
    }
}

/// Runs the subgradient method and extracts a randomized policy.
pub fn solve(cfg: &SystemConfig, solver: &SolverConfig, mode: SolveMode) -> Result<RandomizedPolicy> {
    let problem = DualProblem::new(cfg, solver, mode)?;
    let run = subgradient_ascent(&problem);
    let ergodic = extract_policy(cfg, &problem, &run.average)?;
    let mut policy = match solver.recovery {
        Recovery::Ergodic => ergodic,
        Recovery::Refined => {
            let mut seed = run.average.columns();
            seed.extend(run.last_support);
            let (columns, weights, duals) = refine(&problem, seed)?;
            let mut p = policy_from_columns(cfg, &problem, &columns, &weights)?;
            let z = problem.dual_value(&duals);
            p.dual_value = z;
            p.duals = duals;
            p.ergodic_objective = ergodic.objective;
            p.ergodic_violation = ergodic.max_violation;
            p
        }
    };
    if !(policy.dual_value >= run.best_value) {
        policy.dual_value = run.best_value;
        policy.duals = run.best_duals.clone();
    }
    policy.iterations = run.iterations;
    policy.converged = run.converged;
    policy.log = run.log;
    if !policy.objective.is_finite() {
        policy.feasible = false;
    }
    Ok(policy)
}

/// Outcome of the subgradient phase.
#[derive(Debug, Clone)]
pub struct AscentRun {
    pub best_value: f64,
    pub best_duals: DualVariables,
    pub final_duals: DualVariables,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
    average: ErgodicAverage,
    last_support: Vec<Column>,
}

/// Projected subgradient ascent with step `s0 / k` from the initial
/// multipliers, followed by an averaging window once the running-best dual
/// value has settled.
pub fn subgradient_ascent(problem: &DualProblem<'_>) -> AscentRun {
    let solver = &problem.solver;
    let scale = problem.mode.objective_scale();
    let window = solver.convergence_window;

    let mut duals = problem.initial_duals();
    let mut best = f64::NEG_INFINITY;
    let mut best_duals = duals.clone();
    let mut best_hist: Vec<f64> = Vec::new();
    let mut log = Vec::new();
    let mut avg = ErgodicAverage::new();
    let mut converged_at: Option<usize> = None;
    let mut k = 0usize;
    let last_support = loop {
        k += 1;
        let primal = problem.minimize(&duals);
        let g = problem.subgradients(&primal);
        let z = problem.lagrangian_from(&duals, &primal, &g);
        if z > best {
            best = z;
            best_duals = duals.clone();
        }
        best_hist.push(best);
        if solver.record_log {
            log.push(IterationRecord { iteration: k, dual_value: z, best_dual_value: best, max_violation: g.max_violation() });
        }
        if converged_at.is_none() && k > window && best - best_hist[k - 1 - window] < scale * solver.tolerance {
            converged_at = Some(k);
        }
        let averaging = match converged_at {
            Some(_) => true,
            None => k + solver.averaging_window > solver.max_iterations,
        };
        if averaging {
            avg.add(&primal, 1.0);
        }
        let done = match converged_at {
            Some(c) => k + 1 >= c + solver.averaging_window,
            None => k >= solver.max_iterations,
        };
        if done {
            break Column::from_primal(&primal);
        }
        duals = update_duals(&duals, &g, scale * solver.step_scale / k as f64);
    };
    AscentRun {
        best_value: best,
        best_duals,
        final_duals: duals,
        iterations: k,
        converged: converged_at.is_some(),
        log,
        average: avg,
        last_support,
    }
}

/// Running sums over the averaging window.
#[derive(Debug, Clone)]
struct ErgodicAverage {
    weight: f64,
    orders: BTreeMap<(usize, usize, Vec<usize>), f64>,
}

impl ErgodicAverage {
    fn new() -> Self {
        ErgodicAverage { weight: 0.0, orders: BTreeMap::new() }
    }

    fn add(&mut self, primal: &PrimalSolution, w: f64) {
        self.weight += w;
        for (s, acts) in primal.support.iter().enumerate() {
            let q = w / acts.len() as f64;
            for a in acts {
                *self.orders.entry((s, a.rate_index, a.order.0.clone())).or_insert(0.0) += q;
            }
        }
    }

    fn columns(&self) -> Vec<Column> {
        self.orders.keys().map(|(s, r, o)| Column { state: *s, rate_index: *r, order: o.clone() }).collect()
    }
}

/// A candidate action `(state, rate vector, decoding order)`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
struct Column {
    state: usize,
    rate_index: usize,
    order: Vec<usize>,
}

impl Column {
    fn from_primal(primal: &PrimalSolution) -> Vec<Column> {
        primal
            .support
            .iter()
            .enumerate()
            .flat_map(|(s, acts)| {
                acts.iter().map(move |a| Column { state: s, rate_index: a.rate_index, order: a.order.0.clone() })
            })
            .collect()
    }
}

/// Decoding-order frequencies over the averaging window, weighted by the
/// scheduling mass they carried.
fn extract_policy(cfg: &SystemConfig, problem: &DualProblem<'_>, avg: &ErgodicAverage) -> Result<RandomizedPolicy> {
    let (columns, weights): (Vec<Column>, Vec<f64>) = avg
        .orders
        .iter()
        .map(|((s, r, o), &q)| (Column { state: *s, rate_index: *r, order: o.clone() }, q / avg.weight))
        .unzip();
    policy_from_columns(cfg, problem, &columns, &weights)
}

fn policy_from_columns(
    cfg: &SystemConfig,
    problem: &DualProblem<'_>,
    columns: &[Column],
    weights: &[f64],
) -> Result<RandomizedPolicy> {
    let space = problem.space.clone();
    let mut actions: Vec<Vec<PolicyAction>> = vec![Vec::new(); space.num_states()];
    for (c, &q) in columns.iter().zip(weights) {
        if q <= 0.0 {
            continue;
        }
        let rho = &space.rates[c.rate_index];
        let theta = DecodingOrder(c.order.clone());
        let f = sic::sic_power_allocation(&space.states[c.state].gains, rho, &theta, &cfg.rate);
        actions[c.state].push(PolicyAction { rates: rho.0.clone(), order: c.order.clone(), power: f.0, prob: q });
    }
    for (s, acts) in actions.iter_mut().enumerate() {
        let mass: f64 = acts.iter().map(|a| a.prob).sum();
        let zero = RateVector::zeros(space.num_users());
        if mass < 1.0 - 1e-12 && !acts.iter().any(|a| a.rates == zero.0) {
            let m = space.num_users();
            acts.push(PolicyAction { rates: zero.0.clone(), order: (0..m).collect(), power: vec![0.0; m], prob: 1.0 - mass });
        }
        let _ = s;
        acts.sort_by(|a, b| a.rates.cmp(&b.rates).then_with(|| a.order.cmp(&b.order)));
    }
    RandomizedPolicy::from_actions(cfg, space, problem.mode, actions)
}

/// Mass below which a refined action is dropped.
const PRUNE_MASS: f64 = 1e-9;
const MAX_PRICING_ROUNDS: usize = 200;

/// Restricted mixture problem over `columns`, extended by pricing until no
/// action has lower Lagrangian cost than the current mixture.
fn refine(problem: &DualProblem<'_>, seed: Vec<Column>) -> Result<(Vec<Column>, Vec<f64>, DualVariables)> {
    let space = &problem.space;
    let m = space.num_users();
    let mut columns: Vec<Column> = seed.into_iter().filter(|c| !space.rates[c.rate_index].is_zero()).collect();
    // one single-user column per (state, user) keeps every user reachable
    for s in 0..space.num_states() {
        for i in 0..m {
            let mut rho = vec![0; m];
            rho[i] = problem.cfg.r_max;
            if let Some(r) = space.rate_index(&RateVector(rho)) {
                columns.push(Column { state: s, rate_index: r, order: (0..m).collect() });
            }
        }
    }
    columns.sort();
    columns.dedup();

    let mut duals = problem.initial_duals();
    let mut weights = Vec::new();
    for _ in 0..MAX_PRICING_ROUNDS {
        let master = RestrictedMaster::build(problem, &columns);
        let Some((x, d)) = master.solve()? else {
            return Ok((columns.clone(), vec![0.0; columns.len()], problem.initial_duals()));
        };
        weights = x;
        duals = d;
        // pricing
        let primal = problem.minimize(&duals);
        let pw = problem.power_weights(&duals);
        let act = problem.activation_costs(&duals);
        let mut restricted_min = vec![0.0f64; space.num_states()];
        let mut f = vec![0.0; m];
        for c in &columns {
            let a = problem.column_cost(c, &pw, &act, &mut f);
            restricted_min[c.state] = restricted_min[c.state].min(a);
        }
        let mut added = false;
        for (s, acts) in primal.support.iter().enumerate() {
            let tol = 1e-9 * (1.0 + restricted_min[s].abs());
            if primal.min_cost[s] < restricted_min[s] - tol {
                for a in acts {
                    if space.rates[a.rate_index].is_zero() {
                        continue;
                    }
                    let col = Column { state: s, rate_index: a.rate_index, order: a.order.0.clone() };
                    if let Err(pos) = columns.binary_search(&col) {
                        columns.insert(pos, col);
                        weights.insert(pos, 0.0);
                        added = true;
                    }
                }
            }
        }
        if !added {
            break;
        }
    }
    for w in weights.iter_mut() {
        if *w < PRUNE_MASS {
            *w = 0.0;
        }
    }
    Ok((columns, weights, duals))
}

/// Mixture weights `x_c` over nonzero-rate columns; the all-zero rate vector
/// takes the remaining mass in each state.
struct RestrictedMaster<'p> {
    program: Program,
    power_row: Vec<Option<usize>>,
    distortion_row: Vec<Option<usize>>,
    delivery: Vec<AffineRow>,
    problem: &'p DualProblem<'p>,
}

impl<'p> RestrictedMaster<'p> {
    fn build(problem: &'p DualProblem<'p>, columns: &[Column]) -> Self {
        let cfg = problem.cfg;
        let space = &problem.space;
        let m = cfg.num_users;
        let n = columns.len();
        let pa = problem.pa();
        let mut program = Program::new(n);
        let mut power: Vec<AffineRow> = (0..m)
            .map(|i| AffineRow::new(if pa { cfg.power_bound[i] * cfg.arrival_prob[i] } else { cfg.power_bound[i] }))
            .collect();
        let mut distortion: Vec<AffineRow> =
            (0..m).map(|i| AffineRow::new(cfg.distortion_bound[i] * cfg.arrival_prob[i])).collect();
        let mut delivery: Vec<AffineRow> = (0..m).map(|_| AffineRow::new(0.0)).collect();
        let mut simplex: Vec<AffineRow> = (0..space.num_states()).map(|_| AffineRow::new(1.0)).collect();
        let mut f = vec![0.0; m];
        for (c, col) in columns.iter().enumerate() {
            let st = &space.states[col.state];
            let rho = &space.rates[col.rate_index].0;
            sic::sic_power_allocation_into(&st.gains, rho, &col.order, &cfg.rate, &mut f);
            let mut nonneg = AffineRow::new(0.0);
            nonneg.push(c, -1.0);
            program.rows.push(nonneg);
            simplex[col.state].push(c, 1.0);
            for i in 0..m {
                if rho[i] == 0 {
                    continue;
                }
                let l = cfg.arrival_prob[i];
                let pw = if pa { l * f[i] - cfg.power_bound[i] * (1.0 - l) } else { f[i] };
                power[i].push(c, st.prob * pw);
                let d = l * space.distortion[rho[i] as usize] - cfg.distortion_bound[i] * (1.0 - l);
                distortion[i].push(c, st.prob * d);
                delivery[i].push(c, st.prob);
            }
        }
        program.rows.extend(simplex.into_iter().filter(|r| !r.is_trivial()));
        let push_opt = |row: AffineRow, program: &mut Program| -> Option<usize> {
            if row.is_trivial() {
                None
            } else {
                program.rows.push(row);
                Some(program.rows.len() - 1)
            }
        };
        let power_row = power.into_iter().map(|r| push_opt(r, &mut program)).collect();
        let distortion_row = distortion.into_iter().map(|r| push_opt(r, &mut program)).collect();
        for i in 0..m {
            let w = problem.obj_weight[i];
            if w > 0.0 {
                program.reciprocal_terms.push(ReciprocalTerm { weight: w, row: delivery[i].clone() });
                program.constant -= w;
            }
        }
        RestrictedMaster { program, power_row, distortion_row, delivery, problem }
    }

    /// Optimal weights and the multipliers they certify, or `None` without a
    /// strictly feasible mixture.
    fn solve(&self) -> Result<Option<(Vec<f64>, DualVariables)>> {
        let cfg = self.problem.cfg;
        let m = cfg.num_users;
        if self.program.rows.iter().any(|r| r.is_trivial() && r.rhs < 0.0)
            || self.program.reciprocal_terms.iter().any(|t| t.row.is_trivial())
        {
            return Ok(None);
        }
        let settings = BarrierSettings { gap: 1e-9 * self.problem.mode.objective_scale(), ..Default::default() };
        let x0 = vec![0.0; self.program.dim];
        let Some(sol) = self.program.solve(&x0, &settings)? else {
            return Ok(None);
        };
        let dual_of = |r: Option<usize>| r.map_or(0.0, |k| sol.row_duals[k]);
        let mut duals = DualVariables::constant(m, 0.0);
        for i in 0..m {
            duals.beta[i] = dual_of(self.power_row[i]);
            duals.alpha[i] = dual_of(self.distortion_row[i]);
            let p = self.delivery[i].dot(&sol.x);
            let w = self.problem.obj_weight[i];
            let link = if w > 0.0 { w / (p * p) } else { 0.0 };
            duals.nu[i] = link + duals.alpha[i] * cfg.distortion_bound[i] * (1.0 - cfg.arrival_prob[i]);
        }
        Ok(Some((sol.x, duals)))
    }
}
