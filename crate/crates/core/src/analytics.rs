//! Stationary performance of a stationary randomized policy.
//!
//! A policy is summarized by a scheduling distribution `mu(h, rho)` and a
//! table of expected transmit powers per `(h, rho)`. Everything here is a
//! closed-form function of those two tables and the system parameters.

use serde::{Deserialize, Serialize};

use crate::dual::{self, SolveMode, SolverConfig};
use crate::error::Result;
use crate::model::{StateSpace, SystemConfig};

/// Tolerance for primed-constraint satisfaction checks.
pub const CONSTRAINT_TOL: f64 = 1e-6;

/// `mu(h, rho)`, row-major over `(state, rate vector)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SchedulingDistribution {
    num_states: usize,
    num_rates: usize,
    probs: Vec<f64>,
}

impl SchedulingDistribution {
    pub fn zeros(num_states: usize, num_rates: usize) -> Self {
        SchedulingDistribution { num_states, num_rates, probs: vec![0.0; num_states * num_rates] }
    }

    /// All mass on rate index `r` in every state.
    pub fn point_mass(num_states: usize, num_rates: usize, r: usize) -> Self {
        let mut mu = Self::zeros(num_states, num_rates);
        for s in 0..num_states {
            mu.set(s, r, 1.0);
        }
        mu
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Self {
        let num_states = rows.len();
        let num_rates = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == num_rates), "ragged scheduling table");
        SchedulingDistribution { num_states, num_rates, probs: rows.concat() }
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_rates(&self) -> usize {
        self.num_rates
    }

    #[inline]
    pub fn get(&self, s: usize, r: usize) -> f64 {
        self.probs[s * self.num_rates + r]
    }

    #[inline]
    pub fn set(&mut self, s: usize, r: usize, v: f64) {
        self.probs[s * self.num_rates + r] = v;
    }

    pub fn row(&self, s: usize) -> &[f64] {
        &self.probs[s * self.num_rates..(s + 1) * self.num_rates]
    }

    pub fn row_mut(&mut self, s: usize) -> &mut [f64] {
        &mut self.probs[s * self.num_rates..(s + 1) * self.num_rates]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.probs
    }

    /// Largest deviation of a row sum from 1, or of an entry from `[0, 1]`.
    pub fn simplex_error(&self) -> f64 {
        let mut worst = 0.0f64;
        for s in 0..self.num_states {
            let row = self.row(s);
            worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
            for &x in row {
                worst = worst.max(-x).max(x - 1.0);
            }
        }
        worst
    }
}

/// Expected transmit power of every user for each `(state, rate vector)`,
/// conditional on that rate vector being scheduled.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerTable {
    num_rates: usize,
    num_users: usize,
    data: Vec<f64>,
}

impl PowerTable {
    pub fn zeros(num_states: usize, num_rates: usize, num_users: usize) -> Self {
        PowerTable { num_rates, num_users, data: vec![0.0; num_states * num_rates * num_users] }
    }

    #[inline]
    pub fn get(&self, s: usize, r: usize) -> &[f64] {
        let o = (s * self.num_rates + r) * self.num_users;
        &self.data[o..o + self.num_users]
    }

    #[inline]
    pub fn get_mut(&mut self, s: usize, r: usize) -> &mut [f64] {
        let o = (s * self.num_rates + r) * self.num_users;
        &mut self.data[o..o + self.num_users]
    }
}

/// How average power is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PowerAccounting {
    /// Power is charged whenever a user is scheduled, queue or not.
    WithoutAdjustment,
    /// Power is charged only when the scheduled user has a pending packet.
    WithAdjustment,
}

/// `p_i = sum_h sum_rho P(h) mu(h, rho) 1{rho_i > 0}`.
pub fn delivery_probability(space: &StateSpace, mu: &SchedulingDistribution) -> Vec<f64> {
    let m = space.num_users();
    let mut p = vec![0.0; m];
    for (s, st) in space.states.iter().enumerate() {
        for (r, rho) in space.rates.iter().enumerate() {
            let w = st.prob * mu.get(s, r);
            if w == 0.0 {
                continue;
            }
            for (i, pi) in p.iter_mut().enumerate() {
                if rho.active(i) {
                    *pi += w;
                }
            }
        }
    }
    p
}

/// Long-run VAoI of one user, `lambda (1/p - 1)`; zero when `lambda = 0`,
/// `+inf` when `p = 0 < lambda`.
#[inline]
pub fn user_vaoi(lambda: f64, p: f64) -> f64 {
    if lambda == 0.0 {
        0.0
    } else if p <= 0.0 {
        f64::INFINITY
    } else {
        lambda * (1.0 / p - 1.0)
    }
}

pub fn average_vaoi(lambda: &[f64], p: &[f64]) -> Vec<f64> {
    lambda.iter().zip(p).map(|(&l, &q)| user_vaoi(l, q)).collect()
}

/// `lambda + (1 - lambda) p`, the normalizer shared by occupancy, distortion and
/// adjusted power.
#[inline]
pub fn occupancy_denominator(lambda: f64, p: f64) -> f64 {
    lambda + (1.0 - lambda) * p
}

/// Stationary probability that a packet is pending, `lambda / (lambda (1-p) + p)`.
pub fn queue_occupancy(lambda: &[f64], p: &[f64]) -> Vec<f64> {
    lambda
        .iter()
        .zip(p)
        .map(|(&l, &q)| {
            let d = occupancy_denominator(l, q);
            if d > 0.0 {
                l / d
            } else {
                0.0
            }
        })
        .collect()
}

/// `sum_i w_i lambda_i (1/p_i - 1)`.
pub fn weighted_objective(w: &[f64], lambda: &[f64], p: &[f64]) -> f64 {
    w.iter()
        .zip(lambda.iter().zip(p))
        .map(|(&wi, (&l, &q))| if wi == 0.0 { 0.0 } else { wi * user_vaoi(l, q) })
        .sum()
}

/// Per-user distortion: the long-run average and the affine constraint pair
/// `D'_i <= Dbar'_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct DistortionSummary {
    pub average: Vec<f64>,
    pub primed: Vec<f64>,
    pub primed_bound: Vec<f64>,
}

impl DistortionSummary {
    pub fn max_violation(&self) -> f64 {
        max_gap(&self.primed, &self.primed_bound)
    }
}

pub fn average_distortion(cfg: &SystemConfig, space: &StateSpace, mu: &SchedulingDistribution) -> DistortionSummary {
    let m = space.num_users();
    let p = delivery_probability(space, mu);
    let mut cond = vec![0.0; m];
    for (s, st) in space.states.iter().enumerate() {
        for (r, rho) in space.rates.iter().enumerate() {
            let w = st.prob * mu.get(s, r);
            if w == 0.0 {
                continue;
            }
            for (i, c) in cond.iter_mut().enumerate() {
                if rho.active(i) {
                    *c += w * space.distortion[rho.0[i] as usize];
                }
            }
        }
    }
    let mut out = DistortionSummary { average: vec![0.0; m], primed: vec![0.0; m], primed_bound: vec![0.0; m] };
    for i in 0..m {
        let l = cfg.arrival_prob[i];
        let den = occupancy_denominator(l, p[i]);
        out.primed[i] = l * cond[i];
        out.primed_bound[i] = cfg.distortion_bound[i] * den;
        out.average[i] = if den > 0.0 { out.primed[i] / den } else { 0.0 };
    }
    out
}

/// Per-user power: the long-run average under the chosen accounting and the
/// affine constraint pair it is checked against.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerSummary {
    pub average: Vec<f64>,
    pub constraint_lhs: Vec<f64>,
    pub constraint_rhs: Vec<f64>,
}

impl PowerSummary {
    pub fn max_violation(&self) -> f64 {
        max_gap(&self.constraint_lhs, &self.constraint_rhs)
    }
}

/// `sum_rho E_h[mu f_i]` for every user.
pub fn expected_scheduled_power(space: &StateSpace, mu: &SchedulingDistribution, power: &PowerTable) -> Vec<f64> {
    let m = space.num_users();
    let mut e = vec![0.0; m];
    for (s, st) in space.states.iter().enumerate() {
        for r in 0..space.num_rates() {
            let w = st.prob * mu.get(s, r);
            if w == 0.0 {
                continue;
            }
            for (ei, f) in e.iter_mut().zip(power.get(s, r)) {
                *ei += w * f;
            }
        }
    }
    e
}

pub fn average_power(
    cfg: &SystemConfig,
    space: &StateSpace,
    mu: &SchedulingDistribution,
    power: &PowerTable,
    accounting: PowerAccounting,
) -> PowerSummary {
    let e = expected_scheduled_power(space, mu, power);
    match accounting {
        PowerAccounting::WithoutAdjustment => PowerSummary {
            average: e.clone(),
            constraint_lhs: e,
            constraint_rhs: cfg.power_bound.clone(),
        },
        PowerAccounting::WithAdjustment => {
            let p = delivery_probability(space, mu);
            let m = space.num_users();
            let mut out = PowerSummary { average: vec![0.0; m], constraint_lhs: vec![0.0; m], constraint_rhs: vec![0.0; m] };
            for i in 0..m {
                let l = cfg.arrival_prob[i];
                let den = occupancy_denominator(l, p[i]);
                out.constraint_lhs[i] = l * e[i];
                out.constraint_rhs[i] = cfg.power_bound[i] * den;
                out.average[i] = if den > 0.0 { l * e[i] / den } else { 0.0 };
            }
            out
        }
    }
}

fn max_gap(lhs: &[f64], rhs: &[f64]) -> f64 {
    lhs.iter().zip(rhs).map(|(a, b)| a - b).fold(f64::NEG_INFINITY, f64::max)
}

/// Every stationary quantity of a policy at once.
#[derive(Debug, Clone, PartialEq)]
pub struct StationaryMetrics {
    pub delivery: Vec<f64>,
    pub vaoi: Vec<f64>,
    pub occupancy: Vec<f64>,
    pub distortion: DistortionSummary,
    pub power: PowerSummary,
    pub objective: f64,
}

impl StationaryMetrics {
    pub fn evaluate(
        cfg: &SystemConfig,
        space: &StateSpace,
        mu: &SchedulingDistribution,
        power: &PowerTable,
        accounting: PowerAccounting,
    ) -> Self {
        let delivery = delivery_probability(space, mu);
        StationaryMetrics {
            vaoi: average_vaoi(&cfg.arrival_prob, &delivery),
            occupancy: queue_occupancy(&cfg.arrival_prob, &delivery),
            distortion: average_distortion(cfg, space, mu),
            power: average_power(cfg, space, mu, power, accounting),
            objective: weighted_objective(&cfg.weight, &cfg.arrival_prob, &delivery),
            delivery,
        }
    }

    /// Worst primed-constraint violation (power or distortion).
    pub fn max_violation(&self) -> f64 {
        self.power.max_violation().max(self.distortion.max_violation())
    }

    pub fn satisfies_constraints(&self, tol: f64) -> bool {
        self.max_violation() <= tol
    }
}

/// Lower bound on the optimal weighted VAoI over all policies: the optimum of
/// the stationary problem with the objective halved.
pub fn lower_bound(cfg: &SystemConfig, solver: &SolverConfig, mode: SolveMode) -> Result<f64> {
    let policy = dual::solve(cfg, solver, mode.lower_bound())?;
    Ok(policy.objective)
}
