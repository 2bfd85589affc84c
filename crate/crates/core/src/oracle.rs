//! Independent checks at desk scale.
//!
//! [`solve_direct`] materializes the stationary program explicitly, with
//! expected powers `pi_i(h, rho) = mu(h, rho) f_i(h, rho)` as variables, every
//! subset constraint of the MAC region and the `eta` epigraph of the
//! objective, and hands it to the interior-point solver in
//! [`crate::convex`]. [`verify_policy`] re-checks a policy from scratch and
//! [`vaoi_chain_oracle`] simulates the VAoI recursion with a delivery coin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::analytics::{PowerAccounting, PowerTable, SchedulingDistribution, StationaryMetrics};
use crate::convex::{AffineRow, BarrierSettings, Feasibility, Program, ReciprocalRow};
use crate::dual::{RandomizedPolicy, SolveMode};
use crate::error::{Error, Result};
use crate::model::{RateFunction, StateSpace, SystemConfig};
use crate::sic::{self, PowerAllocation};

/// Largest `|H| |R| 2^M` accepted by [`solve_direct`].
pub const DIRECT_SIZE_LIMIT: usize = 10_000;

/// Optimum of the explicit program.
#[derive(Debug, Clone)]
pub struct DirectSolution {
    /// Weighted VAoI (scaled like the mode's objective); `+inf` when no
    /// strictly feasible point serves every weighted user.
    pub objective: f64,
    pub mu: SchedulingDistribution,
    /// `pi / mu` wherever `mu > 0`.
    pub power: PowerTable,
    pub metrics: Option<StationaryMetrics>,
    /// Suboptimality bound from the barrier method.
    pub gap: f64,
    /// Best worst-row value of the phase-one search when infeasible.
    pub infeasibility: Option<f64>,
    pub num_variables: usize,
    pub num_constraints: usize,
}

impl DirectSolution {
    pub fn is_feasible(&self) -> bool {
        self.infeasibility.is_none()
    }
}

/// Solves the explicit program for `mode` to absolute accuracy `tol`.
pub fn solve_direct(cfg: &SystemConfig, mode: SolveMode, tol: f64) -> Result<DirectSolution> {
    let space = StateSpace::new(cfg, mode.rate_set)?;
    let m = cfg.num_users;
    let size = (space.num_states() * space.num_rates()) << m;
    if size > DIRECT_SIZE_LIMIT {
        return Err(Error::Size(format!(
            "explicit program with |H||R|2^M = {size} exceeds the limit {DIRECT_SIZE_LIMIT}"
        )));
    }
    let scale = mode.objective_scale();
    let pa = mode.accounting == PowerAccounting::WithAdjustment;
    let ns = space.num_states();
    let nr = space.num_rates();

    // Users without a power budget cannot transmit at all.
    let allowed = |r: usize| {
        let rho = &space.rates[r];
        !rho.is_zero() && (0..m).all(|i| !rho.active(i) || cfg.power_bound[i] > 0.0)
    };

    // Variable layout: mu(s, r) for allowed r, then pi_i(s, r) for active i,
    // then eta_i for weighted users.
    let mut mu_var = vec![None; ns * nr];
    let mut pi_var = vec![None; ns * nr * m];
    let mut n = 0;
    for s in 0..ns {
        for r in (0..nr).filter(|&r| allowed(r)) {
            mu_var[s * nr + r] = Some(n);
            n += 1;
        }
    }
    for s in 0..ns {
        for r in (0..nr).filter(|&r| allowed(r)) {
            for i in (0..m).filter(|&i| space.rates[r].active(i)) {
                pi_var[(s * nr + r) * m + i] = Some(n);
                n += 1;
            }
        }
    }
    let weighted: Vec<usize> = (0..m).filter(|&i| cfg.weight[i] * cfg.arrival_prob[i] > 0.0).collect();
    let eta_var: Vec<usize> = (0..weighted.len()).map(|k| n + k).collect();
    n += weighted.len();

    let mut program = Program::new(n);
    let mut delivery: Vec<AffineRow> = (0..m).map(|_| AffineRow::new(0.0)).collect();
    let mut power: Vec<AffineRow> = (0..m)
        .map(|i| AffineRow::new(if pa { cfg.power_bound[i] * cfg.arrival_prob[i] } else { cfg.power_bound[i] }))
        .collect();
    let mut distortion: Vec<AffineRow> =
        (0..m).map(|i| AffineRow::new(cfg.distortion_bound[i] * cfg.arrival_prob[i])).collect();

    for s in 0..ns {
        let st = &space.states[s];
        let mut simplex = AffineRow::new(1.0);
        for r in 0..nr {
            let Some(x) = mu_var[s * nr + r] else { continue };
            let rho = &space.rates[r];
            let mut nonneg = AffineRow::new(0.0);
            nonneg.push(x, -1.0);
            program.rows.push(nonneg);
            simplex.push(x, 1.0);
            let active: Vec<usize> = (0..m).filter(|&i| rho.active(i)).collect();
            for &i in &active {
                let pv = pi_var[(s * nr + r) * m + i].expect("active users have power variables");
                let mut nonneg = AffineRow::new(0.0);
                nonneg.push(pv, -1.0);
                program.rows.push(nonneg);
                let l = cfg.arrival_prob[i];
                delivery[i].push(x, st.prob);
                if pa {
                    power[i].push(pv, st.prob * l);
                    power[i].push(x, -st.prob * cfg.power_bound[i] * (1.0 - l));
                } else {
                    power[i].push(pv, st.prob);
                }
                let d = l * space.distortion[rho.0[i] as usize] - cfg.distortion_bound[i] * (1.0 - l);
                distortion[i].push(x, st.prob * d);
            }
            // every nonempty subset of the active users
            for mask in 1u64..(1u64 << active.len()) {
                let members: Vec<usize> =
                    active.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, &i)| i).collect();
                let bits: u32 = members.iter().map(|&i| rho.0[i]).sum();
                let need = cfg.rate.inverse(f64::from(bits));
                let mut row = AffineRow::new(0.0);
                row.push(x, need);
                for &i in &members {
                    row.push(pi_var[(s * nr + r) * m + i].expect("active"), -st.gains[i]);
                }
                program.rows.push(row);
            }
        }
        if !simplex.is_trivial() {
            program.rows.push(simplex);
        }
    }
    for row in power.into_iter().chain(distortion) {
        if row.is_trivial() {
            if row.rhs < 0.0 {
                return Ok(infeasible(&space, n, program.rows.len(), -row.rhs));
            }
        } else {
            program.rows.push(row);
        }
    }
    for (k, &i) in weighted.iter().enumerate() {
        if delivery[i].is_trivial() {
            return Ok(infeasible(&space, n, program.rows.len(), f64::INFINITY));
        }
        let c = scale * (cfg.weight[i] * cfg.arrival_prob[i]);
        program.linear[eta_var[k]] = c;
        program.constant -= c;
        program.reciprocal_rows.push(ReciprocalRow { eta: eta_var[k], row: delivery[i].clone() });
    }

    let settings = BarrierSettings { gap: tol, growth: 5.0, max_newton: 500, ..Default::default() };
    let mut x0 = vec![0.0; n];
    for &e in &eta_var {
        x0[e] = 1.0;
    }
    let num_constraints = program.rows.len() + program.reciprocal_rows.len();
    let start = match program.find_strictly_feasible(&x0, &settings)? {
        Feasibility::Strict(x) => x,
        Feasibility::Infeasible(s) => return Ok(infeasible(&space, n, num_constraints, s)),
    };
    let sol = program.solve_from(start, &settings)?;

    let mut mu = SchedulingDistribution::zeros(ns, nr);
    let mut table = PowerTable::zeros(ns, nr, m);
    for s in 0..ns {
        let mut mass = 0.0;
        for r in 0..nr {
            let Some(x) = mu_var[s * nr + r] else { continue };
            let q = sol.x[x].max(0.0);
            mu.set(s, r, q);
            mass += q;
            if q > 0.0 {
                for i in 0..m {
                    if let Some(pv) = pi_var[(s * nr + r) * m + i] {
                        table.get_mut(s, r)[i] = sol.x[pv].max(0.0) / q;
                    }
                }
            }
        }
        mu.set(s, 0, (1.0 - mass).max(0.0));
    }
    let metrics = StationaryMetrics::evaluate(cfg, &space, &mu, &table, mode.accounting);
    Ok(DirectSolution {
        objective: scale * metrics.objective,
        mu,
        power: table,
        metrics: Some(metrics),
        gap: sol.gap,
        infeasibility: None,
        num_variables: n,
        num_constraints,
    })
}

fn infeasible(space: &StateSpace, n: usize, rows: usize, certificate: f64) -> DirectSolution {
    let m = space.num_users();
    DirectSolution {
        objective: f64::INFINITY,
        mu: SchedulingDistribution::point_mass(space.num_states(), space.num_rates(), 0),
        power: PowerTable::zeros(space.num_states(), space.num_rates(), m),
        metrics: None,
        gap: f64::INFINITY,
        infeasibility: Some(certificate),
        num_variables: n,
        num_constraints: rows,
    }
}

/// A MAC subset constraint broken by one policy action.
#[derive(Debug, Clone, PartialEq)]
pub struct MacViolation {
    pub state: usize,
    pub action: usize,
    /// Users in the violated subset (0-based).
    pub subset: Vec<usize>,
    pub excess_bits: f64,
}

/// Outcome of [`verify_policy`].
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyReport {
    pub simplex_error: f64,
    pub worst_mac: Option<MacViolation>,
    pub power_violation: f64,
    pub distortion_violation: f64,
    /// Users that are never served although they receive packets.
    pub starved_users: Vec<usize>,
    pub failures: Vec<String>,
}

impl PolicyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Re-derives every invariant of a policy from its action lists.
pub fn verify_policy(policy: &RandomizedPolicy, cfg: &SystemConfig, tol: f64) -> PolicyReport {
    let space = &policy.space;
    let m = space.num_users();
    let mut report = PolicyReport {
        simplex_error: 0.0,
        worst_mac: None,
        power_violation: f64::NEG_INFINITY,
        distortion_violation: f64::NEG_INFINITY,
        starved_users: Vec::new(),
        failures: Vec::new(),
    };
    let mut mu = SchedulingDistribution::zeros(space.num_states(), space.num_rates());
    let mut table = PowerTable::zeros(space.num_states(), space.num_rates(), m);
    for (s, acts) in policy.actions.iter().enumerate() {
        let h = &space.states[s].gains;
        let total: f64 = acts.iter().map(|a| a.prob).sum();
        report.simplex_error = report.simplex_error.max((total - 1.0).abs());
        for (k, a) in acts.iter().enumerate() {
            if a.prob < 0.0 {
                report.simplex_error = report.simplex_error.max(-a.prob);
            }
            let rho = crate::model::RateVector(a.rates.clone());
            let f = PowerAllocation(a.power.clone());
            if let Some((mask, v)) = sic::worst_mac_violation(h, &rho, &f, &cfg.rate) {
                if v > tol && report.worst_mac.as_ref().map_or(true, |w| v > w.excess_bits) {
                    report.worst_mac = Some(MacViolation {
                        state: s,
                        action: k,
                        subset: (0..m).filter(|i| mask >> i & 1 == 1).collect(),
                        excess_bits: v,
                    });
                }
            }
            if let Some(r) = space.rate_index(&rho) {
                mu.set(s, r, mu.get(s, r) + a.prob);
                for (acc, p) in table.get_mut(s, r).iter_mut().zip(&a.power) {
                    *acc += a.prob * p;
                }
            } else {
                report.failures.push(format!("state {s} action {k}: rate vector {:?} outside the rate set", a.rates));
            }
        }
        for r in 0..space.num_rates() {
            let q = mu.get(s, r);
            if q > 0.0 {
                for x in table.get_mut(s, r) {
                    *x /= q;
                }
            }
        }
    }
    let metrics = StationaryMetrics::evaluate(cfg, space, &mu, &table, policy.mode.accounting);
    report.power_violation = metrics.power.max_violation();
    report.distortion_violation = metrics.distortion.max_violation();
    report.starved_users = (0..m).filter(|&i| cfg.arrival_prob[i] > 0.0 && metrics.delivery[i] == 0.0).collect();

    if report.simplex_error > 1e-9 {
        report.failures.push(format!("action probabilities off the simplex by {:.3e}", report.simplex_error));
    }
    if let Some(w) = &report.worst_mac {
        report.failures.push(format!(
            "state {} action {}: MAC constraint for users {:?} exceeded by {:.3e} bits",
            w.state, w.action, w.subset, w.excess_bits
        ));
    }
    if report.power_violation > tol {
        report.failures.push(format!("power constraint exceeded by {:.3e}", report.power_violation));
    }
    if report.distortion_violation > tol {
        report.failures.push(format!("distortion constraint exceeded by {:.3e}", report.distortion_violation));
    }
    report
}

/// Time-averaged VAoI of the recursion `D(t) = (D(t-1) + A(t)) (1 - S(t))`
/// with `A ~ Bernoulli(lambda)` and `S ~ Bernoulli(p)`.
pub fn vaoi_chain_oracle(lambda: f64, p: f64, slots: u64, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut delta = 0u64;
    let mut sum = 0u128;
    for _ in 0..slots {
        let arrival = rng.gen::<f64>() < lambda;
        let served = rng.gen::<f64>() < p;
        delta = if served { 0 } else { delta + u64::from(arrival) };
        sum += u128::from(delta);
    }
    sum as f64 / slots.max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{solve, PolicyAction, SolverConfig};
    use crate::model::RateSet;

    #[test]
    fn unconstrained_single_user_always_transmits() {
        let cfg = SystemConfig::symmetric(1, 0.5, 1.0, 1e6, 1e6, 1, &[1.0]);
        let sol = solve_direct(&cfg, SolveMode::NOMA_NO_PA, 1e-9).unwrap();
        assert!(sol.objective < 1e-6, "{}", sol.objective);
    }

    #[test]
    fn no_power_means_no_delivery() {
        let cfg = SystemConfig::symmetric(1, 0.5, 1.0, 0.0, 0.1, 2, &[0.1, 1.0]);
        let sol = solve_direct(&cfg, SolveMode::NOMA_NO_PA, 1e-9).unwrap();
        assert_eq!(sol.objective, f64::INFINITY);
        assert!(!sol.is_feasible());
    }

    #[test]
    fn size_guard() {
        let cfg = SystemConfig::symmetric(4, 0.5, 0.25, 2.0, 0.1, 4, &[0.1, 0.5, 1.0]);
        assert!(matches!(solve_direct(&cfg, SolveMode::NOMA_NO_PA, 1e-6), Err(Error::Size(_))));
    }

    #[test]
    fn chain_oracle_edges() {
        assert_eq!(vaoi_chain_oracle(0.7, 1.0, 10_000, 1), 0.0);
        assert_eq!(vaoi_chain_oracle(0.0, 0.3, 10_000, 1), 0.0);
        let v = vaoi_chain_oracle(0.5, 0.5, 500_000, 7);
        assert!((v - 0.5).abs() < 0.01, "{v}");
    }

    #[test]
    fn solver_policy_passes_verification() {
        let cfg = SystemConfig::symmetric(3, 0.5, 1.0 / 3.0, 2.0, 0.06, 2, &[0.1, 1.0]);
        let policy = solve(&cfg, &SolverConfig::default(), SolveMode::NOMA_PA).unwrap();
        let report = verify_policy(&policy, &cfg, 1e-6);
        assert!(report.passed(), "{:?}", report.failures);
    }

    #[test]
    fn broken_mac_is_named() {
        let cfg = SystemConfig::symmetric(2, 0.5, 0.5, 10.0, 1.0, 1, &[1.0]);
        let space = StateSpace::new(&cfg, RateSet::Full).unwrap();
        let bad = PolicyAction { rates: vec![1, 1], order: vec![0, 1], power: vec![1.2, 1.2], prob: 1.0 };
        let policy = RandomizedPolicy::from_actions(&cfg, space, SolveMode::NOMA_NO_PA, vec![vec![bad]]).unwrap();
        let report = verify_policy(&policy, &cfg, 1e-9);
        assert!(!report.passed());
        let w = report.worst_mac.unwrap();
        assert_eq!(w.subset, vec![0, 1]);
        assert!(report.failures.iter().any(|f| f.contains("[0, 1]")));
    }

    #[test]
    fn idle_policy_passes_and_starves() {
        let cfg = SystemConfig::symmetric(2, 0.5, 0.5, 1.0, 0.5, 1, &[1.0]);
        let space = StateSpace::new(&cfg, RateSet::Full).unwrap();
        let idle = PolicyAction { rates: vec![0, 0], order: vec![0, 1], power: vec![0.0, 0.0], prob: 1.0 };
        let policy = RandomizedPolicy::from_actions(&cfg, space, SolveMode::NOMA_NO_PA, vec![vec![idle]]).unwrap();
        let report = verify_policy(&policy, &cfg, 1e-9);
        assert!(report.passed());
        assert_eq!(report.starved_users, vec![0, 1]);
    }
}
