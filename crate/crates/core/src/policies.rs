//! Per-slot decision rules: the stationary randomized policy and three
//! VAoI-aware heuristics that track running averages of power and distortion.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dual::RandomizedPolicy;
use crate::error::{Error, Result};
use crate::model::{RateFunction, RateSet, RateVector, StateSpace, SystemConfig};
use crate::sic::{self, DecodingOrder, PowerAllocation};

/// Relative slack granted when comparing a running average with its bound.
const BOUND_TOL: f64 = 1e-12;

/// Cumulative power and distortion of one sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningAverages {
    pub power: Vec<f64>,
    pub distortion: Vec<f64>,
    pub slots: u64,
}

impl RunningAverages {
    pub fn new(num_users: usize) -> Self {
        RunningAverages { power: vec![0.0; num_users], distortion: vec![0.0; num_users], slots: 0 }
    }

    pub fn average_power(&self, i: usize) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.power[i] / self.slots as f64
        }
    }

    pub fn average_distortion(&self, i: usize) -> f64 {
        if self.slots == 0 {
            0.0
        } else {
            self.distortion[i] / self.slots as f64
        }
    }

    /// Whether spending `power` and incurring `distortion` for user `i` in
    /// the next slot keeps both running averages within their bounds.
    pub fn admits(&self, cfg: &SystemConfig, i: usize, power: f64, distortion: f64) -> bool {
        let t = (self.slots + 1) as f64;
        let within = |cum: f64, x: f64, bound: f64| (cum + x) / t <= bound * (1.0 + BOUND_TOL) + BOUND_TOL;
        within(self.power[i], power, cfg.power_bound[i])
            && within(self.distortion[i], distortion, cfg.distortion_bound[i])
    }

    /// Adds one slot.
    pub fn commit(&mut self, power: &[f64], distortion: &[f64]) {
        for (c, x) in self.power.iter_mut().zip(power) {
            *c += x;
        }
        for (c, x) in self.distortion.iter_mut().zip(distortion) {
            *c += x;
        }
        self.slots += 1;
    }
}

/// Bits, decoding order and transmit powers chosen for one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotDecision {
    pub rates: RateVector,
    pub order: DecodingOrder,
    pub power: PowerAllocation,
}

impl SlotDecision {
    pub fn idle(num_users: usize) -> Self {
        SlotDecision {
            rates: RateVector::zeros(num_users),
            order: DecodingOrder::identity(num_users),
            power: PowerAllocation::zeros(num_users),
        }
    }

    /// A single user sending `bits` alone.
    pub fn single(cfg: &SystemConfig, gains: &[f64], user: usize, bits: u32) -> Self {
        let mut d = SlotDecision::idle(cfg.num_users);
        if bits > 0 {
            d.rates.0[user] = bits;
            d.power.0[user] = cfg.rate.inverse(f64::from(bits)) / gains[user];
        }
        d
    }

    pub fn is_idle(&self) -> bool {
        self.rates.is_zero()
    }

    /// Distortion incurred by each user.
    pub fn distortion(&self, table: &[f64]) -> Vec<f64> {
        self.rates.0.iter().map(|&r| if r > 0 { table[r as usize] } else { 0.0 }).collect()
    }
}

/// What a policy may observe at the start of a slot, after arrivals.
#[derive(Debug, Clone, Copy)]
pub struct SlotView<'a> {
    /// 0-based slot index.
    pub slot: u64,
    /// Index of the joint channel state.
    pub state: usize,
    pub gains: &'a [f64],
    pub queue: &'a [bool],
    /// VAoI before this slot's deliveries, arrivals included.
    pub vaoi: &'a [u64],
}

/// A per-path decision rule. Instances carry mutable state and must not be
/// shared between paths.
pub trait SlotPolicy: Send {
    fn decide(&mut self, view: &SlotView<'_>, rng: &mut ChaCha8Rng) -> Result<SlotDecision>;
}

/// Policy names accepted on the command line.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PolicyKind {
    Srp,
    Greedy,
    MaxVaoiFirst,
    RoundRobin,
}

impl PolicyKind {
    pub const HEURISTICS: [PolicyKind; 3] = [PolicyKind::Greedy, PolicyKind::MaxVaoiFirst, PolicyKind::RoundRobin];

    pub fn is_heuristic(self) -> bool {
        self != PolicyKind::Srp
    }

    /// Builds a fresh per-path instance of a heuristic.
    pub fn heuristic(self, cfg: &SystemConfig) -> Result<Box<dyn SlotPolicy>> {
        Ok(match self {
            PolicyKind::Srp => {
                return Err(Error::Config("the stationary policy must be built from a solved policy".into()))
            }
            PolicyKind::Greedy => Box::new(GreedyPolicy::new(cfg)?),
            PolicyKind::MaxVaoiFirst => Box::new(MaxVaoiFirst::new(cfg)?),
            PolicyKind::RoundRobin => Box::new(RoundRobin::new(cfg)?),
        })
    }
}

impl fmt::Display for PolicyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PolicyKind::Srp => "srp",
            PolicyKind::Greedy => "greedy",
            PolicyKind::MaxVaoiFirst => "max-vaoi-first",
            PolicyKind::RoundRobin => "round-robin",
        })
    }
}

impl FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srp" => Ok(PolicyKind::Srp),
            "greedy" => Ok(PolicyKind::Greedy),
            "max-vaoi-first" => Ok(PolicyKind::MaxVaoiFirst),
            "round-robin" => Ok(PolicyKind::RoundRobin),
            other => Err(Error::Config(format!("unknown policy `{other}`"))),
        }
    }
}

impl serde::Serialize for PolicyKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> serde::Deserialize<'de> for PolicyKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Samples an action of a solved stationary policy. Users with an empty
/// queue stay silent and spend nothing.
pub fn srp_adapter(policy: &RandomizedPolicy, state: usize, queue: &[bool], rng: &mut ChaCha8Rng) -> Result<SlotDecision> {
    let space = &policy.space;
    if state >= space.num_states() {
        return Err(Error::UnknownState(vec![state as f64]));
    }
    let a = policy.sample_action(state, rng.gen::<f64>());
    let mut d = SlotDecision {
        rates: RateVector(a.rates.clone()),
        order: DecodingOrder(a.order.clone()),
        power: PowerAllocation(a.power.clone()),
    };
    for (i, &q) in queue.iter().enumerate() {
        if !q {
            d.rates.0[i] = 0;
            d.power.0[i] = 0.0;
        }
    }
    Ok(d)
}

/// [`srp_adapter`] as a [`SlotPolicy`].
#[derive(Debug, Clone)]
pub struct SrpPolicy<'p> {
    policy: &'p RandomizedPolicy,
}

impl<'p> SrpPolicy<'p> {
    pub fn new(policy: &'p RandomizedPolicy) -> Self {
        SrpPolicy { policy }
    }
}

impl SlotPolicy for SrpPolicy<'_> {
    fn decide(&mut self, view: &SlotView<'_>, rng: &mut ChaCha8Rng) -> Result<SlotDecision> {
        srp_adapter(self.policy, view.state, view.queue, rng)
    }
}

/// Joint-transmission heuristic: among rate vectors that fit the running
/// budgets, minimize post-slot weighted VAoI, then maximize bits, then take
/// the lowest rate-vector index.
#[derive(Debug, Clone)]
pub struct GreedyPolicy {
    cfg: SystemConfig,
    space: StateSpace,
    /// Minimum-total-power allocation per (state, rate vector).
    vertices: Vec<(DecodingOrder, PowerAllocation)>,
    pub averages: RunningAverages,
}

impl GreedyPolicy {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        let space = StateSpace::new(cfg, RateSet::Full)?;
        let m = cfg.num_users;
        let unit = vec![1.0; m];
        let mut vertices = Vec::with_capacity(space.num_states() * space.num_rates());
        for st in &space.states {
            for rho in &space.rates {
                let order = sic::optimal_decoding_order(&st.gains, rho, &unit);
                let f = sic::sic_power_allocation(&st.gains, rho, &order, &cfg.rate);
                vertices.push((order, f));
            }
        }
        Ok(GreedyPolicy { cfg: cfg.clone(), space, vertices, averages: RunningAverages::new(m) })
    }
}

impl SlotPolicy for GreedyPolicy {
    fn decide(&mut self, view: &SlotView<'_>, _rng: &mut ChaCha8Rng) -> Result<SlotDecision> {
        let m = self.cfg.num_users;
        let nr = self.space.num_rates();
        let mut best: Option<(usize, f64, u32)> = None;
        'rates: for (r, rho) in self.space.rates.iter().enumerate() {
            if (0..m).any(|i| rho.active(i) && !view.queue[i]) {
                continue;
            }
            let f = &self.vertices[view.state * nr + r].1;
            for i in 0..m {
                let d = if rho.active(i) { self.space.distortion[rho.0[i] as usize] } else { 0.0 };
                if !self.averages.admits(&self.cfg, i, f.0[i], d) {
                    continue 'rates;
                }
            }
            let age: f64 = (0..m)
                .filter(|&i| !rho.active(i))
                .map(|i| self.cfg.weight[i] * view.vaoi[i] as f64)
                .sum();
            let bits = rho.total_bits();
            let better = match best {
                None => true,
                Some((_, a, b)) => age < a || (age == a && bits > b),
            };
            if better {
                best = Some((r, age, bits));
            }
        }
        let decision = match best {
            Some((r, _, _)) => {
                let (order, f) = &self.vertices[view.state * nr + r];
                SlotDecision { rates: self.space.rates[r].clone(), order: order.clone(), power: f.clone() }
            }
            None => SlotDecision::idle(m),
        };
        self.averages.commit(&decision.power.0, &decision.distortion(&self.space.distortion));
        Ok(decision)
    }
}

/// Largest bit count in `0..=r_max` user `i` can send alone within budget.
fn affordable_bits(cfg: &SystemConfig, table: &[f64], avg: &RunningAverages, gains: &[f64], i: usize) -> u32 {
    (1..=cfg.r_max)
        .rev()
        .find(|&b| avg.admits(cfg, i, cfg.rate.inverse(f64::from(b)) / gains[i], table[b as usize]))
        .unwrap_or(0)
}

fn commit_single(avg: &mut RunningAverages, table: &[f64], d: &SlotDecision) {
    avg.commit(&d.power.0, &d.distortion(table));
}

/// Serves the backlogged user with the largest VAoI (ties to the lowest
/// index) with as many bits as the budgets allow.
#[derive(Debug, Clone)]
pub struct MaxVaoiFirst {
    cfg: SystemConfig,
    table: Vec<f64>,
    pub averages: RunningAverages,
}

impl MaxVaoiFirst {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        Ok(MaxVaoiFirst { cfg: cfg.clone(), table: cfg.distortion_table()?, averages: RunningAverages::new(cfg.num_users) })
    }
}

impl SlotPolicy for MaxVaoiFirst {
    fn decide(&mut self, view: &SlotView<'_>, _rng: &mut ChaCha8Rng) -> Result<SlotDecision> {
        let mut pick: Option<usize> = None;
        for i in (0..self.cfg.num_users).filter(|&i| view.queue[i]) {
            if pick.map_or(true, |j| view.vaoi[i] > view.vaoi[j]) {
                pick = Some(i);
            }
        }
        let d = match pick {
            Some(i) => {
                let bits = affordable_bits(&self.cfg, &self.table, &self.averages, view.gains, i);
                SlotDecision::single(&self.cfg, view.gains, i, bits)
            }
            None => SlotDecision::idle(self.cfg.num_users),
        };
        commit_single(&mut self.averages, &self.table, &d);
        Ok(d)
    }
}

/// Offers slot `t` to user `t mod M` regardless of queues and ages.
#[derive(Debug, Clone)]
pub struct RoundRobin {
    cfg: SystemConfig,
    table: Vec<f64>,
    pub averages: RunningAverages,
}

impl RoundRobin {
    pub fn new(cfg: &SystemConfig) -> Result<Self> {
        Ok(RoundRobin { cfg: cfg.clone(), table: cfg.distortion_table()?, averages: RunningAverages::new(cfg.num_users) })
    }
}

impl SlotPolicy for RoundRobin {
    fn decide(&mut self, view: &SlotView<'_>, _rng: &mut ChaCha8Rng) -> Result<SlotDecision> {
        let i = (view.slot % self.cfg.num_users as u64) as usize;
        let d = if view.queue[i] {
            let bits = affordable_bits(&self.cfg, &self.table, &self.averages, view.gains, i);
            SlotDecision::single(&self.cfg, view.gains, i, bits)
        } else {
            SlotDecision::idle(self.cfg.num_users)
        };
        commit_single(&mut self.averages, &self.table, &d);
        Ok(d)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dual::{PolicyAction, SolveMode};
    use rand::SeedableRng;

    fn cfg() -> SystemConfig {
        SystemConfig::symmetric(3, 0.5, 1.0 / 3.0, 2.0, 0.06, 2, &[0.1, 1.0])
    }

    fn view<'a>(slot: u64, gains: &'a [f64], queue: &'a [bool], vaoi: &'a [u64]) -> SlotView<'a> {
        SlotView { slot, state: 0, gains, queue, vaoi }
    }

    #[test]
    fn greedy_idles_on_empty_queues() {
        let c = cfg();
        let mut g = GreedyPolicy::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = g.decide(&view(0, &[0.1, 0.1, 0.1], &[false; 3], &[0; 3]), &mut rng).unwrap();
        assert!(d.is_idle());
        assert_eq!(g.averages.slots, 1);
    }

    #[test]
    fn greedy_single_backlog_sends_everything() {
        let c = SystemConfig::symmetric(2, 0.5, 0.5, 1e6, 1e6, 3, &[1.0]);
        let mut g = GreedyPolicy::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = g.decide(&view(0, &[1.0, 1.0], &[false, true], &[0, 1]), &mut rng).unwrap();
        assert_eq!(d.rates.0, vec![0, 3]);
        let d = g.decide(&view(1, &[1.0, 1.0], &[true, true], &[1, 1]), &mut rng).unwrap();
        assert_eq!(d.rates.0, vec![3, 3]);
        assert!(sic::mac_feasible(&[1.0, 1.0], &d.rates, &d.power, &c.rate, 1e-9));
    }

    #[test]
    fn max_vaoi_first_ties_go_to_the_first_user() {
        let c = SystemConfig::symmetric(3, 0.5, 1.0 / 3.0, 1e6, 1e6, 2, &[1.0]);
        let mut p = MaxVaoiFirst::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = p.decide(&view(0, &[1.0, 1.0, 1.0], &[true; 3], &[2, 2, 2]), &mut rng).unwrap();
        assert_eq!(d.rates.active_count(), 1);
        assert!(d.rates.active(0));
    }

    #[test]
    fn max_vaoi_first_respects_exhausted_budget() {
        let mut c = cfg();
        c.power_bound = vec![0.0; 3];
        let mut p = MaxVaoiFirst::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = p.decide(&view(0, &[1.0, 1.0, 1.0], &[true; 3], &[1, 5, 2]), &mut rng).unwrap();
        assert!(d.is_idle());
    }

    #[test]
    fn round_robin_cycles() {
        let c = SystemConfig::symmetric(3, 0.5, 1.0 / 3.0, 1e6, 1e6, 1, &[1.0]);
        let mut p = RoundRobin::new(&c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let served: Vec<usize> = (0..6)
            .map(|t| {
                let d = p.decide(&view(t, &[1.0; 3], &[true; 3], &[1; 3]), &mut rng).unwrap();
                (0..3).find(|&i| d.rates.active(i)).unwrap()
            })
            .collect();
        assert_eq!(served, vec![0, 1, 2, 0, 1, 2]);
        let d = p.decide(&view(6, &[1.0; 3], &[false, true, true], &[0, 1, 1]), &mut rng).unwrap();
        assert!(d.is_idle());
    }

    #[test]
    fn srp_adapter_silences_empty_queues() {
        let c = SystemConfig::symmetric(2, 0.5, 0.5, 10.0, 1.0, 1, &[1.0]);
        let space = StateSpace::new(&c, RateSet::Full).unwrap();
        let a = PolicyAction { rates: vec![1, 1], order: vec![0, 1], power: vec![2.0, 1.0], prob: 1.0 };
        let policy = RandomizedPolicy::from_actions(&c, space, SolveMode::NOMA_PA, vec![vec![a]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = srp_adapter(&policy, 0, &[true, true], &mut rng).unwrap();
        assert_eq!(d.rates.0, vec![1, 1]);
        let d = srp_adapter(&policy, 0, &[false, false], &mut rng).unwrap();
        assert!(d.is_idle());
        assert_eq!(d.power.total(), 0.0);
        assert!(matches!(srp_adapter(&policy, 4, &[true, true], &mut rng), Err(Error::UnknownState(_))));
    }

    #[test]
    fn policy_names_round_trip() {
        for k in [PolicyKind::Srp, PolicyKind::Greedy, PolicyKind::MaxVaoiFirst, PolicyKind::RoundRobin] {
            assert_eq!(k.to_string().parse::<PolicyKind>().unwrap(), k);
        }
        assert!("fifo".parse::<PolicyKind>().is_err());
    }
}
