//! System model: users, channels, rate and distortion maps, and the finite
//! grids of joint channel states and rate vectors every other module indexes
//! into.
//!
//! All grids are enumerated once, in a fixed lexicographic order, so that
//! downstream tables can be addressed by `(state index, rate index)`.

use std::fmt;
use std::sync::Arc;

use itertools::Itertools;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on pmf normalization.
pub const PMF_TOL: f64 = 1e-12;

/// Concave, nondecreasing rate map `g` with `g(0) = 0`, together with its
/// inverse. `forward` maps received power (gain times transmit power) to
/// deliverable bits, `inverse` maps bits back to the required received power.
pub trait RateFunction: Send + Sync + fmt::Debug {
    fn forward(&self, x: f64) -> f64;
    fn inverse(&self, r: f64) -> f64;
}

/// `g(x) = B log2(1 + x)`. The default has `B = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShannonRate {
    pub bandwidth: f64,
}

impl Default for ShannonRate {
    fn default() -> Self {
        ShannonRate { bandwidth: 1.0 }
    }
}

impl RateFunction for ShannonRate {
    fn forward(&self, x: f64) -> f64 {
        self.bandwidth * x.ln_1p() / std::f64::consts::LN_2
    }

    fn inverse(&self, r: f64) -> f64 {
        if r == 0.0 {
            return 0.0;
        }
        (r / self.bandwidth).exp2() - 1.0
    }
}

/// Rate model carried by a [`SystemConfig`]: either the built-in Shannon map
/// or an arbitrary user-supplied [`RateFunction`].
#[derive(Clone)]
pub enum RateModel {
    Shannon(ShannonRate),
    Custom(Arc<dyn RateFunction>),
}

impl Default for RateModel {
    fn default() -> Self {
        RateModel::Shannon(ShannonRate::default())
    }
}

impl fmt::Debug for RateModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateModel::Shannon(s) => write!(f, "Shannon(B={})", s.bandwidth),
            RateModel::Custom(c) => write!(f, "Custom({c:?})"),
        }
    }
}

impl RateModel {
    /// True for `log2(1 + x)` exactly, the case where the sorting rule for
    /// decoding orders is known to be optimal.
    pub fn is_default_shannon(&self) -> bool {
        matches!(self, RateModel::Shannon(s) if s.bandwidth == 1.0)
    }
}

impl RateFunction for RateModel {
    #[inline]
    fn forward(&self, x: f64) -> f64 {
        match self {
            RateModel::Shannon(s) => s.forward(x),
            RateModel::Custom(c) => c.forward(x),
        }
    }

    #[inline]
    fn inverse(&self, r: f64) -> f64 {
        match self {
            RateModel::Shannon(s) => s.inverse(r),
            RateModel::Custom(c) => c.inverse(r),
        }
    }
}

/// Checked inverse rate map: required received power for `r` bits.
pub fn g_inverse(g: &dyn RateFunction, r: f64) -> Result<f64> {
    if !(r >= 0.0) {
        return Err(Error::Domain(format!("g^-1 needs a nonnegative rate, got {r}")));
    }
    Ok(g.inverse(r))
}

/// Distortion incurred by a delivered update as a function of its bit count.
/// Only integer bit counts `0..=r_max` are meaningful.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum DistortionFunction {
    /// `(1 - rho / r_max)^2`
    Quadratic,
    /// `exp(-rate * rho)`
    Exp {
        #[serde(default = "one")]
        rate: f64,
    },
    /// 1 below `r_max - 1`, `penultimate` at `r_max - 1`, 0 at `r_max`.
    Step {
        #[serde(default = "default_penultimate")]
        penultimate: f64,
    },
    /// `1 - rho / r_max`
    Linear,
    /// `max(0, cos(pi rho / (2 r_max)))^exponent`
    ConcaveCos {
        #[serde(default = "default_cos_exponent")]
        exponent: f64,
    },
    /// Explicit values for `rho = 0..=r_max`.
    Table { values: Vec<f64> },
}

fn one() -> f64 {
    1.0
}
fn default_penultimate() -> f64 {
    0.05
}
fn default_cos_exponent() -> f64 {
    0.3
}

impl Default for DistortionFunction {
    fn default() -> Self {
        DistortionFunction::Quadratic
    }
}

impl DistortionFunction {
    pub fn eval(&self, rho: u32, r_max: u32) -> Result<f64> {
        if rho > r_max {
            return Err(Error::Domain(format!("rho = {rho} outside 0..={r_max}")));
        }
        let x = f64::from(rho);
        let rm = f64::from(r_max);
        let v = match self {
            DistortionFunction::Quadratic => (1.0 - x / rm).powi(2),
            DistortionFunction::Exp { rate } => (-rate * x).exp(),
            DistortionFunction::Step { penultimate } => {
                if rho + 1 < r_max {
                    1.0
                } else if rho + 1 == r_max {
                    *penultimate
                } else {
                    0.0
                }
            }
            DistortionFunction::Linear => 1.0 - x / rm,
            DistortionFunction::ConcaveCos { exponent } => {
                (std::f64::consts::PI * (rm - x) / (2.0 * rm)).sin().max(0.0).powf(*exponent)
            }
            DistortionFunction::Table { values } => {
                *values.get(rho as usize).ok_or_else(|| {
                    Error::Domain(format!("distortion table has no entry for rho = {rho}"))
                })?
            }
        };
        // cos(pi/2) is 6e-17, not 0
        Ok(if v.abs() < 1e-15 { 0.0 } else { v })
    }
}

/// Finite per-user channel alphabets with independent pmfs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelModel {
    pub gains: Vec<Vec<f64>>,
    pub pmf: Vec<Vec<f64>>,
}

impl ChannelModel {
    /// Every user sees the same alphabet with a uniform pmf.
    pub fn uniform(num_users: usize, gains: &[f64]) -> Self {
        let p = 1.0 / gains.len() as f64;
        ChannelModel {
            gains: vec![gains.to_vec(); num_users],
            pmf: vec![vec![p; gains.len()]; num_users],
        }
    }

    pub fn validate(&self, num_users: usize) -> Result<()> {
        if self.gains.len() != num_users || self.pmf.len() != num_users {
            return Err(Error::Config(format!(
                "channel model needs {num_users} gain sets and pmfs, got {} and {}",
                self.gains.len(),
                self.pmf.len()
            )));
        }
        for (i, (g, p)) in self.gains.iter().zip(&self.pmf).enumerate() {
            if g.is_empty() {
                return Err(Error::Config(format!("user {i} has an empty gain set")));
            }
            if g.len() != p.len() {
                return Err(Error::Config(format!("user {i}: gain set and pmf lengths differ")));
            }
            if g.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("user {i}: gains must be positive and finite")));
            }
            if p.iter().any(|&x| !(x >= 0.0)) {
                return Err(Error::Config(format!("user {i}: negative probability")));
            }
            let s: f64 = p.iter().sum();
            if (s - 1.0).abs() > PMF_TOL {
                return Err(Error::Config(format!("user {i}: pmf sums to {s}")));
            }
        }
        Ok(())
    }
}

/// All exogenous parameters of the uplink system.
#[derive(Debug, Clone)]
pub struct SystemConfig {
    pub num_users: usize,
    pub arrival_prob: Vec<f64>,
    pub weight: Vec<f64>,
    pub power_bound: Vec<f64>,
    pub distortion_bound: Vec<f64>,
    pub r_max: u32,
    pub rate: RateModel,
    pub distortion: DistortionFunction,
    pub channel: ChannelModel,
}

impl SystemConfig {
    /// Identical users sharing one gain alphabet (uniform pmf), default rate
    /// and distortion maps.
    pub fn symmetric(
        num_users: usize,
        arrival_prob: f64,
        weight: f64,
        power_bound: f64,
        distortion_bound: f64,
        r_max: u32,
        gains: &[f64],
    ) -> Self {
        SystemConfig {
            num_users,
            arrival_prob: vec![arrival_prob; num_users],
            weight: vec![weight; num_users],
            power_bound: vec![power_bound; num_users],
            distortion_bound: vec![distortion_bound; num_users],
            r_max,
            rate: RateModel::default(),
            distortion: DistortionFunction::default(),
            channel: ChannelModel::uniform(num_users, gains),
        }
    }

    pub fn with_distortion(mut self, d: DistortionFunction) -> Self {
        self.distortion = d;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.num_users;
        if m == 0 {
            return Err(Error::Config("num_users must be positive".into()));
        }
        for (name, v) in [
            ("arrival_prob", &self.arrival_prob),
            ("weight", &self.weight),
            ("power_bound", &self.power_bound),
            ("distortion_bound", &self.distortion_bound),
        ] {
            if v.len() != m {
                return Err(Error::Config(format!("{name} has length {} but M = {m}", v.len())));
            }
            if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
                return Err(Error::Config(format!("{name} entries must be finite and nonnegative")));
            }
        }
        if self.arrival_prob.iter().any(|&l| l > 1.0) {
            return Err(Error::Config("arrival probabilities must lie in [0, 1]".into()));
        }
        if !(self.weight.iter().sum::<f64>() > 0.0) {
            return Err(Error::Config("weights must have a positive sum".into()));
        }
        if self.r_max == 0 {
            return Err(Error::Config("r_max must be at least 1".into()));
        }
        for rho in 0..=self.r_max {
            let d = self.distortion.eval(rho, self.r_max)?;
            if !(d >= 0.0) || !d.is_finite() {
                return Err(Error::Config(format!("distortion({rho}) = {d} is not a nonnegative number")));
            }
        }
        self.channel.validate(m)
    }

    pub fn g_inverse(&self, r: f64) -> Result<f64> {
        g_inverse(&self.rate, r)
    }

    pub fn distortion_eval(&self, rho: u32) -> Result<f64> {
        self.distortion.eval(rho, self.r_max)
    }

    /// `delta(rho)` for `rho = 0..=r_max`.
    pub fn distortion_table(&self) -> Result<Vec<f64>> {
        (0..=self.r_max).map(|r| self.distortion_eval(r)).collect()
    }
}

/// One joint channel realization and its probability.
#[derive(Debug, Clone, PartialEq)]
pub struct JointChannelState {
    pub gains: Vec<f64>,
    /// Index of each user's gain within its own alphabet.
    pub gain_index: Vec<usize>,
    pub prob: f64,
}

/// Bits sent by each user in one slot.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct RateVector(pub Vec<u32>);

impl RateVector {
    pub fn zeros(m: usize) -> Self {
        RateVector(vec![0; m])
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    #[inline]
    pub fn active(&self, i: usize) -> bool {
        self.0[i] > 0
    }

    pub fn active_count(&self) -> usize {
        self.0.iter().filter(|&&r| r > 0).count()
    }

    pub fn total_bits(&self) -> u32 {
        self.0.iter().sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&r| r == 0)
    }
}

/// Admissible rate vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RateSet {
    /// Every vector in `{0..r_max}^M`.
    Full,
    /// At most one active user.
    Tdma,
}

/// Cartesian product of the per-user alphabets, user 1 most significant.
pub fn enumerate_joint_states(cfg: &SystemConfig) -> Result<Vec<JointChannelState>> {
    for (i, g) in cfg.channel.gains.iter().enumerate() {
        if g.is_empty() {
            return Err(Error::Config(format!("user {i} has an empty gain set")));
        }
    }
    let states = cfg
        .channel
        .gains
        .iter()
        .map(|g| 0..g.len())
        .multi_cartesian_product()
        .map(|idx| {
            let gains = idx.iter().enumerate().map(|(i, &k)| cfg.channel.gains[i][k]).collect();
            let prob = idx.iter().enumerate().map(|(i, &k)| cfg.channel.pmf[i][k]).product();
            JointChannelState { gains, gain_index: idx, prob }
        })
        .collect();
    Ok(states)
}

/// Rate vectors in lexicographic order. `Full` yields `(r_max+1)^M` vectors,
/// `Tdma` yields `1 + M r_max`.
pub fn enumerate_rate_vectors(cfg: &SystemConfig, set: RateSet) -> Vec<RateVector> {
    (0..cfg.num_users)
        .map(|_| 0..=cfg.r_max)
        .multi_cartesian_product()
        .map(RateVector)
        .filter(|r| set == RateSet::Full || r.active_count() <= 1)
        .collect()
}

/// Enumerated joint states and rate vectors for one configuration, plus the
/// per-user distortion table.
#[derive(Debug, Clone)]
pub struct StateSpace {
    pub states: Vec<JointChannelState>,
    pub rates: Vec<RateVector>,
    pub rate_set: RateSet,
    pub distortion: Vec<f64>,
    radix: Vec<usize>,
}

impl StateSpace {
    pub fn new(cfg: &SystemConfig, rate_set: RateSet) -> Result<Self> {
        cfg.validate()?;
        let states = enumerate_joint_states(cfg)?;
        let rates = enumerate_rate_vectors(cfg, rate_set);
        let radix = cfg.channel.gains.iter().map(Vec::len).collect();
        Ok(StateSpace { states, rates, rate_set, distortion: cfg.distortion_table()?, radix })
    }

    pub fn num_users(&self) -> usize {
        self.radix.len()
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn num_rates(&self) -> usize {
        self.rates.len()
    }

    /// State index from per-user gain indices.
    pub fn state_index(&self, gain_index: &[usize]) -> Option<usize> {
        if gain_index.len() != self.radix.len() {
            return None;
        }
        let mut idx = 0;
        for (&k, &r) in gain_index.iter().zip(&self.radix) {
            if k >= r {
                return None;
            }
            idx = idx * r + k;
        }
        Some(idx)
    }

    /// State index from a gain vector; gains must match an alphabet entry exactly.
    pub fn find_state(&self, cfg: &SystemConfig, gains: &[f64]) -> Result<usize> {
        let lookup = || -> Option<usize> {
            let idx: Option<Vec<usize>> = gains
                .iter()
                .enumerate()
                .map(|(i, g)| cfg.channel.gains.get(i)?.iter().position(|x| x == g))
                .collect();
            self.state_index(&idx?)
        };
        lookup().ok_or_else(|| Error::UnknownState(gains.to_vec()))
    }

    /// Position of a rate vector in `rates`.
    pub fn rate_index(&self, rho: &RateVector) -> Option<usize> {
        self.rates.binary_search(rho).ok()
    }

    /// Index of the all-zero rate vector (always first).
    pub fn zero_rate_index(&self) -> usize {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn three_users() -> SystemConfig {
        SystemConfig::symmetric(3, 0.5, 1.0 / 3.0, 2.0, 0.06, 2, &[0.1, 1.0])
    }

    #[test]
    fn single_user_two_states() {
        let cfg = SystemConfig::symmetric(1, 0.9, 1.0, 10.0, 0.05, 5, &[0.1, 1.0]);
        let s = enumerate_joint_states(&cfg).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].gains, vec![0.1]);
        assert!(s.iter().all(|x| x.prob == 0.5));
    }

    #[test]
    fn three_users_eight_states() {
        let s = enumerate_joint_states(&three_users()).unwrap();
        assert_eq!(s.len(), 8);
        assert!(s.iter().all(|x| (x.prob - 0.125).abs() < 1e-15));
        assert_eq!(s[1].gains, vec![0.1, 0.1, 1.0]);
    }

    #[test]
    fn product_rule_for_nonuniform_pmfs() {
        let mut cfg = SystemConfig::symmetric(2, 0.5, 0.5, 1.0, 1.0, 1, &[0.5, 2.0]);
        cfg.channel.pmf = vec![vec![0.3, 0.7], vec![0.4, 0.6]];
        let p: Vec<f64> = enumerate_joint_states(&cfg).unwrap().iter().map(|s| s.prob).collect();
        let want = [0.12, 0.18, 0.28, 0.42];
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_gain_set_is_rejected() {
        let mut cfg = three_users();
        cfg.channel.gains[1].clear();
        assert!(matches!(enumerate_joint_states(&cfg), Err(Error::Config(_))));
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rate_vector_counts() {
        let cfg = three_users();
        assert_eq!(enumerate_rate_vectors(&cfg, RateSet::Full).len(), 27);
        assert_eq!(enumerate_rate_vectors(&cfg, RateSet::Tdma).len(), 7);
        let one = SystemConfig::symmetric(1, 0.9, 1.0, 10.0, 0.05, 5, &[0.1, 1.0]);
        let r = enumerate_rate_vectors(&one, RateSet::Full);
        assert_eq!(r.iter().map(|v| v.0[0]).collect::<Vec<_>>(), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn g_inverse_values() {
        let g = ShannonRate::default();
        assert_eq!(g_inverse(&g, 0.0).unwrap(), 0.0);
        assert_eq!(g_inverse(&g, 2.0).unwrap(), 3.0);
        assert_eq!(g_inverse(&g, 1.0).unwrap() + 1.0, 2.0);
        assert!(matches!(g_inverse(&g, -0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn distortion_values() {
        let q = DistortionFunction::Quadratic;
        assert_eq!(q.eval(0, 2).unwrap(), 1.0);
        assert_eq!(q.eval(2, 2).unwrap(), 0.0);
        assert!(matches!(q.eval(3, 2), Err(Error::Domain(_))));
        assert_eq!(DistortionFunction::Exp { rate: 1.0 }.eval(0, 5).unwrap(), 1.0);
        let step = DistortionFunction::Step { penultimate: 0.05 };
        assert_eq!(step.eval(3, 5).unwrap(), 1.0);
        assert_eq!(step.eval(4, 5).unwrap(), 0.05);
        assert_eq!(step.eval(5, 5).unwrap(), 0.0);
        assert_eq!(DistortionFunction::Linear.eval(5, 5).unwrap(), 0.0);
        let c = DistortionFunction::ConcaveCos { exponent: 0.3 };
        assert_eq!(c.eval(0, 5).unwrap(), 1.0);
        assert_eq!(c.eval(5, 5).unwrap(), 0.0);
    }

    #[test]
    fn distortion_from_json_names() {
        let d: DistortionFunction = serde_json::from_str(r#"{"name":"concave-cos"}"#).unwrap();
        assert_eq!(d, DistortionFunction::ConcaveCos { exponent: 0.3 });
        let d: DistortionFunction = serde_json::from_str(r#"{"name":"exp","rate":2.0}"#).unwrap();
        assert_eq!(d, DistortionFunction::Exp { rate: 2.0 });
    }

    #[test]
    fn state_lookup_round_trips() {
        let cfg = three_users();
        let space = StateSpace::new(&cfg, RateSet::Full).unwrap();
        for (i, s) in space.states.iter().enumerate() {
            assert_eq!(space.find_state(&cfg, &s.gains).unwrap(), i);
        }
        assert!(matches!(space.find_state(&cfg, &[0.3, 1.0, 1.0]), Err(Error::UnknownState(_))));
        for (i, r) in space.rates.iter().enumerate() {
            assert_eq!(space.rate_index(r), Some(i));
        }
        assert!(space.rates[space.zero_rate_index()].is_zero());
    }

    #[test]
    fn enumeration_is_deterministic() {
        let cfg = three_users();
        assert_eq!(enumerate_joint_states(&cfg).unwrap(), enumerate_joint_states(&cfg).unwrap());
        assert_eq!(
            enumerate_rate_vectors(&cfg, RateSet::Full),
            enumerate_rate_vectors(&cfg, RateSet::Full)
        );
    }

    proptest! {
        #[test]
        fn joint_probabilities_sum_to_one(
            raw in proptest::collection::vec(proptest::collection::vec(0.01f64..1.0, 1..4), 1..4)
        ) {
            let m = raw.len();
            let pmf: Vec<Vec<f64>> = raw.iter().map(|w| {
                let s: f64 = w.iter().sum();
                w.iter().map(|x| x / s).collect()
            }).collect();
            let gains = raw.iter().map(|w| (1..=w.len()).map(|k| k as f64).collect()).collect();
            let mut cfg = SystemConfig::symmetric(m, 0.5, 1.0, 1.0, 1.0, 2, &[1.0]);
            cfg.channel = ChannelModel { gains, pmf };
            let s: f64 = enumerate_joint_states(&cfg).unwrap().iter().map(|x| x.prob).sum();
            prop_assert!((s - 1.0).abs() < 1e-10);
        }

        #[test]
        fn shannon_round_trip(m in 1u32..5, rmax in 1u32..6, frac in 0.0f64..=1.0) {
            let g = ShannonRate::default();
            let r = frac * f64::from(m * rmax);
            prop_assert!((g.forward(g.inverse(r)) - r).abs() < 1e-10);
        }

        #[test]
        fn tdma_vectors_are_a_subset(m in 1usize..4, rmax in 1u32..4) {
            let cfg = SystemConfig::symmetric(m, 0.5, 1.0, 1.0, 1.0, rmax, &[1.0]);
            let full = enumerate_rate_vectors(&cfg, RateSet::Full);
            let tdma = enumerate_rate_vectors(&cfg, RateSet::Tdma);
            prop_assert_eq!(full.len(), (rmax as usize + 1).pow(m as u32));
            prop_assert_eq!(tdma.len(), 1 + m * rmax as usize);
            for v in &tdma {
                prop_assert!(v.active_count() <= 1);
                prop_assert!(full.contains(v));
            }
        }
    }
}
