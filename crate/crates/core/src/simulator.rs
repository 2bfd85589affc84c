//! Seeded slot-level Monte Carlo of arrivals, fading, decisions and VAoI.

use std::io::Write;
use std::time::Instant;

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::dual::fmt6;
use crate::error::{Error, Result};
use crate::model::{RateSet, StateSpace, SystemConfig};
use crate::par;
use crate::policies::{SlotDecision, SlotPolicy, SlotView};

/// Independent random streams of one path.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Arrivals = 0,
    Channels = 1,
    Policy = 2,
}

/// Generator for `(seed, path, stream)`.
pub fn stream_rng(seed: u64, path: u64, stream: Stream) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&path.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream as u64);
    rng
}

/// Per-user system state at the end of a slot.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimState {
    pub vaoi: Vec<u64>,
    pub queue: Vec<bool>,
    /// Latest version generated at the source.
    pub version: Vec<u64>,
    /// Latest version delivered to the receiver.
    pub delivered: Vec<u64>,
    pub slot: u64,
}

impl SimState {
    pub fn new(num_users: usize) -> Self {
        SimState {
            vaoi: vec![0; num_users],
            queue: vec![false; num_users],
            version: vec![0; num_users],
            delivered: vec![0; num_users],
            slot: 0,
        }
    }

    /// Queue flags and VAoI once this slot's arrivals are in.
    pub fn after_arrivals(&self, arrivals: &[bool]) -> (Vec<bool>, Vec<u64>) {
        let queue = self.queue.iter().zip(arrivals).map(|(&q, &a)| q || a).collect();
        let vaoi = self.vaoi.iter().zip(arrivals).map(|(&d, &a)| d + u64::from(a)).collect();
        (queue, vaoi)
    }
}

/// Power, distortion and end-of-slot VAoI of one slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotRecord {
    pub power: Vec<f64>,
    pub distortion: Vec<f64>,
    pub vaoi: Vec<u64>,
    pub delivered: Vec<bool>,
}

/// Advances one slot: arrivals, then the decision, then deliveries, then the
/// VAoI update `D <- (D + A) (1 - 1{rho > 0})`.
pub fn step(state: &mut SimState, decision: &SlotDecision, arrivals: &[bool], distortion: &[f64]) -> Result<SlotRecord> {
    let m = state.vaoi.len();
    if decision.rates.len() != m || decision.power.0.len() != m || arrivals.len() != m {
        return Err(Error::Contract(format!("slot decision for {} users, system has {m}", decision.rates.len())));
    }
    for i in 0..m {
        if arrivals[i] {
            state.version[i] += 1;
            state.queue[i] = true;
        }
    }
    for i in 0..m {
        if decision.rates.active(i) && !state.queue[i] {
            return Err(Error::Contract(format!("user {i} transmits with an empty queue in slot {}", state.slot)));
        }
        if !decision.rates.active(i) && decision.power.0[i] != 0.0 {
            return Err(Error::Contract(format!("user {i} spends power without sending bits in slot {}", state.slot)));
        }
    }
    let mut rec =
        SlotRecord { power: vec![0.0; m], distortion: vec![0.0; m], vaoi: vec![0; m], delivered: vec![false; m] };
    for i in 0..m {
        let bits = decision.rates.0[i];
        if bits > 0 {
            rec.power[i] = decision.power.0[i];
            rec.distortion[i] = *distortion.get(bits as usize).ok_or_else(|| {
                Error::Contract(format!("user {i} sends {bits} bits, beyond r_max"))
            })?;
            state.delivered[i] = state.version[i];
            state.queue[i] = false;
            state.vaoi[i] = 0;
            rec.delivered[i] = true;
        } else {
            state.vaoi[i] += u64::from(arrivals[i]);
        }
        debug_assert_eq!(state.vaoi[i], state.version[i] - state.delivered[i]);
        rec.vaoi[i] = state.vaoi[i];
    }
    state.slot += 1;
    Ok(rec)
}

/// Totals of one sample path.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub seed: u64,
    pub path: u64,
    pub slots: u64,
    pub vaoi_sum: Vec<u64>,
    pub power_sum: Vec<f64>,
    pub distortion_sum: Vec<f64>,
    pub deliveries: Vec<u64>,
    /// Wall time spent inside the policy, when timing was requested.
    pub decision_nanos: u128,
}

impl SimulationTrace {
    pub fn average_vaoi(&self) -> Vec<f64> {
        self.vaoi_sum.iter().map(|&s| s as f64 / self.slots as f64).collect()
    }

    pub fn average_power(&self) -> Vec<f64> {
        self.power_sum.iter().map(|&s| s / self.slots as f64).collect()
    }

    pub fn average_distortion(&self) -> Vec<f64> {
        self.distortion_sum.iter().map(|&s| s / self.slots as f64).collect()
    }

    pub fn delivery_rate(&self) -> Vec<f64> {
        self.deliveries.iter().map(|&s| s as f64 / self.slots as f64).collect()
    }

    pub fn weighted_vaoi(&self, weight: &[f64]) -> f64 {
        self.average_vaoi().iter().zip(weight).map(|(v, w)| v * w).sum()
    }
}

/// Options for [`run`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    pub slots: u64,
    pub paths: u64,
    pub seed: u64,
    pub time_decisions: bool,
}

impl RunOptions {
    pub fn new(slots: u64, paths: u64, seed: u64) -> Self {
        RunOptions { slots, paths, seed, time_decisions: false }
    }
}

/// Across-path mean and sample standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(xs: impl IntoIterator<Item = f64>) -> Self {
        let xs: Vec<f64> = xs.into_iter().collect();
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let std = if xs.len() > 1 { (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
        MeanStd { mean, std }
    }
}

/// Aggregate of all paths of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSummary {
    pub options: RunOptions,
    pub traces: Vec<SimulationTrace>,
    pub vaoi: Vec<MeanStd>,
    pub weighted_vaoi: MeanStd,
    pub power: Vec<MeanStd>,
    pub distortion: Vec<MeanStd>,
    pub delivery: Vec<MeanStd>,
    /// Mean decision time per slot in nanoseconds (0 unless timed).
    pub decision_nanos_per_slot: f64,
}

impl SimulationSummary {
    fn from_traces(cfg: &SystemConfig, options: RunOptions, traces: Vec<SimulationTrace>) -> Self {
        let m = cfg.num_users;
        let per_user = |f: &dyn Fn(&SimulationTrace) -> Vec<f64>| -> Vec<MeanStd> {
            let rows: Vec<Vec<f64>> = traces.iter().map(f).collect();
            (0..m).map(|i| MeanStd::of(rows.iter().map(|r| r[i]))).collect()
        };
        let total_nanos: u128 = traces.iter().map(|t| t.decision_nanos).sum();
        SimulationSummary {
            vaoi: per_user(&SimulationTrace::average_vaoi),
            weighted_vaoi: MeanStd::of(traces.iter().map(|t| t.weighted_vaoi(&cfg.weight))),
            power: per_user(&SimulationTrace::average_power),
            distortion: per_user(&SimulationTrace::average_distortion),
            delivery: per_user(&SimulationTrace::delivery_rate),
            decision_nanos_per_slot: total_nanos as f64 / (options.slots * options.paths) as f64,
            options,
            traces,
        }
    }

    pub const CSV_HEADER: &'static str = "policy,config_hash,seed,slots,paths,weighted_vaoi_mean,weighted_vaoi_std,\
user,vaoi_mean,vaoi_std,power_mean,power_std,distortion_mean,distortion_std,delivery_mean";

    /// One row per user, tagged with `policy` and `config_hash`.
    pub fn write_csv_rows<W: Write>(&self, mut w: W, policy: &str, config_hash: &str) -> Result<()> {
        for i in 0..self.vaoi.len() {
            writeln!(
                w,
                "{policy},{config_hash},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                self.options.seed,
                self.options.slots,
                self.options.paths,
                fmt6(self.weighted_vaoi.mean),
                fmt6(self.weighted_vaoi.std),
                i + 1,
                fmt6(self.vaoi[i].mean),
                fmt6(self.vaoi[i].std),
                fmt6(self.power[i].mean),
                fmt6(self.power[i].std),
                fmt6(self.distortion[i].mean),
                fmt6(self.distortion[i].std),
                fmt6(self.delivery[i].mean),
            )?;
        }
        Ok(())
    }
}

/// Simulates one path.
pub fn run_path(cfg: &SystemConfig, policy: &mut dyn SlotPolicy, options: RunOptions, path: u64) -> Result<SimulationTrace> {
    let m = cfg.num_users;
    let space = StateSpace::new(cfg, RateSet::Tdma)?;
    let distortion = cfg.distortion_table()?;
    let channel: Vec<WeightedIndex<f64>> = cfg
        .channel
        .pmf
        .iter()
        .map(|p| WeightedIndex::new(p).map_err(|e| Error::Config(format!("channel pmf: {e}"))))
        .collect::<Result<_>>()?;
    let mut arrivals_rng = stream_rng(options.seed, path, Stream::Arrivals);
    let mut channel_rng = stream_rng(options.seed, path, Stream::Channels);
    let mut policy_rng = stream_rng(options.seed, path, Stream::Policy);

    let mut state = SimState::new(m);
    let mut trace = SimulationTrace {
        seed: options.seed,
        path,
        slots: options.slots,
        vaoi_sum: vec![0; m],
        power_sum: vec![0.0; m],
        distortion_sum: vec![0.0; m],
        deliveries: vec![0; m],
        decision_nanos: 0,
    };
    let mut arrivals = vec![false; m];
    let mut gain_index = vec![0usize; m];
    let mut gains = vec![0.0; m];
    for t in 0..options.slots {
        for i in 0..m {
            arrivals[i] = arrivals_rng.gen::<f64>() < cfg.arrival_prob[i];
            gain_index[i] = channel[i].sample(&mut channel_rng);
            gains[i] = cfg.channel.gains[i][gain_index[i]];
        }
        let s = space.state_index(&gain_index).ok_or_else(|| Error::UnknownState(gains.clone()))?;
        let (queue, vaoi) = state.after_arrivals(&arrivals);
        let view = SlotView { slot: t, state: s, gains: &gains, queue: &queue, vaoi: &vaoi };
        let decision = if options.time_decisions {
            let start = Instant::now();
            let d = policy.decide(&view, &mut policy_rng)?;
            trace.decision_nanos += start.elapsed().as_nanos();
            d
        } else {
            policy.decide(&view, &mut policy_rng)?
        };
        let rec = step(&mut state, &decision, &arrivals, &distortion)?;
        for i in 0..m {
            trace.vaoi_sum[i] += rec.vaoi[i];
            trace.power_sum[i] += rec.power[i];
            trace.distortion_sum[i] += rec.distortion[i];
            trace.deliveries[i] += u64::from(rec.delivered[i]);
        }
    }
    Ok(trace)
}

/// Runs `options.paths` independent paths, each with its own policy
/// instance from `make_policy`, and aggregates them in path order.
pub fn run<'p, F>(cfg: &SystemConfig, make_policy: F, options: RunOptions) -> Result<SimulationSummary>
where
    F: Fn() -> Result<Box<dyn SlotPolicy + 'p>> + Sync,
{
    if options.slots == 0 || options.paths == 0 {
        return Err(Error::Config("simulation needs at least one slot and one path".into()));
    }
    cfg.validate()?;
    let traces = par::map_indexed(options.paths as usize, |k| {
        let mut policy = make_policy()?;
        run_path(cfg, policy.as_mut(), options, k as u64)
    });
    let traces = traces.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SimulationSummary::from_traces(cfg, options, traces))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::RateVector;
    use crate::policies::{PolicyKind, SlotDecision};
    use crate::sic::PowerAllocation;

    fn decision(rates: &[u32], power: &[f64]) -> SlotDecision {
        let mut d = SlotDecision::idle(rates.len());
        d.rates = RateVector(rates.to_vec());
        d.power = PowerAllocation(power.to_vec());
        d
    }

    fn state_with(vaoi: u64) -> SimState {
        let mut s = SimState::new(1);
        s.vaoi[0] = vaoi;
        s.version[0] = vaoi;
        s.queue[0] = vaoi > 0;
        s
    }

    #[test]
    fn vaoi_grows_with_arrivals() {
        let mut s = state_with(2);
        let rec = step(&mut s, &decision(&[0], &[0.0]), &[true], &[1.0, 0.5]).unwrap();
        assert_eq!(rec.vaoi, vec![3]);
    }

    #[test]
    fn delivery_resets() {
        let mut s = state_with(5);
        let rec = step(&mut s, &decision(&[2], &[1.0]), &[false], &[1.0, 0.5, 0.0]).unwrap();
        assert_eq!(rec.vaoi, vec![0]);
        assert_eq!(rec.distortion, vec![0.0]);
        assert!(!s.queue[0]);
    }

    #[test]
    fn same_slot_arrival_and_delivery() {
        let mut s = state_with(0);
        let rec = step(&mut s, &decision(&[1], &[1.0]), &[true], &[1.0, 0.4]).unwrap();
        assert_eq!(rec.vaoi, vec![0]);
        assert_eq!(rec.distortion, vec![0.4]);
        assert_eq!(s.delivered[0], 1);
    }

    #[test]
    fn sending_from_an_empty_queue_is_refused() {
        let mut s = state_with(0);
        let err = step(&mut s, &decision(&[1], &[1.0]), &[false], &[1.0, 0.4]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    struct Coin(f64);

    impl SlotPolicy for Coin {
        fn decide(&mut self, view: &SlotView<'_>, rng: &mut ChaCha8Rng) -> Result<SlotDecision> {
            let mut d = SlotDecision::idle(view.queue.len());
            for i in 0..view.queue.len() {
                if view.queue[i] && rng.gen::<f64>() < self.0 {
                    d.rates.0[i] = 1;
                    d.power.0[i] = 1.0;
                }
            }
            Ok(d)
        }
    }

    #[test]
    fn certain_delivery_means_zero_vaoi() {
        let cfg = SystemConfig::symmetric(2, 0.7, 0.5, 1.0, 1.0, 1, &[1.0]);
        let sum = run(&cfg, || Ok(Box::new(Coin(1.0)) as Box<dyn SlotPolicy>), RunOptions::new(10_000, 3, 5)).unwrap();
        assert_eq!(sum.weighted_vaoi.mean, 0.0);
    }

    #[test]
    fn coin_matches_closed_form() {
        let cfg = SystemConfig::symmetric(1, 0.5, 1.0, 1.0, 1.0, 1, &[1.0]);
        let sum = run(&cfg, || Ok(Box::new(Coin(0.5)) as Box<dyn SlotPolicy>), RunOptions::new(200_000, 4, 11)).unwrap();
        assert!((sum.vaoi[0].mean - 0.5).abs() < 0.02, "{:?}", sum.vaoi[0]);
    }

    #[test]
    fn runs_are_reproducible() {
        let cfg = SystemConfig::symmetric(3, 0.5, 1.0 / 3.0, 2.0, 0.06, 2, &[0.1, 1.0]);
        let go = || run(&cfg, || PolicyKind::Greedy.heuristic(&cfg), RunOptions::new(2_000, 3, 9)).unwrap();
        let (a, b) = (go(), go());
        assert_eq!(a.traces, b.traces);
        let c = run(&cfg, || PolicyKind::Greedy.heuristic(&cfg), RunOptions::new(2_000, 3, 10)).unwrap();
        assert_ne!(a.traces, c.traces);
    }

    #[test]
    fn streams_differ() {
        let mut a = stream_rng(1, 0, Stream::Arrivals);
        let mut b = stream_rng(1, 0, Stream::Channels);
        let mut c = stream_rng(1, 1, Stream::Arrivals);
        let x: u64 = a.gen();
        assert_ne!(x, b.gen::<u64>());
        assert_ne!(x, c.gen::<u64>());
    }
}
