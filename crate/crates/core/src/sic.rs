//! Successive interference cancellation on the uplink MAC.
//!
//! For a fixed rate vector the set of power vectors that make it decodable is
//! a contra-polymatroid, so a weighted sum of powers is minimized at a vertex.
//! Each vertex corresponds to a decoding order; the order that minimizes the
//! weighted sum is found by sorting users by `h_i 1{rho_i > 0} / beta_i`.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::model::{RateFunction, RateVector};

/// Largest M accepted by [`brute_force_decoding_order`].
pub const BRUTE_FORCE_MAX_USERS: usize = 8;

/// `order[j]` is the user decoded at stage `j` (0-based).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DecodingOrder(pub Vec<usize>);

impl DecodingOrder {
    pub fn identity(m: usize) -> Self {
        DecodingOrder((0..m).collect())
    }

    pub fn is_permutation(&self) -> bool {
        let mut seen = vec![false; self.0.len()];
        self.0.iter().all(|&u| u < seen.len() && !std::mem::replace(&mut seen[u], true))
    }
}

/// Per-user transmit powers.
#[derive(Debug, Clone, PartialEq)]
pub struct PowerAllocation(pub Vec<f64>);

impl PowerAllocation {
    pub fn zeros(m: usize) -> Self {
        PowerAllocation(vec![0.0; m])
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

#[inline]
fn sort_key(h: f64, rho: u32, beta: f64) -> f64 {
    if rho == 0 {
        0.0
    } else if beta == 0.0 {
        f64::INFINITY
    } else {
        h / beta
    }
}

/// Decoding order minimizing `sum_i beta_i f_i` under the default rate map.
///
/// Users are sorted by `h_i 1{rho_i > 0} / beta_i`, largest first; a zero
/// multiplier on an active user counts as `+inf`. The sort is stable, so ties
/// and idle users keep ascending index order.
pub fn optimal_decoding_order(h: &[f64], rho: &RateVector, beta: &[f64]) -> DecodingOrder {
    let mut order = DecodingOrder::identity(h.len());
    optimal_decoding_order_into(h, &rho.0, beta, &mut order.0);
    order
}

/// Allocation-free variant used by the solver's inner loop.
pub(crate) fn optimal_decoding_order_into(h: &[f64], rho: &[u32], beta: &[f64], out: &mut Vec<usize>) {
    out.clear();
    out.extend(0..h.len());
    out.sort_by(|&a, &b| {
        let ka = sort_key(h[a], rho[a], beta[a]);
        let kb = sort_key(h[b], rho[b], beta[b]);
        kb.partial_cmp(&ka).expect("sort keys are never NaN")
    });
}

/// Vertex powers for decoding order `order`.
///
/// With `R_j` the bits of the users decoded at stages `j..M`, the user at
/// stage `j` needs `(g^-1(R_j) - g^-1(R_{j+1})) / h`. For `g = log2(1 + x)`
/// this is `g^-1(rho) / h * prod_{k > j} (1 + g^-1(rho_k))`.
pub fn sic_power_allocation(
    h: &[f64],
    rho: &RateVector,
    order: &DecodingOrder,
    g: &dyn RateFunction,
) -> PowerAllocation {
    let mut f = vec![0.0; h.len()];
    sic_power_allocation_into(h, &rho.0, &order.0, g, &mut f);
    PowerAllocation(f)
}

pub(crate) fn sic_power_allocation_into(
    h: &[f64],
    rho: &[u32],
    order: &[usize],
    g: &dyn RateFunction,
    out: &mut [f64],
) {
    let mut tail_bits = 0u32;
    let mut tail_power = 0.0;
    for &u in order.iter().rev() {
        if rho[u] == 0 {
            out[u] = 0.0;
            continue;
        }
        tail_bits += rho[u];
        let need = g.inverse(f64::from(tail_bits));
        out[u] = ((need - tail_power) / h[u]).max(0.0);
        tail_power = need;
    }
}

/// `sum_i beta_i f_i`.
pub fn weighted_sum_power(f: &PowerAllocation, beta: &[f64]) -> f64 {
    f.0.iter().zip(beta).map(|(p, b)| p * b).sum()
}

/// Exhaustive search over all `M!` decoding orders. Test oracle only.
pub fn brute_force_decoding_order(
    h: &[f64],
    rho: &RateVector,
    beta: &[f64],
    g: &dyn RateFunction,
) -> Result<(DecodingOrder, f64)> {
    let m = h.len();
    if m > BRUTE_FORCE_MAX_USERS {
        return Err(Error::Size(format!(
            "brute force over {m}! decoding orders refused (limit M = {BRUTE_FORCE_MAX_USERS})"
        )));
    }
    let mut best: Option<(DecodingOrder, f64)> = None;
    for perm in (0..m).permutations(m) {
        let order = DecodingOrder(perm);
        let cost = weighted_sum_power(&sic_power_allocation(h, rho, &order, g), beta);
        if best.as_ref().map_or(true, |(_, c)| cost < *c) {
            best = Some((order, cost));
        }
    }
    Ok(best.unwrap_or((DecodingOrder(vec![]), 0.0)))
}

/// Checks every nonempty subset constraint `sum_S rho_i <= g(sum_S f_i h_i) + tol`.
pub fn mac_feasible(h: &[f64], rho: &RateVector, f: &PowerAllocation, g: &dyn RateFunction, tol: f64) -> bool {
    worst_mac_violation(h, rho, f, g).map_or(true, |(_, v)| v <= tol)
}

/// Subset (as a bitmask over users) with the largest MAC violation
/// `sum_S rho_i - g(sum_S f_i h_i)`, if any constraint exists.
pub fn worst_mac_violation(h: &[f64], rho: &RateVector, f: &PowerAllocation, g: &dyn RateFunction) -> Option<(u64, f64)> {
    let m = h.len();
    assert!(m < 64, "subset enumeration limited to 63 users");
    let mut worst: Option<(u64, f64)> = None;
    for mask in 1u64..(1u64 << m) {
        let mut bits = 0.0;
        let mut rx = 0.0;
        for i in 0..m {
            if mask >> i & 1 == 1 {
                bits += f64::from(rho.0[i]);
                rx += f.0[i] * h[i];
            }
        }
        let v = bits - g.forward(rx);
        if worst.map_or(true, |(_, w)| v > w) {
            worst = Some((mask, v));
        }
    }
    worst
}
