//! Hierarchical max-min bandwidth allocation.
//!
//! A relay's capacity is divided evenly among the TCP connections it sends
//! on; a connection's share is divided evenly among the circuits
//! multiplexed over it; a circuit runs at the minimum of its per-hop
//! shares. Rates are max-min fair under that two-level weighting:
//! progressive filling freezes the globally most constrained circuits first
//! and redistributes the slack to everyone still unconstrained.

/// Allocation input decoupled from engine bookkeeping so tests can build
/// instances directly.
#[derive(Debug, Clone)]
pub struct Problem {
    /// Forwarding capacity per relay, bytes/second.
    pub capacities: Vec<f64>,
    /// `groups[relay]` lists the connections that relay sends on; each
    /// connection lists the circuit indices multiplexed over it. A circuit
    /// appears at most once per relay and at least once overall.
    pub groups: Vec<Vec<Vec<usize>>>,
    /// Per-circuit demand ceiling, bytes/second; +inf when unconstrained.
    /// Finite values arise from rate limiting at the circuit's edge link.
    pub demands: Vec<f64>,
    pub n_circuits: usize,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// Allocated rate per circuit, bytes/second.
    pub rates: Vec<f64>,
    /// Relay index whose share binds each circuit (lowest index on ties).
    pub bottlenecks: Vec<usize>,
}

/// Level `L` solving Σ min(d_i, L) = cap, or +inf when every demand fits.
/// `demands` may contain +inf entries (unconstrained participants).
fn water_level(cap: f64, demands: &mut [f64]) -> f64 {
    if demands.is_empty() {
        return f64::INFINITY;
    }
    demands.sort_unstable_by(|a, b| a.partial_cmp(b).expect("demands are never NaN"));
    let mut remaining = cap;
    let mut prev = 0.0;
    for (i, &d) in demands.iter().enumerate() {
        let m = (demands.len() - i) as f64;
        let need = (d - prev) * m;
        if !(need < remaining) {
            return prev + remaining / m;
        }
        remaining -= need;
        prev = d;
    }
    f64::INFINITY
}

pub fn solve(p: &Problem) -> Solution {
    let n = p.n_circuits;
    let mut rates = vec![0.0f64; n];
    let mut frozen = vec![false; n];
    let mut bottlenecks = vec![usize::MAX; n];
    if n == 0 {
        return Solution { rates, bottlenecks };
    }

    // Where each circuit sits in the nested group structure, so its bound
    // can be refreshed from cached shares without rescanning every relay.
    let mut positions: Vec<Vec<(u32, u32, u32)>> = vec![Vec::new(); n];
    for (r, conns) in p.groups.iter().enumerate() {
        for (g, members) in conns.iter().enumerate() {
            for (s, &c) in members.iter().enumerate() {
                positions[c].push((r as u32, g as u32, s as u32));
            }
        }
    }

    // Cached prospective share per (relay, connection, slot). A relay's
    // shares only move when one of its members froze, so each round
    // recomputes just the relays touched by the previous freeze.
    let mut share_of: Vec<Vec<Vec<f64>>> = p
        .groups
        .iter()
        .map(|conns| conns.iter().map(|m| vec![f64::INFINITY; m.len()]).collect())
        .collect();
    let mut dirty = vec![true; p.groups.len()];
    let mut dirty_list: Vec<usize> = (0..p.groups.len()).collect();
    let mut bound = vec![f64::INFINITY; n];
    let mut bound_relay = vec![usize::MAX; n];
    let mut affected: Vec<usize> = Vec::new();
    let mut touched = vec![false; n];
    let mut conn_demand: Vec<f64> = Vec::new();
    let mut level_buf: Vec<f64> = Vec::new();

    let mut remaining = n;
    while remaining > 0 {
        // Refresh the shares of relays whose membership changed, treating
        // frozen circuits as fixed demands.
        for di in 0..dirty_list.len() {
            let r = dirty_list[di];
            if !dirty[r] {
                continue;
            }
            dirty[r] = false;
            let conns = &p.groups[r];
            if conns.iter().all(|m| m.iter().all(|&c| frozen[c])) {
                continue;
            }
            conn_demand.clear();
            conn_demand.extend(conns.iter().map(|members| {
                members
                    .iter()
                    .map(|&c| if frozen[c] { rates[c] } else { p.demands[c] })
                    .sum::<f64>()
            }));
            level_buf.clear();
            level_buf.extend_from_slice(&conn_demand);
            let lam = water_level(p.capacities[r], &mut level_buf);
            for (g, members) in conns.iter().enumerate() {
                if members.iter().all(|&c| frozen[c]) {
                    continue;
                }
                let conn_alloc = conn_demand[g].min(lam);
                level_buf.clear();
                level_buf.extend(
                    members
                        .iter()
                        .map(|&c| if frozen[c] { rates[c] } else { p.demands[c] }),
                );
                let mu = water_level(conn_alloc, &mut level_buf);
                for (s, &c) in members.iter().enumerate() {
                    share_of[r][g][s] = p.demands[c].min(mu);
                    if !frozen[c] && !touched[c] {
                        touched[c] = true;
                        affected.push(c);
                    }
                }
            }
        }
        dirty_list.clear();

        // Bounds of circuits crossing a refreshed relay; everything else
        // still holds its previous minimum.
        for &c in &affected {
            touched[c] = false;
            let mut best = f64::INFINITY;
            let mut best_relay = usize::MAX;
            for &(r, g, s) in &positions[c] {
                let share = share_of[r as usize][g as usize][s as usize];
                if share < best {
                    best = share;
                    best_relay = r as usize;
                }
            }
            bound[c] = best;
            bound_relay[c] = best_relay;
        }
        affected.clear();

        let lam_star = (0..n)
            .filter(|&c| !frozen[c])
            .map(|c| bound[c])
            .fold(f64::INFINITY, f64::min);
        debug_assert!(
            lam_star.is_finite(),
            "every circuit must cross at least one relay"
        );
        for c in 0..n {
            if !frozen[c] && bound[c] <= lam_star * (1.0 + 1e-9) {
                frozen[c] = true;
                rates[c] = bound[c];
                bottlenecks[c] = bound_relay[c];
                remaining -= 1;
                for &(r, _, _) in &positions[c] {
                    if !dirty[r as usize] {
                        dirty[r as usize] = true;
                        dirty_list.push(r as usize);
                    }
                }
            }
        }
    }

    #[cfg(debug_assertions)]
    for (r, conns) in p.groups.iter().enumerate() {
        let total: f64 = conns
            .iter()
            .flat_map(|m| m.iter())
            .map(|&c| rates[c])
            .sum();
        debug_assert!(
            total <= p.capacities[r] * (1.0 + 1e-6),
            "relay {r} oversubscribed: {total} > {}",
            p.capacities[r]
        );
    }

    Solution { rates, bottlenecks }
}

#[cfg(test)]
mod tests {
    use super::*;

    const KB: f64 = 1024.0;

    #[test]
    fn one_relay_three_connections() {
        // 300 KB/s relay, three connections with one circuit each.
        let p = Problem {
            capacities: vec![300.0 * KB],
            groups: vec![vec![vec![0], vec![1], vec![2]]],
            demands: vec![f64::INFINITY; 3],
            n_circuits: 3,
        };
        let s = solve(&p);
        for r in s.rates {
            assert!((r - 100.0 * KB).abs() < 1e-9);
        }
    }

    #[test]
    fn two_level_split() {
        // 100 KB/s relay, two connections, one carrying two circuits:
        // {50, 25, 25}.
        let p = Problem {
            capacities: vec![100.0 * KB],
            groups: vec![vec![vec![0], vec![1, 2]]],
            demands: vec![f64::INFINITY; 3],
            n_circuits: 3,
        };
        let s = solve(&p);
        assert!((s.rates[0] - 50.0 * KB).abs() < 1e-9);
        assert!((s.rates[1] - 25.0 * KB).abs() < 1e-9);
        assert!((s.rates[2] - 25.0 * KB).abs() < 1e-9);
        assert_eq!(s.bottlenecks, vec![0, 0, 0]);
    }

    #[test]
    fn slack_from_elsewhere_bottlenecked_circuit_is_redistributed() {
        // Circuit 0 is capped at 10 by relay 1, so its connection at relay 0
        // only needs 10 of its 50 share; the surplus flows to the other
        // connection's two circuits.
        let p = Problem {
            capacities: vec![100.0, 10.0],
            groups: vec![vec![vec![0], vec![1, 2]], vec![vec![0]]],
            demands: vec![f64::INFINITY; 3],
            n_circuits: 3,
        };
        let s = solve(&p);
        assert!((s.rates[0] - 10.0).abs() < 1e-9);
        assert!((s.rates[1] - 45.0).abs() < 1e-9);
        assert!((s.rates[2] - 45.0).abs() < 1e-9);
        assert_eq!(s.bottlenecks[0], 1);
    }

    #[test]
    fn min_over_hops_binds() {
        // One circuit through three relays; the smallest relay decides.
        let p = Problem {
            capacities: vec![300.0, 80.0, 200.0],
            groups: vec![vec![vec![0]], vec![vec![0]], vec![vec![0]]],
            demands: vec![f64::INFINITY],
            n_circuits: 1,
        };
        let s = solve(&p);
        assert!((s.rates[0] - 80.0).abs() < 1e-9);
        assert_eq!(s.bottlenecks[0], 1);
    }

    #[test]
    fn empty_network() {
        let p = Problem {
            capacities: vec![],
            groups: vec![],
            demands: vec![],
            n_circuits: 0,
        };
        let s = solve(&p);
        assert!(s.rates.is_empty());
    }

    #[test]
    fn demand_cap_frees_share_for_peers() {
        // Circuit 0 is rate limited to 10; its unused share flows to
        // circuit 1 on the other connection.
        let p = Problem {
            capacities: vec![100.0],
            groups: vec![vec![vec![0], vec![1]]],
            demands: vec![10.0, f64::INFINITY],
            n_circuits: 2,
        };
        let s = solve(&p);
        assert!((s.rates[0] - 10.0).abs() < 1e-9);
        assert!((s.rates[1] - 90.0).abs() < 1e-9);
    }

    #[test]
    fn water_level_basics() {
        let mut d = vec![f64::INFINITY, f64::INFINITY];
        assert!((water_level(100.0, &mut d) - 50.0).abs() < 1e-12);
        let mut d = vec![10.0, f64::INFINITY];
        assert!((water_level(100.0, &mut d) - 90.0).abs() < 1e-12);
        let mut d = vec![10.0, 20.0];
        assert_eq!(water_level(100.0, &mut d), f64::INFINITY);
        let mut d = vec![30.0, 30.0, 30.0];
        // 90 total demand vs 60 capacity: level 20.
        assert!((water_level(60.0, &mut d) - 20.0).abs() < 1e-12);
    }
}
