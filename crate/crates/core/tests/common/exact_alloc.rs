//! Independently coded water-filling oracle in exact rational arithmetic.
//! The oracle freezes exactly one circuit per round (the production code
//! freezes batches in floating point), so agreement is evidence, not
//! tautology.

use std::collections::BTreeMap;

use flowprint::sim::alloc::{solve, Problem};
use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

type Rat = BigRational;

fn rat(v: u64) -> Rat {
    BigRational::from_integer(BigInt::from(v))
}

/// min with None standing for +infinity.
fn omin(a: Option<Rat>, b: Option<Rat>) -> Option<Rat> {
    match (a, b) {
        (Some(x), Some(y)) => Some(x.min(y)),
        (Some(x), None) | (None, Some(x)) => Some(x),
        (None, None) => None,
    }
}

/// Exact water level: L with sum_i min(d_i, L) = cap, None when every
/// demand fits under cap.
fn level(cap: &Rat, demands: &[Option<Rat>]) -> Option<Rat> {
    let mut finite: Vec<&Rat> = demands.iter().flatten().collect();
    finite.sort();
    let mut m = demands.len();
    let mut remaining = cap.clone();
    let mut prev = Rat::zero();
    for d in finite {
        let need = (d - &prev) * rat(m as u64);
        if need >= remaining {
            return Some(prev + remaining / rat(m as u64));
        }
        remaining -= need;
        prev = d.clone();
        m -= 1;
    }
    if m > 0 {
        Some(prev + remaining / rat(m as u64))
    } else {
        None
    }
}

pub struct Inst {
    pub caps: Vec<u64>,
    pub groups: Vec<Vec<Vec<usize>>>,
    /// None = unconstrained demand.
    pub demands: Vec<Option<u64>>,
    pub n: usize,
}

pub fn oracle(inst: &Inst) -> Vec<Rat> {
    let n = inst.n;
    let mut frozen: Vec<Option<Rat>> = vec![None; n];
    for _ in 0..n {
        let mut bound: Vec<Option<Rat>> = (0..n).map(|c| inst.demands[c].map(rat)).collect();
        for (r, conns) in inst.groups.iter().enumerate() {
            let conn_demand: Vec<Option<Rat>> = conns
                .iter()
                .map(|ms| {
                    let mut s = Rat::zero();
                    for &c in ms {
                        match (&frozen[c], inst.demands[c]) {
                            (Some(rate), _) => s += rate,
                            (None, Some(d)) => s += rat(d),
                            (None, None) => return None,
                        }
                    }
                    Some(s)
                })
                .collect();
            let lam = level(&rat(inst.caps[r]), &conn_demand);
            for (g, ms) in conns.iter().enumerate() {
                if ms.iter().all(|&c| frozen[c].is_some()) {
                    continue;
                }
                let alloc = omin(conn_demand[g].clone(), lam.clone());
                let mu = match alloc {
                    Some(a) => {
                        let mdem: Vec<Option<Rat>> = ms
                            .iter()
                            .map(|&c| frozen[c].clone().or_else(|| inst.demands[c].map(rat)))
                            .collect();
                        level(&a, &mdem)
                    }
                    None => None,
                };
                for &c in ms {
                    if frozen[c].is_none() {
                        bound[c] = omin(bound[c].clone(), mu.clone());
                    }
                }
            }
        }
        // Freeze the single most constrained circuit; ties to lowest index.
        let mut best: Option<(Rat, usize)> = None;
        for (c, b) in bound.iter().enumerate() {
            if frozen[c].is_some() {
                continue;
            }
            let b = b.clone().expect("every circuit crosses a relay");
            if best.as_ref().map_or(true, |(bb, _)| b < *bb) {
                best = Some((b, c));
            }
        }
        let (b, c) = best.expect("unfrozen circuit remains");
        frozen[c] = Some(b);
    }
    frozen.into_iter().map(|f| f.expect("all frozen")).collect()
}

pub fn gen_instance(rng: &mut ChaCha8Rng, with_demands: bool) -> Inst {
    let n_relays = rng.random_range(1..=30);
    let caps: Vec<u64> = (0..n_relays)
        .map(|_| {
            let lo = (20.0f64 * 1024.0).ln();
            let hi = (10.0f64 * 1024.0 * 1024.0).ln();
            rng.random_range(lo..hi).exp() as u64
        })
        .collect();
    let n = rng.random_range(1..=100);
    // Links keyed by (owning relay, peer): peer >= 0 is a relay, negative
    // encodes a client endpoint drawn from a small pool so some client
    // links are shared.
    let mut links: BTreeMap<(usize, i64), Vec<usize>> = BTreeMap::new();
    let mut demands: Vec<Option<u64>> = Vec::new();
    for c in 0..n {
        let hops = if n_relays >= 3 && rng.random_bool(0.7) { 3 } else { 1 };
        let path = rand::seq::index::sample(rng, n_relays, hops).into_vec();
        let client = rng.random_range(0..40i64);
        links.entry((path[0], -(client + 1))).or_default().push(c);
        for w in path.windows(2) {
            links.entry((w[1], w[0] as i64)).or_default().push(c);
        }
        let capped = with_demands && rng.random_bool(0.15);
        demands.push(capped.then(|| rng.random_range(10_000..200_000)));
    }
    let mut groups = vec![Vec::new(); n_relays];
    for ((owner, _), ms) in links {
        groups[owner].push(ms);
    }
    Inst { caps, groups, demands, n }
}

pub fn check_instance(inst: &Inst) -> Result<(), String> {
    let problem = Problem {
        capacities: inst.caps.iter().map(|&c| c as f64).collect(),
        groups: inst.groups.clone(),
        demands: inst
            .demands
            .iter()
            .map(|d| d.map_or(f64::INFINITY, |v| v as f64))
            .collect(),
        n_circuits: inst.n,
    };
    let got = solve(&problem);
    let want = oracle(inst);

    // Exact feasibility of the oracle itself.
    for (r, conns) in inst.groups.iter().enumerate() {
        let total: Rat = conns.iter().flatten().map(|&c| want[c].clone()).sum();
        if total > rat(inst.caps[r]) {
            return Err(format!("oracle oversubscribes relay {r}"));
        }
    }

    for c in 0..inst.n {
        let w = want[c].to_f64().expect("rate in f64 range");
        let rel = (got.rates[c] - w).abs() / w.max(1.0);
        if rel > 1e-6 {
            return Err(format!(
                "circuit {c}: solver {} vs oracle {} (rel {rel:.3e})",
                got.rates[c], w
            ));
        }
    }
    Ok(())
}

/// `count` random instances against the exact oracle; first mismatch wins.
pub fn check_allocator(seed: u64, count: usize, with_demands: bool) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..count {
        check_instance(&gen_instance(&mut rng, with_demands))
            .map_err(|e| format!("instance {i}: {e}"))?;
    }
    Ok(())
}
