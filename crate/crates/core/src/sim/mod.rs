//! Deterministic fixed-step network engine.
//!
//! Relays forward 512-byte cells over TCP connections in the download
//! direction; adjacent circuits share a connection; bandwidth is allocated
//! by hierarchical max-min fairness and recomputed only when the topology
//! changes. Every run is a pure function of (relay set, config, call
//! sequence): the RNG is seeded, all maps iterate in key order.

pub mod alloc;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mux::{self, AckTiming, CellScheduleRecord, StreamState, TrafficSource, CELL_BYTES};
use crate::relay::{Relay, RelayId, TokenBucket};
use crate::trace::ThroughputTrace;

/// Mean background-circuit lifetime in seconds for the churn process.
pub const BACKGROUND_MEAN_LIFETIME: f64 = 600.0;

/// Longest relay chain a circuit may traverse (client circuits use 3;
/// service-side rendezvous chains concatenate two of them plus the
/// rendezvous point, and the service end may skip its own hops).
pub const MAX_CHAIN_HOPS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CircuitId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StreamId(pub u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ClientId(pub u32);

impl fmt::Display for CircuitId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "c{}", self.0)
    }
}

impl fmt::Display for StreamId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "u{}", self.0)
    }
}

/// One TCP connection, keyed by its sending side. Path position 0 is
/// client-adjacent, so relay `path[0]` sends to the client endpoint and
/// relay `path[i]` sends to relay `path[i-1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum LinkKey {
    Relay { from: RelayId, to: RelayId },
    Client { from: RelayId, client: ClientId },
}

impl LinkKey {
    pub fn owner(&self) -> RelayId {
        match *self {
            LinkKey::Relay { from, .. } | LinkKey::Client { from, .. } => from,
        }
    }

    fn is_client_edge(&self) -> bool {
        matches!(self, LinkKey::Client { .. })
    }
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    /// Step length in seconds.
    pub tick: f64,
    pub seed: u64,
    /// Seconds over which a new circuit's share ramps linearly from zero.
    pub slow_start_ramp: f64,
    /// Background bulk circuits kept alive by the churn process.
    pub background_circuits: usize,
    /// Guards drawn per client.
    pub guard_set_size: usize,
    /// End-to-end delay before a window increment returns, seconds.
    pub ack_delay: f64,
    /// Relative spread applied per increment, uniform in ±ack_jitter_frac.
    pub ack_jitter_frac: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            tick: 0.1,
            seed: 0,
            slow_start_ramp: 5.0,
            background_circuits: 0,
            guard_set_size: 3,
            ack_delay: 0.6,
            ack_jitter_frac: 0.2,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tick > 0.0 && self.tick.is_finite()) {
            return Err(Error::config(format!("tick must be positive, got {}", self.tick)));
        }
        if !(self.slow_start_ramp >= 0.0) {
            return Err(Error::config("slow_start_ramp must be non-negative"));
        }
        if self.guard_set_size == 0 {
            return Err(Error::config("guard_set_size must be at least 1"));
        }
        if !(self.ack_delay >= 0.0) {
            return Err(Error::config("ack_delay must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.ack_jitter_frac) {
            return Err(Error::config("ack_jitter_frac must lie in [0, 1)"));
        }
        Ok(())
    }
}

/// Public view of a circuit.
#[derive(Debug, Clone)]
pub struct Circuit {
    pub id: CircuitId,
    pub client: ClientId,
    /// Client-adjacent relay first.
    pub path: Vec<RelayId>,
    pub streams: Vec<StreamId>,
    pub created_at: f64,
}

struct CircuitState {
    client: ClientId,
    path: Vec<RelayId>,
    created_tick: u64,
    /// Background circuits die and respawn; others live until removed.
    expiry_tick: Option<u64>,
    streams: Vec<StreamState>,
    rr_cursor: usize,
    /// Cached allocation, refreshed when the topology changes.
    rate: f64,
    bottleneck: Option<RelayId>,
    /// Demand ceiling the cached allocation was solved with.
    solved_demand: f64,
    /// Fractional-cell carry in bytes, always < 512 after a step.
    acc: f64,
    /// Whether per-tick byte/cell traces are kept. Background circuits
    /// skip them: nothing reads those traces back.
    recorded: bool,
}

/// Everything recorded about a circuit, kept after removal.
#[derive(Debug, Clone)]
pub struct CircuitRecord {
    pub client: ClientId,
    pub path: Vec<RelayId>,
    pub created_tick: u64,
    pub removed_tick: Option<u64>,
    /// Bytes delivered per tick since creation (empty when not recorded).
    pub bytes: Vec<u64>,
    pub cells: Vec<CellScheduleRecord>,
    /// Bottleneck changes as (first tick in effect, relay).
    pub bottlenecks: Vec<(u64, RelayId)>,
    /// False for background circuits, whose per-tick traces are not kept.
    pub recorded: bool,
}

#[derive(Debug, Clone)]
struct StreamRecord {
    circuit: CircuitId,
    created_tick: u64,
    bytes: Vec<u64>,
}

/// A maximal contiguous single-sender run of cells on a circuit. Ticks in
/// which several streams interleave are collapsed into `stream: None` runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellRun {
    pub stream: Option<StreamId>,
    pub cells: u64,
    pub start_tick: u64,
}

/// Pick a 3-hop path: guard uniform from the client's guard set, exit
/// capacity-weighted among exit-eligible relays, middle capacity-weighted
/// among everything left. All three distinct.
pub fn select_path(
    relays: &BTreeMap<RelayId, Relay>,
    guard_set: &[RelayId],
    rng: &mut impl Rng,
) -> Result<[RelayId; 3]> {
    if guard_set.is_empty() {
        return Err(Error::config("guard set is empty"));
    }
    let guard = guard_set[rng.random_range(0..guard_set.len())];
    match relays.get(&guard) {
        Some(r) if r.guard_eligible => {}
        Some(_) => return Err(Error::config(format!("{guard} is not guard eligible"))),
        None => return Err(Error::config(format!("unknown guard {guard}"))),
    }
    let exit = weighted_pick(relays.values().filter(|r| r.exit_eligible && r.id != guard), rng)?;
    let middle =
        weighted_pick(relays.values().filter(|r| r.id != guard && r.id != exit), rng)?;
    Ok([guard, middle, exit])
}

fn weighted_pick<'a>(
    candidates: impl Iterator<Item = &'a Relay>,
    rng: &mut impl Rng,
) -> Result<RelayId> {
    let cands: Vec<&Relay> = candidates.collect();
    if cands.is_empty() {
        return Err(Error::config("insufficient eligible relays for path selection"));
    }
    let dist = WeightedIndex::new(cands.iter().map(|r| r.capacity))
        .map_err(|e| Error::config(format!("bad selection weights: {e}")))?;
    Ok(cands[dist.sample(rng)].id)
}

pub struct Engine {
    config: SimConfig,
    relays: BTreeMap<RelayId, Relay>,
    circuits: BTreeMap<CircuitId, CircuitState>,
    /// Connection membership; entries disappear when the last circuit goes.
    links: BTreeMap<LinkKey, BTreeSet<CircuitId>>,
    /// Rate limiters on links whose owner throttles them.
    buckets: BTreeMap<LinkKey, TokenBucket>,
    /// Circuits crossing each relay, for conservation accounting.
    relay_members: BTreeMap<RelayId, BTreeSet<CircuitId>>,
    guard_sets: BTreeMap<ClientId, Vec<RelayId>>,
    records: BTreeMap<CircuitId, CircuitRecord>,
    stream_records: BTreeMap<StreamId, StreamRecord>,
    tick_index: u64,
    next_circuit: u64,
    next_stream: u64,
    next_client: u32,
    rng: ChaCha8Rng,
    alloc_dirty: bool,
    /// Per-circuit deliveries of the last tick, reused between ticks.
    last_delivered: Vec<(CircuitId, u64)>,
}

impl Engine {
    pub fn new(relays: Vec<Relay>, config: SimConfig) -> Result<Engine> {
        config.validate()?;
        let mut map = BTreeMap::new();
        for r in relays {
            if map.insert(r.id, r).is_some() {
                return Err(Error::config("duplicate relay id"));
            }
        }
        let mut eng = Engine {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            config,
            relays: map,
            circuits: BTreeMap::new(),
            links: BTreeMap::new(),
            buckets: BTreeMap::new(),
            relay_members: BTreeMap::new(),
            guard_sets: BTreeMap::new(),
            records: BTreeMap::new(),
            stream_records: BTreeMap::new(),
            tick_index: 0,
            next_circuit: 0,
            next_stream: 0,
            next_client: 0,
            alloc_dirty: true,
            last_delivered: Vec::new(),
        };
        for _ in 0..eng.config.background_circuits {
            eng.spawn_background()?;
        }
        Ok(eng)
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn relays(&self) -> &BTreeMap<RelayId, Relay> {
        &self.relays
    }

    pub fn connections(&self) -> &BTreeMap<LinkKey, BTreeSet<CircuitId>> {
        &self.links
    }

    /// TCP connections a relay currently sends on.
    pub fn connection_count(&self, relay: RelayId) -> usize {
        self.links.keys().filter(|k| k.owner() == relay).count()
    }

    pub fn tick_index(&self) -> u64 {
        self.tick_index
    }

    pub fn clock(&self) -> f64 {
        self.tick_index as f64 * self.config.tick
    }

    pub fn circuit_ids(&self) -> Vec<CircuitId> {
        self.circuits.keys().copied().collect()
    }

    pub fn circuit(&self, id: CircuitId) -> Option<Circuit> {
        self.circuits.get(&id).map(|st| Circuit {
            id,
            client: st.client,
            path: st.path.clone(),
            streams: st.streams.iter().map(|s| s.id).collect(),
            created_at: st.created_tick as f64 * self.config.tick,
        })
    }

    pub fn record(&self, id: CircuitId) -> Option<&CircuitRecord> {
        self.records.get(&id)
    }

    pub fn stream_state(&self, id: StreamId) -> Option<&StreamState> {
        let rec = self.stream_records.get(&id)?;
        self.circuits.get(&rec.circuit)?.streams.iter().find(|s| s.id == id)
    }

    pub fn guard_set(&self, client: ClientId) -> Option<&[RelayId]> {
        self.guard_sets.get(&client).map(|v| v.as_slice())
    }

    /// Register a client endpoint and draw its guards.
    pub fn new_client(&mut self) -> Result<ClientId> {
        let guards: Vec<RelayId> = self
            .relays
            .values()
            .filter(|r| r.guard_eligible)
            .map(|r| r.id)
            .collect();
        if guards.len() < self.config.guard_set_size {
            return Err(Error::config(format!(
                "need {} guard-eligible relays, have {}",
                self.config.guard_set_size,
                guards.len()
            )));
        }
        let picks = rand::seq::index::sample(&mut self.rng, guards.len(), self.config.guard_set_size);
        let set: Vec<RelayId> = picks.iter().map(|i| guards[i]).collect();
        let id = ClientId(self.next_client);
        self.next_client += 1;
        self.guard_sets.insert(id, set);
        Ok(id)
    }

    fn anonymous_client(&mut self) -> ClientId {
        let id = ClientId(self.next_client);
        self.next_client += 1;
        id
    }

    /// Build a 3-hop circuit for `client` using its guard set.
    pub fn add_client_circuit(&mut self, client: ClientId) -> Result<CircuitId> {
        let guard_set = self
            .guard_sets
            .get(&client)
            .ok_or_else(|| Error::config(format!("unknown client {client}")))?
            .clone();
        let path = select_path(&self.relays, &guard_set, &mut self.rng)?;
        self.install_circuit(client, path.to_vec(), None)
    }

    /// One-hop measurement circuit through `relay`, with a bulk stream
    /// already attached. It loads the relay like any other connection.
    pub fn add_probe_circuit(&mut self, relay: RelayId) -> Result<CircuitId> {
        if !self.relays.contains_key(&relay) {
            return Err(Error::data(format!("unknown relay {relay}")));
        }
        let client = self.anonymous_client();
        let id = self.install_circuit(client, vec![relay], None)?;
        self.add_stream(id, TrafficSource::Bulk)?;
        Ok(id)
    }

    /// Circuit over an explicit relay chain (1 to 8 hops, distinct relays).
    /// Chains longer than 3 model rendezvous paths through a service.
    pub fn add_chain_circuit(&mut self, path: &[RelayId]) -> Result<CircuitId> {
        if path.is_empty() || path.len() > MAX_CHAIN_HOPS {
            return Err(Error::config(format!(
                "chain length {} outside 1..={MAX_CHAIN_HOPS}",
                path.len()
            )));
        }
        let distinct: BTreeSet<RelayId> = path.iter().copied().collect();
        if distinct.len() != path.len() {
            return Err(Error::config("chain relays must be distinct"));
        }
        for r in path {
            if !self.relays.contains_key(r) {
                return Err(Error::data(format!("unknown relay {r}")));
            }
        }
        let client = self.anonymous_client();
        self.install_circuit(client, path.to_vec(), None)
    }

    fn install_circuit(
        &mut self,
        client: ClientId,
        path: Vec<RelayId>,
        expiry_tick: Option<u64>,
    ) -> Result<CircuitId> {
        debug_assert!(!path.is_empty());
        let id = CircuitId(self.next_circuit);
        self.next_circuit += 1;
        let recorded = expiry_tick.is_none();
        for key in Self::link_keys(&path, client) {
            let fresh = !self.links.contains_key(&key);
            self.links.entry(key).or_default().insert(id);
            if fresh {
                let owner = &self.relays[&key.owner()];
                if let Some(t) = owner.throttle {
                    if key.is_client_edge() || !t.applies_to_non_relays_only {
                        self.buckets.insert(key, TokenBucket::new(t));
                    }
                }
            }
        }
        for r in &path {
            self.relay_members.entry(*r).or_default().insert(id);
        }
        self.records.insert(
            id,
            CircuitRecord {
                client,
                path: path.clone(),
                created_tick: self.tick_index,
                removed_tick: None,
                bytes: Vec::new(),
                cells: Vec::new(),
                bottlenecks: Vec::new(),
                recorded,
            },
        );
        self.circuits.insert(
            id,
            CircuitState {
                client,
                path,
                created_tick: self.tick_index,
                expiry_tick,
                streams: Vec::new(),
                rr_cursor: 0,
                rate: 0.0,
                bottleneck: None,
                solved_demand: f64::INFINITY,
                acc: 0.0,
                recorded,
            },
        );
        self.alloc_dirty = true;
        Ok(id)
    }

    pub fn remove_circuit(&mut self, id: CircuitId) -> Result<()> {
        let st = self
            .circuits
            .remove(&id)
            .ok_or_else(|| Error::data(format!("unknown circuit {id}")))?;
        for key in Self::link_keys(&st.path, st.client) {
            if let Some(members) = self.links.get_mut(&key) {
                members.remove(&id);
                if members.is_empty() {
                    self.links.remove(&key);
                    self.buckets.remove(&key);
                }
            }
        }
        for r in &st.path {
            if let Some(m) = self.relay_members.get_mut(r) {
                m.remove(&id);
                if m.is_empty() {
                    self.relay_members.remove(r);
                }
            }
        }
        self.records.get_mut(&id).expect("record exists").removed_tick = Some(self.tick_index);
        self.alloc_dirty = true;
        Ok(())
    }

    pub fn add_stream(&mut self, circuit: CircuitId, source: TrafficSource) -> Result<StreamId> {
        let st = self
            .circuits
            .get_mut(&circuit)
            .ok_or_else(|| Error::data(format!("unknown circuit {circuit}")))?;
        let id = StreamId(self.next_stream);
        self.next_stream += 1;
        st.streams.push(StreamState::new(id, source));
        self.stream_records.insert(
            id,
            StreamRecord { circuit, created_tick: self.tick_index, bytes: Vec::new() },
        );
        Ok(id)
    }

    fn link_keys(path: &[RelayId], client: ClientId) -> Vec<LinkKey> {
        let mut keys = vec![LinkKey::Client { from: path[0], client }];
        for i in 1..path.len() {
            keys.push(LinkKey::Relay { from: path[i], to: path[i - 1] });
        }
        keys
    }

    /// Demand ceiling the edge rate limiters impose on a circuit: the
    /// long-term rate plus whatever burst allowance is still unspent.
    fn throttle_demand(&self, st: &CircuitState, id: CircuitId) -> f64 {
        let mut demand = f64::INFINITY;
        for key in Self::link_keys(&st.path, st.client) {
            if let Some(bucket) = self.buckets.get(&key) {
                debug_assert!(self.links[&key].contains(&id));
                let limit = bucket.rate_limit();
                let excess = (bucket.available() as f64 - limit).max(0.0);
                demand = demand.min(limit + excess);
            }
        }
        demand
    }

    fn build_problem(&self) -> (alloc::Problem, Vec<CircuitId>, Vec<RelayId>) {
        let circuit_ids: Vec<CircuitId> = self.circuits.keys().copied().collect();
        let relay_ids: Vec<RelayId> = self.relays.keys().copied().collect();
        let cindex: BTreeMap<CircuitId, usize> =
            circuit_ids.iter().enumerate().map(|(i, c)| (*c, i)).collect();
        let rindex: BTreeMap<RelayId, usize> =
            relay_ids.iter().enumerate().map(|(i, r)| (*r, i)).collect();
        let mut groups: Vec<Vec<Vec<usize>>> = vec![Vec::new(); relay_ids.len()];
        for (key, members) in &self.links {
            groups[rindex[&key.owner()]]
                .push(members.iter().map(|c| cindex[c]).collect());
        }
        let capacities = relay_ids.iter().map(|r| self.relays[r].capacity).collect();
        let demands = circuit_ids
            .iter()
            .map(|c| self.throttle_demand(&self.circuits[c], *c))
            .collect();
        let problem = alloc::Problem {
            capacities,
            groups,
            demands,
            n_circuits: circuit_ids.len(),
        };
        (problem, circuit_ids, relay_ids)
    }

    /// Max-min fair rates for the current topology, bytes/second.
    pub fn allocate_bandwidth(&self) -> BTreeMap<CircuitId, f64> {
        let (problem, circuit_ids, _) = self.build_problem();
        let sol = alloc::solve(&problem);
        circuit_ids.into_iter().zip(sol.rates).collect()
    }

    /// Relay whose share binds each circuit under the current allocation.
    pub fn bottlenecks(&self) -> BTreeMap<CircuitId, RelayId> {
        let (problem, circuit_ids, relay_ids) = self.build_problem();
        let sol = alloc::solve(&problem);
        circuit_ids
            .into_iter()
            .zip(sol.bottlenecks)
            .map(|(c, r)| (c, relay_ids[r]))
            .collect()
    }

    fn refresh_allocation(&mut self) {
        let (problem, circuit_ids, relay_ids) = self.build_problem();
        let sol = alloc::solve(&problem);
        for (i, id) in circuit_ids.iter().enumerate() {
            let bottleneck = relay_ids[sol.bottlenecks[i]];
            let st = self.circuits.get_mut(id).expect("circuit exists");
            st.rate = sol.rates[i];
            st.solved_demand = problem.demands[i];
            if st.bottleneck != Some(bottleneck) {
                st.bottleneck = Some(bottleneck);
                self.records
                    .get_mut(id)
                    .expect("record exists")
                    .bottlenecks
                    .push((self.tick_index, bottleneck));
            }
        }
        self.alloc_dirty = false;
    }

    fn process_churn(&mut self) {
        let now = self.tick_index;
        let expired: Vec<(CircuitId, bool)> = self
            .circuits
            .iter()
            .filter(|(_, st)| st.expiry_tick.is_some_and(|e| e <= now))
            .map(|(id, st)| (*id, st.recorded))
            .collect();
        for (id, foreground) in expired {
            self.remove_circuit(id).expect("expired circuit exists");
            // Only the background population is held constant; an expiring
            // foreground circuit is simply torn down.
            if !foreground {
                self.spawn_background().expect("respawn uses the same relay set");
            }
        }
    }

    /// Schedule a circuit's teardown `seconds` from now.
    pub fn expire_after(&mut self, circuit: CircuitId, seconds: f64) -> Result<()> {
        let st = self
            .circuits
            .get_mut(&circuit)
            .ok_or_else(|| Error::data(format!("unknown circuit {circuit}")))?;
        st.expiry_tick = Some(self.tick_index + (seconds / self.config.tick).ceil() as u64);
        Ok(())
    }

    fn spawn_background(&mut self) -> Result<CircuitId> {
        let client = self.new_client()?;
        let guard_set = self.guard_sets[&client].clone();
        let path = select_path(&self.relays, &guard_set, &mut self.rng)?;
        let life = Exp::new(1.0 / BACKGROUND_MEAN_LIFETIME)
            .expect("positive rate")
            .sample(&mut self.rng);
        let expiry = self.tick_index + (life / self.config.tick).ceil() as u64 + 1;
        let id = self.install_circuit(client, path.to_vec(), Some(expiry))?;
        self.add_stream(id, TrafficSource::Bulk)?;
        Ok(id)
    }

    /// Advance one tick. Returns bytes delivered per circuit.
    pub fn step(&mut self) -> BTreeMap<CircuitId, u64> {
        self.advance();
        self.last_delivered.iter().copied().collect()
    }

    fn advance(&mut self) {
        let now = self.tick_index;
        let tick = self.config.tick;

        self.process_churn();

        // Rate limiters feed back into allocation: once a bucket's burst
        // allowance drifts away from what the cached solution assumed, the
        // ceiling moved and the water levels must be recomputed.
        if !self.buckets.is_empty() && !self.alloc_dirty {
            let mut drifted = false;
            for (id, st) in &self.circuits {
                let d = self.throttle_demand(st, *id);
                if d.is_infinite() && st.solved_demand.is_infinite() {
                    continue;
                }
                if (d - st.solved_demand).abs() > 0.05 * st.solved_demand {
                    drifted = true;
                    break;
                }
            }
            self.alloc_dirty = drifted;
        }
        if self.alloc_dirty {
            self.refresh_allocation();
        }

        // Cell budgets from allocation, ramped for young circuits. The
        // sub-cell remainder stays in the accumulator. Budgets live in a
        // vector aligned with the sorted circuit ids so the trim passes
        // below can index them without map lookups.
        let ramp = self.config.slow_start_ramp;
        let ids: Vec<CircuitId> = self.circuits.keys().copied().collect();
        let mut budgets: Vec<u64> = Vec::with_capacity(ids.len());
        for st in self.circuits.values_mut() {
            let age = (now - st.created_tick) as f64 * tick;
            let scale = if ramp <= 0.0 { 1.0 } else { (age / ramp).min(1.0) };
            st.acc += st.rate * scale * tick;
            let cells = (st.acc / CELL_BYTES as f64).floor() as u64;
            st.acc -= (cells * CELL_BYTES) as f64;
            budgets.push(cells);
        }
        let idx = |c: &CircuitId| ids.binary_search(c).expect("member circuit exists");

        // Conservation: per relay, whole cells forwarded this tick may not
        // exceed capacity x tick. Quantization slop is trimmed from the
        // largest budgets and dropped; banking it would feed the excess
        // straight back into the next tick's budgets and grow without bound.
        for (rid, members) in &self.relay_members {
            let cap_cells = (self.relays[rid].capacity * tick / CELL_BYTES as f64).floor() as u64;
            trim_to_limit(&mut budgets, members.iter().map(&idx), cap_cells);
        }

        // Rate limiters cap their link's total; surplus cells are dropped,
        // not banked, so a limited flow cannot burst past the bucket later.
        for (key, bucket) in self.buckets.iter_mut() {
            bucket.refill(tick);
            let limit_cells = bucket.available() / CELL_BYTES;
            trim_to_limit(&mut budgets, self.links[key].iter().map(&idx), limit_cells);
        }

        // Streams consume their circuit's budget in whole cells.
        let ack = AckTiming {
            delay: self.config.ack_delay,
            jitter_frac: self.config.ack_jitter_frac,
            tick,
        };
        let mut deliveries = std::mem::take(&mut self.last_delivered);
        deliveries.clear();
        for ((id, st), budget) in self.circuits.iter_mut().zip(budgets) {
            for s in st.streams.iter_mut() {
                mux::mature_increments(s, now);
                s.release_due(now);
            }
            let recs = if budget > 0 && !st.streams.is_empty() {
                mux::schedule_cells(&mut st.streams, &mut st.rr_cursor, budget, now, &ack, &mut self.rng)
            } else {
                Vec::new()
            };
            let bytes: u64 = recs.iter().map(|r| r.cells).sum::<u64>() * CELL_BYTES;
            deliveries.push((*id, bytes));

            // Background circuits skip trace bookkeeping: nothing reads it
            // back, and at scale the per-tick pushes dominate the step cost.
            if !st.recorded {
                continue;
            }
            let rec = self.records.get_mut(id).expect("record exists");
            debug_assert_eq!(rec.bytes.len() as u64, now - st.created_tick);
            rec.bytes.push(bytes);
            for s in &st.streams {
                let sr = self.stream_records.get_mut(&s.id).expect("stream record");
                let cells = recs
                    .iter()
                    .find(|r| r.stream == s.id)
                    .map_or(0, |r| r.cells);
                sr.bytes.push(cells * CELL_BYTES);
            }
            rec.cells.extend(recs);
        }

        // Spend tokens for what actually crossed each limited link.
        for (key, bucket) in self.buckets.iter_mut() {
            let used: u64 = self.links[key]
                .iter()
                .map(|c| deliveries[idx(c)].1)
                .sum();
            bucket.spend(used);
        }

        self.last_delivered = deliveries;
        self.tick_index += 1;
    }

    /// Step for `seconds` of simulated time.
    pub fn run(&mut self, seconds: f64) {
        let n = (seconds / self.config.tick).round() as u64;
        for _ in 0..n {
            self.advance();
        }
    }

    /// Drive the engine for `duration` seconds while measuring one
    /// circuit. If the circuit disappears mid-window the error carries the
    /// partial trace.
    pub fn sample_trace(&mut self, circuit: CircuitId, duration: f64) -> Result<ThroughputTrace> {
        if !self.circuits.contains_key(&circuit) {
            return Err(Error::data(format!("unknown circuit {circuit}")));
        }
        let start = self.tick_index;
        let n = (duration / self.config.tick).round() as u64;
        for _ in 0..n {
            self.advance();
            if !self.circuits.contains_key(&circuit) {
                let partial = self.trace_between(circuit, start, self.tick_index)?;
                return Err(Error::TruncatedTrace { partial });
            }
        }
        self.trace_between(circuit, start, start + n)
    }

    /// Recorded throughput of a circuit over [from, to) seconds.
    pub fn circuit_trace(&self, circuit: CircuitId, from: f64, to: f64) -> Result<ThroughputTrace> {
        let t0 = (from / self.config.tick).round() as u64;
        let t1 = (to / self.config.tick).round() as u64;
        self.trace_between(circuit, t0, t1)
    }

    fn trace_between(&self, circuit: CircuitId, t0: u64, t1: u64) -> Result<ThroughputTrace> {
        let rec = self
            .records
            .get(&circuit)
            .ok_or_else(|| Error::data(format!("unknown circuit {circuit}")))?;
        if !rec.recorded {
            return Err(Error::data(format!("{circuit} is a background circuit with no trace")));
        }
        let t0 = t0.max(rec.created_tick);
        let end = rec.created_tick + rec.bytes.len() as u64;
        let t1 = t1.min(end);
        if t1 <= t0 {
            return Err(Error::data(format!("no recorded ticks for {circuit} in window")));
        }
        let tick = self.config.tick;
        let samples = rec.bytes[(t0 - rec.created_tick) as usize..(t1 - rec.created_tick) as usize]
            .iter()
            .map(|&b| b as f64 / tick)
            .collect();
        ThroughputTrace::new(t0 as f64 * tick, tick, samples)
    }

    /// Recorded throughput of a single stream over [from, to) seconds.
    pub fn stream_trace(&self, stream: StreamId, from: f64, to: f64) -> Result<ThroughputTrace> {
        let rec = self
            .stream_records
            .get(&stream)
            .ok_or_else(|| Error::data(format!("unknown stream {stream}")))?;
        if !self.records[&rec.circuit].recorded {
            return Err(Error::data(format!("{stream} rides a background circuit with no trace")));
        }
        let tick = self.config.tick;
        let t0 = ((from / tick).round() as u64).max(rec.created_tick);
        let end = rec.created_tick + rec.bytes.len() as u64;
        let t1 = ((to / tick).round() as u64).min(end);
        if t1 <= t0 {
            return Err(Error::data(format!("no recorded ticks for {stream} in window")));
        }
        let samples = rec.bytes[(t0 - rec.created_tick) as usize..(t1 - rec.created_tick) as usize]
            .iter()
            .map(|&b| b as f64 / tick)
            .collect();
        ThroughputTrace::new(t0 as f64 * tick, tick, samples)
    }

    /// Bottleneck relay that held for the most ticks of [from, to).
    pub fn bottleneck_majority(&self, circuit: CircuitId, from: f64, to: f64) -> Option<RelayId> {
        let rec = self.records.get(&circuit)?;
        if rec.bottlenecks.is_empty() {
            return None;
        }
        let tick = self.config.tick;
        let t0 = (from / tick).round() as u64;
        let t1 = (to / tick).round() as u64;
        let mut held: BTreeMap<RelayId, u64> = BTreeMap::new();
        for (i, &(start, relay)) in rec.bottlenecks.iter().enumerate() {
            let seg_end = rec
                .bottlenecks
                .get(i + 1)
                .map_or(u64::MAX, |&(next, _)| next);
            let lo = start.max(t0);
            let hi = seg_end.min(t1);
            if hi > lo {
                *held.entry(relay).or_default() += hi - lo;
            }
        }
        held.into_iter()
            .max_by_key(|&(relay, ticks)| (ticks, std::cmp::Reverse(relay)))
            .map(|(relay, _)| relay)
    }

    /// Maximal single-sender cell runs on a circuit, in delivery order.
    pub fn cell_runs(&self, circuit: CircuitId) -> Vec<CellRun> {
        let rec = match self.records.get(&circuit) {
            Some(r) => r,
            None => return Vec::new(),
        };
        let mut runs: Vec<CellRun> = Vec::new();
        let mut i = 0;
        while i < rec.cells.len() {
            let tick = rec.cells[i].tick;
            let mut j = i;
            while j < rec.cells.len() && rec.cells[j].tick == tick {
                j += 1;
            }
            let group = &rec.cells[i..j];
            if group.len() == 1 {
                let r = group[0];
                match runs.last_mut() {
                    Some(run) if run.stream == Some(r.stream) => run.cells += r.cells,
                    _ => runs.push(CellRun {
                        stream: Some(r.stream),
                        cells: r.cells,
                        start_tick: r.tick,
                    }),
                }
            } else {
                // Several streams interleave cell-by-cell within the tick;
                // no single-sender run survives it.
                runs.push(CellRun {
                    stream: None,
                    cells: group.iter().map(|r| r.cells).sum(),
                    start_tick: tick,
                });
            }
            i = j;
        }
        runs
    }
}

/// Shave whole cells off a member group until its total fits `limit_cells`,
/// always taking from the currently largest budget (ties broken toward the
/// smaller slot index, i.e. the older circuit). Equivalent to removing one
/// cell at a time but runs each strictly-largest stretch as one cut.
fn trim_to_limit(
    budgets: &mut [u64],
    members: impl Iterator<Item = usize> + Clone,
    limit_cells: u64,
) {
    let total: u64 = members.clone().map(|i| budgets[i]).sum();
    let mut over = total.saturating_sub(limit_cells);
    if over == 0 {
        return;
    }
    let heap_init: Vec<(u64, std::cmp::Reverse<usize>)> =
        members.map(|i| (budgets[i], std::cmp::Reverse(i))).collect();
    let mut heap = std::collections::BinaryHeap::from(heap_init);
    while over > 0 {
        let (b, slot) = heap.pop().expect("group has members");
        if b == 0 {
            heap.push((b, slot));
            break;
        }
        let next = heap.peek().map_or(0, |&(nb, _)| nb);
        let cut = over.min((b - next).max(1)).min(b);
        heap.push((b - cut, slot));
        over -= cut;
    }
    for (b, std::cmp::Reverse(i)) in heap {
        budgets[i] = b;
    }
}
