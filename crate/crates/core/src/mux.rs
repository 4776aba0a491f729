//! Stream-level flow control within a circuit: packaging windows, delayed
//! 50-cell increments, and cell-granular round-robin scheduling. The
//! batching this produces is what makes streams multiplexed on one circuit
//! mutually exclusive at micro timescales.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::sim::StreamId;

pub const CELL_BYTES: u64 = 512;
pub const INITIAL_WINDOW: u32 = 500;
pub const WINDOW_INCREMENT: u32 = 50;

/// A window increment in flight back to the sender.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingIncrement {
    /// First tick at which the increment may be applied.
    pub arrival_tick: u64,
    pub cells: u32,
}

/// What a stream has to say when the scheduler offers it cells.
#[derive(Debug, Clone, PartialEq)]
pub enum TrafficSource {
    /// Always backlogged.
    Bulk,
    /// Data appears in bursts: (release tick, bytes), sorted by tick.
    Scripted { bursts: Vec<(u64, u64)>, next: usize },
    /// Bursts separated by idle gaps, where each gap starts only once the
    /// previous burst has fully drained; `bursts[i]` is followed by
    /// `gap_ticks[i]`.
    Interactive {
        bursts: Vec<u64>,
        gap_ticks: Vec<u64>,
        next: usize,
        /// Tick at which the pending burst is released; None while draining.
        release_at: Option<u64>,
    },
}

impl TrafficSource {
    pub fn scripted(bursts: Vec<(u64, u64)>) -> Self {
        debug_assert!(bursts.windows(2).all(|w| w[0].0 <= w[1].0));
        TrafficSource::Scripted { bursts, next: 0 }
    }

    pub fn interactive(bursts: Vec<u64>, gap_ticks: Vec<u64>) -> Self {
        debug_assert_eq!(bursts.len(), gap_ticks.len());
        TrafficSource::Interactive { bursts, gap_ticks, next: 0, release_at: Some(0) }
    }
}

#[derive(Debug, Clone)]
pub struct StreamState {
    pub id: StreamId,
    pub package_window: u32,
    pub pending_increments: Vec<PendingIncrement>,
    pub bytes_sent: u64,
    pub cells_sent: u64,
    /// Cells credited back by matured increments.
    pub cells_credited: u64,
    /// Bytes released by the source but not yet packaged.
    pub backlog: u64,
    pub source: TrafficSource,
}

impl StreamState {
    pub fn new(id: StreamId, source: TrafficSource) -> Self {
        StreamState {
            id,
            package_window: INITIAL_WINDOW,
            pending_increments: Vec::new(),
            bytes_sent: 0,
            cells_sent: 0,
            cells_credited: 0,
            backlog: 0,
            source,
        }
    }

    /// Move source bytes due by `now_tick` into the backlog. For interactive
    /// sources this also starts the next gap once the backlog has drained.
    pub fn release_due(&mut self, now_tick: u64) {
        match &mut self.source {
            TrafficSource::Bulk => {}
            TrafficSource::Scripted { bursts, next } => {
                while *next < bursts.len() && bursts[*next].0 <= now_tick {
                    self.backlog += bursts[*next].1;
                    *next += 1;
                }
            }
            TrafficSource::Interactive { bursts, gap_ticks, next, release_at } => {
                match *release_at {
                    Some(t) => {
                        if t <= now_tick && *next < bursts.len() {
                            self.backlog += bursts[*next];
                            *next += 1;
                            *release_at = None;
                        }
                    }
                    None => {
                        if self.backlog == 0 && *next > 0 && *next < bursts.len() {
                            *release_at = Some(now_tick + gap_ticks[*next - 1].max(1));
                        }
                    }
                }
            }
        }
    }

    /// Whole cells the stream could fill right now, ignoring its window.
    pub fn demand_cells(&self) -> u64 {
        match self.source {
            TrafficSource::Bulk => u64::MAX,
            TrafficSource::Scripted { .. } | TrafficSource::Interactive { .. } => {
                self.backlog.div_ceil(CELL_BYTES)
            }
        }
    }

    fn eligible(&self) -> bool {
        self.package_window > 0 && self.demand_cells() > 0
    }

    fn sendable_cells(&self) -> u64 {
        (self.package_window as u64).min(self.demand_cells())
    }
}

/// Apply every queued increment that has arrived by `now_tick`. The window
/// cannot exceed the initial 500: credits never outrun sent cells.
pub fn mature_increments(stream: &mut StreamState, now_tick: u64) -> u32 {
    let mut i = 0;
    while i < stream.pending_increments.len() {
        if stream.pending_increments[i].arrival_tick <= now_tick {
            let inc = stream.pending_increments.swap_remove(i);
            stream.package_window =
                (stream.package_window + inc.cells).min(INITIAL_WINDOW);
            stream.cells_credited += inc.cells as u64;
        } else {
            i += 1;
        }
    }
    debug_assert!(stream.package_window <= INITIAL_WINDOW);
    stream.package_window
}

/// Cells handed to one stream during one tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellScheduleRecord {
    pub tick: u64,
    pub stream: StreamId,
    pub cells: u64,
}

/// Timing of window increments: one scalar delay per circuit plus a seeded
/// jitter fraction standing in for variation in the ack return path.
#[derive(Debug, Clone, Copy)]
pub struct AckTiming {
    pub delay: f64,
    pub jitter_frac: f64,
    pub tick: f64,
}

impl AckTiming {
    fn arrival_tick(&self, now_tick: u64, rng: &mut impl Rng) -> u64 {
        let jitter = if self.jitter_frac > 0.0 {
            1.0 + self.jitter_frac * rng.random_range(-1.0..1.0)
        } else {
            1.0
        };
        let eff = (self.delay * jitter).max(0.0);
        now_tick + 1 + (eff / self.tick).ceil() as u64
    }
}

/// Distribute one tick's cell budget round-robin over the eligible streams
/// (positive window, pending data), one cell per turn, starting at
/// `rr_cursor` and breaking ties in slice order (= stream id order). Every
/// 50th cell a stream sends schedules a window increment `ack.delay`
/// (jittered) later. Returns the per-stream deliveries.
pub fn schedule_cells(
    streams: &mut [StreamState],
    rr_cursor: &mut usize,
    budget_cells: u64,
    now_tick: u64,
    ack: &AckTiming,
    rng: &mut impl Rng,
) -> Vec<CellScheduleRecord> {
    let n = streams.len();
    let mut budget = budget_cells;
    if n == 0 {
        return Vec::new();
    }
    if *rr_cursor >= n {
        *rr_cursor = 0;
    }

    // Single-stream circuits (the overwhelmingly common case) take a
    // round-robin-free path: same deliveries, same ack draws, no scratch
    // allocations.
    if n == 1 {
        let s = &mut streams[0];
        let mut total = 0u64;
        while budget > 0 && s.eligible() {
            let rounds = s.sendable_cells().min(budget).max(1);
            deliver(s, rounds, now_tick, ack, rng);
            total += rounds;
            budget -= rounds;
        }
        if total == 0 {
            return Vec::new();
        }
        return vec![CellScheduleRecord { tick: now_tick, stream: streams[0].id, cells: total }];
    }

    let mut given = vec![0u64; n];
    while budget > 0 {
        let eligible: Vec<usize> = (0..n).filter(|&i| streams[i].eligible()).collect();
        if eligible.is_empty() {
            break;
        }
        let k = eligible.len() as u64;
        if budget >= k {
            // Whole rounds: everyone eligible advances in lock step until the
            // most constrained stream drops out or the budget thins.
            let m = eligible
                .iter()
                .map(|&i| streams[i].sendable_cells())
                .min()
                .expect("non-empty");
            let rounds = m.min(budget / k).max(1);
            for &i in &eligible {
                deliver(&mut streams[i], rounds, now_tick, ack, rng);
                given[i] += rounds;
            }
            budget -= rounds * k;
        } else {
            // Final partial round: one cell each, starting at the cursor.
            let mut served_last = *rr_cursor;
            let mut remaining = budget;
            for off in 0..n {
                if remaining == 0 {
                    break;
                }
                let i = (*rr_cursor + off) % n;
                if streams[i].eligible() {
                    deliver(&mut streams[i], 1, now_tick, ack, rng);
                    given[i] += 1;
                    remaining -= 1;
                    served_last = i;
                }
            }
            *rr_cursor = (served_last + 1) % n;
            break;
        }
    }

    (0..n)
        .filter(|&i| given[i] > 0)
        .map(|i| CellScheduleRecord { tick: now_tick, stream: streams[i].id, cells: given[i] })
        .collect()
}

fn deliver(
    stream: &mut StreamState,
    cells: u64,
    now_tick: u64,
    ack: &AckTiming,
    rng: &mut impl Rng,
) {
    debug_assert!(cells <= stream.sendable_cells());
    let before = stream.cells_sent;
    stream.cells_sent += cells;
    stream.bytes_sent += cells * CELL_BYTES;
    stream.package_window -= cells as u32;
    stream.backlog = stream.backlog.saturating_sub(cells * CELL_BYTES);
    let crossings = stream.cells_sent / WINDOW_INCREMENT as u64 - before / WINDOW_INCREMENT as u64;
    for _ in 0..crossings {
        stream.pending_increments.push(PendingIncrement {
            arrival_tick: ack.arrival_tick(now_tick, rng),
            cells: WINDOW_INCREMENT,
        });
    }
    debug_assert_eq!(
        stream.bytes_sent,
        (INITIAL_WINDOW as u64 - stream.package_window as u64 + stream.cells_credited)
            * CELL_BYTES,
        "window accounting identity violated"
    );
}
