//! Discrete-time simulator of a Tor-like relay network together with the
//! throughput-measurement attacks it enables: circuit fingerprinting by
//! correlated congestion, bottleneck-relay identification via one-hop
//! probes, guard discovery, hidden-service confirmation, and linking of
//! streams multiplexed on one circuit.

pub mod attacks;
pub mod error;
pub mod io;
pub mod mux;
pub mod relay;
pub mod scenario;
pub mod sim;
pub mod stats;
pub mod trace;
pub mod traffic;

pub use error::{Error, Result};
