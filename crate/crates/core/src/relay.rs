//! Relays and the per-connection token-bucket throttle.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Index into the relay table of the network that owns it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RelayId(pub u32);

impl std::fmt::Display for RelayId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "r{}", self.0)
    }
}

/// Token-bucket rate limiting applied by a relay to connections from
/// non-relay endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThrottleConfig {
    /// Long-term limit, bytes/second.
    pub rate_limit: f64,
    /// Bucket depth, bytes.
    pub burst: f64,
    /// Tor throttles only client (non-relay) connections; relay-to-relay
    /// links are exempt when set.
    pub applies_to_non_relays_only: bool,
}

impl ThrottleConfig {
    pub fn new(rate_limit: f64, burst: f64, applies_to_non_relays_only: bool) -> Result<Self> {
        if !(rate_limit > 0.0) {
            return Err(Error::config(format!("throttle rate_limit must be > 0, got {rate_limit}")));
        }
        if burst < rate_limit {
            return Err(Error::config(format!(
                "throttle burst {burst} smaller than one second of rate_limit {rate_limit}"
            )));
        }
        Ok(ThrottleConfig { rate_limit, burst, applies_to_non_relays_only })
    }

    /// Size the bucket so a flow drawing `expected_rate` steadily is first
    /// limited after roughly `onset` seconds.
    pub fn sized_for_onset(rate_limit: f64, expected_rate: f64, onset: f64) -> Result<Self> {
        if expected_rate <= rate_limit {
            return Err(Error::config(format!(
                "expected rate {expected_rate} never exhausts a {rate_limit} B/s bucket"
            )));
        }
        let burst = ((expected_rate - rate_limit) * onset).max(rate_limit);
        ThrottleConfig::new(rate_limit, burst, true)
    }
}

/// Runtime state of one token bucket.
#[derive(Debug, Clone)]
pub struct TokenBucket {
    config: ThrottleConfig,
    tokens: f64,
}

impl TokenBucket {
    pub fn new(config: ThrottleConfig) -> Self {
        TokenBucket { config, tokens: config.burst }
    }

    pub fn rate_limit(&self) -> f64 {
        self.config.rate_limit
    }

    pub fn refill(&mut self, dt: f64) {
        self.tokens = (self.tokens + self.config.rate_limit * dt).min(self.config.burst);
    }

    /// Whole bytes currently spendable.
    pub fn available(&self) -> u64 {
        self.tokens.max(0.0) as u64
    }

    pub fn spend(&mut self, bytes: u64) {
        self.tokens -= bytes as f64;
        debug_assert!(self.tokens >= -1e-6, "token bucket overdrawn");
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Relay {
    pub id: RelayId,
    pub name: String,
    /// Advertised forwarding capacity, bytes/second.
    pub capacity: f64,
    pub guard_eligible: bool,
    pub exit_eligible: bool,
    pub throttle: Option<ThrottleConfig>,
}

impl Relay {
    pub fn new(id: RelayId, name: impl Into<String>, capacity: f64) -> Result<Self> {
        if !(capacity > 0.0) || !capacity.is_finite() {
            return Err(Error::config(format!("relay capacity must be > 0, got {capacity}")));
        }
        Ok(Relay {
            id,
            name: name.into(),
            capacity,
            guard_eligible: false,
            exit_eligible: false,
            throttle: None,
        })
    }

    pub fn with_flags(mut self, guard: bool, exit: bool) -> Self {
        self.guard_eligible = guard;
        self.exit_eligible = exit;
        self
    }

    pub fn with_throttle(mut self, throttle: ThrottleConfig) -> Self {
        self.throttle = Some(throttle);
        self
    }
}
