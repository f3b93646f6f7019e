//! Egress latency emulation in the style of `tc-netem`'s
//! `delay <base> <variation>`: a node's outgoing traffic is held for a
//! uniformly sampled duration in `[base - variation, base + variation]`.
//!
//! Two transports consume the same [`DelayConfig`]: a deterministic
//! virtual-time network ([`VirtualNet`]) for simulation mode and a TCP
//! delay proxy ([`spawn_delay_proxy`]) for real-socket mode.

mod proxy;
mod vnet;

pub use proxy::{spawn_delay_proxy, DelayProxy};
pub use vnet::{EndpointId, VirtualNet, VnetEvent};

use rand::Rng;
use thiserror::Error;

pub const NS_PER_MS: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum NetemError {
    #[error("variation {variation_ms} ms exceeds base {base_ms} ms")]
    InvalidDelay { base_ms: u64, variation_ms: u64 },
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(usize),
    #[error("event budget of {budget} exhausted after {processed} events")]
    LivelockGuard { processed: u64, budget: u64 },
}

/// Uniform egress delay: `base ± variation`, both in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DelayConfig {
    base_ms: u64,
    variation_ms: u64,
}

impl DelayConfig {
    pub fn new(base_ms: u64, variation_ms: u64) -> Result<Self, NetemError> {
        if variation_ms > base_ms {
            return Err(NetemError::InvalidDelay { base_ms, variation_ms });
        }
        Ok(DelayConfig { base_ms, variation_ms })
    }

    /// Zero delay; sends pass straight through.
    pub fn zero() -> Self {
        DelayConfig { base_ms: 0, variation_ms: 0 }
    }

    pub fn base_ms(&self) -> u64 {
        self.base_ms
    }

    pub fn variation_ms(&self) -> u64 {
        self.variation_ms
    }

    pub fn is_zero(&self) -> bool {
        self.base_ms == 0 && self.variation_ms == 0
    }

    /// Inclusive sampling bounds in nanoseconds.
    pub fn bounds_ns(&self) -> (u64, u64) {
        (
            (self.base_ms - self.variation_ms) * NS_PER_MS,
            (self.base_ms + self.variation_ms) * NS_PER_MS,
        )
    }

    /// Draw one delay, uniform over `[base - variation, base + variation]`
    /// at nanosecond resolution. The same seeded generator yields the
    /// same sequence.
    pub fn sample_ns(&self, rng: &mut impl Rng) -> u64 {
        let (lo, hi) = self.bounds_ns();
        if lo == hi {
            return lo;
        }
        rng.random_range(lo..=hi)
    }
}

impl std::fmt::Display for DelayConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}+-{}", self.base_ms, self.variation_ms)
    }
}

/// Placement classes for the three machines of the testbed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeClass {
    Client,
    Fog,
    Cloud,
}

impl NodeClass {
    pub fn parse(s: &str) -> Option<NodeClass> {
        match s {
            "Client" => Some(NodeClass::Client),
            "Fog" => Some(NodeClass::Fog),
            "Cloud" => Some(NodeClass::Cloud),
            _ => None,
        }
    }
}

impl std::fmt::Display for NodeClass {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NodeClass::Client => "Client",
            NodeClass::Fog => "Fog",
            NodeClass::Cloud => "Cloud",
        })
    }
}

/// A node of the emulated network. Egress delay attaches to the node's
/// class, mirroring `tc-netem` attachment to a machine's interface;
/// client instances are distinct nodes sharing the Client class config.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Client(u16),
    Fog,
    Cloud,
}

impl NodeId {
    pub fn class(&self) -> NodeClass {
        match self {
            NodeId::Client(_) => NodeClass::Client,
            NodeId::Fog => NodeClass::Fog,
            NodeId::Cloud => NodeClass::Cloud,
        }
    }
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::Client(i) => write!(f, "Client-{i}"),
            NodeId::Fog => f.write_str("Fog"),
            NodeId::Cloud => f.write_str("Cloud"),
        }
    }
}
