//! A desk-scale testbed for measuring publish/subscribe latency between
//! simulated IoT data sources and a digital-twin subscriber, across
//! client/fog/cloud placements.
//!
//! The crate provides:
//!
//! - [`codec`] — a bit-exact MQTT 3.1.1 subset codec (CONNECT, CONNACK,
//!   PUBLISH QoS 0/1, PUBACK, SUBSCRIBE, SUBACK, PINGREQ, PINGRESP,
//!   DISCONNECT) plus topic validation and wildcard filter matching.
//! - [`broker`] — a topic-based pub/sub broker with a per-subscriber
//!   in-flight window, an optional unbounded backlog queue, and an
//!   optional token-bucket delivery rate limit. Runs over real TCP or
//!   over the virtual network.
//! - [`netem`] — egress latency emulation (`base ± variation`, uniform):
//!   a deterministic virtual-time network for simulation mode and a TCP
//!   delay proxy for socket mode.
//! - [`agents`] — the workload endpoints: data sources publishing
//!   sequentially numbered messages on a fixed schedule, and the twin
//!   subscriber that timestamps arrivals and checks stream integrity.
//! - [`orchestrator`] — scenario (placement) and situation (workload)
//!   presets, the experiment runner, persistence, and replay.
//! - [`analysis`] — per-message timings, summary statistics, deadline
//!   misses, per-minute throughput, histograms, and cross-scenario
//!   comparison tables.

pub mod agents;
pub mod analysis;
pub mod broker;
pub mod codec;
pub mod logfmt;
pub mod netem;
pub mod orchestrator;
