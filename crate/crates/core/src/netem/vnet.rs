//! Deterministic virtual-time network.
//!
//! Endpoints register on nodes; every send is scheduled for delivery at
//! `max(now + egress_delay(sender_node), last_delivery(link))`, so each
//! ordered node pair is FIFO and jitter never reorders messages. Sends
//! between endpoints on the same node are loopback traffic and bypass
//! egress delay entirely.
//!
//! The event queue dispatches in nondecreasing time order with ties
//! broken by insertion sequence, and virtual time advances without
//! wall-clock sleeping, so identical (topology, seed, input) yields a
//! byte-identical event trace.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DelayConfig, NetemError, NodeClass, NodeId};

/// Handle to a registered endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EndpointId(pub(crate) usize);

impl EndpointId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VnetEvent {
    /// Bytes arriving at `to`, sent earlier by `from`.
    Deliver { at_ns: u64, from: EndpointId, to: EndpointId, bytes: Vec<u8> },
    /// A timer requested by `endpoint` via `schedule_timer`.
    Timer { at_ns: u64, endpoint: EndpointId, token: u64 },
}

impl VnetEvent {
    pub fn at_ns(&self) -> u64 {
        match self {
            VnetEvent::Deliver { at_ns, .. } | VnetEvent::Timer { at_ns, .. } => *at_ns,
        }
    }
}

#[derive(Debug)]
enum EventKind {
    Deliver { from: EndpointId, to: EndpointId, bytes: Vec<u8> },
    Timer { endpoint: EndpointId, token: u64 },
}

#[derive(Debug)]
struct QueuedEvent {
    at_ns: u64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for QueuedEvent {
    fn eq(&self, other: &Self) -> bool {
        self.at_ns == other.at_ns && self.seq == other.seq
    }
}
impl Eq for QueuedEvent {}
impl PartialOrd for QueuedEvent {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEvent {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.at_ns, self.seq).cmp(&(other.at_ns, other.seq))
    }
}

const DEFAULT_EVENT_BUDGET: u64 = 100_000_000;

#[derive(Debug)]
pub struct VirtualNet {
    now_ns: u64,
    next_seq: u64,
    queue: BinaryHeap<Reverse<QueuedEvent>>,
    endpoint_nodes: Vec<NodeId>,
    egress: BTreeMap<NodeClass, DelayConfig>,
    last_delivery: BTreeMap<(NodeId, NodeId), u64>,
    rng: ChaCha8Rng,
    events_processed: u64,
    event_budget: u64,
}

impl VirtualNet {
    pub fn new(seed: u64) -> Self {
        VirtualNet {
            now_ns: 0,
            next_seq: 0,
            queue: BinaryHeap::new(),
            endpoint_nodes: Vec::new(),
            egress: BTreeMap::new(),
            last_delivery: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            events_processed: 0,
            event_budget: DEFAULT_EVENT_BUDGET,
        }
    }

    /// Attach an egress delay to every node of `class`.
    pub fn set_egress(&mut self, class: NodeClass, cfg: DelayConfig) {
        self.egress.insert(class, cfg);
    }

    /// Cap on processed events before [`NetemError::LivelockGuard`].
    pub fn set_event_budget(&mut self, budget: u64) {
        self.event_budget = budget;
    }

    pub fn add_endpoint(&mut self, node: NodeId) -> EndpointId {
        self.endpoint_nodes.push(node);
        EndpointId(self.endpoint_nodes.len() - 1)
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns
    }

    pub fn node_of(&self, ep: EndpointId) -> Option<NodeId> {
        self.endpoint_nodes.get(ep.0).copied()
    }

    /// Schedule `bytes` for delivery. Departure time is
    /// `max(now + sampled_egress, last_delivery(from_node, to_node))`:
    /// per-link FIFO, no reordering.
    pub fn send(
        &mut self,
        from: EndpointId,
        to: EndpointId,
        bytes: Vec<u8>,
    ) -> Result<(), NetemError> {
        let from_node = self
            .node_of(from)
            .ok_or(NetemError::UnknownEndpoint(from.0))?;
        let to_node = self.node_of(to).ok_or(NetemError::UnknownEndpoint(to.0))?;

        let delay_ns = if from_node == to_node {
            0 // loopback: egress shaping never sees same-node traffic
        } else {
            match self.egress.get(&from_node.class()) {
                Some(cfg) => cfg.sample_ns(&mut self.rng),
                None => 0,
            }
        };

        let link = (from_node, to_node);
        let earliest = self.last_delivery.get(&link).copied().unwrap_or(0);
        let at_ns = (self.now_ns + delay_ns).max(earliest);
        self.last_delivery.insert(link, at_ns);
        self.push(at_ns, EventKind::Deliver { from, to, bytes });
        Ok(())
    }

    /// Request a [`VnetEvent::Timer`] for `endpoint` at `at_ns` (clamped
    /// to the present if already past).
    pub fn schedule_timer(&mut self, at_ns: u64, endpoint: EndpointId, token: u64) {
        let at_ns = at_ns.max(self.now_ns);
        self.push(at_ns, EventKind::Timer { endpoint, token });
    }

    fn push(&mut self, at_ns: u64, kind: EventKind) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(QueuedEvent { at_ns, seq, kind }));
    }

    pub fn has_pending(&self) -> bool {
        !self.queue.is_empty()
    }

    pub fn events_processed(&self) -> u64 {
        self.events_processed
    }

    pub fn budget_exceeded(&self) -> bool {
        self.events_processed > self.event_budget
    }

    pub fn event_budget(&self) -> u64 {
        self.event_budget
    }

    /// Pop the next event, advancing the virtual clock to its timestamp.
    pub fn next_event(&mut self) -> Option<VnetEvent> {
        let Reverse(ev) = self.queue.pop()?;
        debug_assert!(ev.at_ns >= self.now_ns, "event queue went backwards");
        self.now_ns = ev.at_ns;
        self.events_processed += 1;
        Some(match ev.kind {
            EventKind::Deliver { from, to, bytes } => {
                VnetEvent::Deliver { at_ns: ev.at_ns, from, to, bytes }
            }
            EventKind::Timer { endpoint, token } => {
                VnetEvent::Timer { at_ns: ev.at_ns, endpoint, token }
            }
        })
    }

    /// Drain the queue, handing each event to `handler` (which may send
    /// more). Returns the clock at the last event; errs with
    /// `LivelockGuard` once the event budget is exhausted.
    pub fn run_until_idle(
        &mut self,
        mut handler: impl FnMut(&mut VirtualNet, VnetEvent),
    ) -> Result<u64, NetemError> {
        while let Some(event) = self.next_event() {
            if self.events_processed > self.event_budget {
                return Err(NetemError::LivelockGuard {
                    processed: self.events_processed,
                    budget: self.event_budget,
                });
            }
            handler(self, event);
        }
        Ok(self.now_ns)
    }
}
