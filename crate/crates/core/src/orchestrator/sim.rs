//! Simulation-mode driver: broker, twin, and sources run as actors on
//! the virtual network, exchanging the same encoded MQTT frames the TCP
//! transport would carry. The run is fully deterministic in
//! (scenario, situation point, seed); 100 000-message runs complete in
//! seconds because time is virtual.
//!
//! A run has two phases. Setup connects the twin (which subscribes on
//! its CONNACK) and connects every source, then drains the network. The
//! workload phase anchors the schedule origin `t0` at the post-setup
//! clock and fires each source's publishes at exactly
//! `t0 + seq * interval`. Persisted timestamps are rebased to `t0`.

use std::collections::BTreeMap;

use super::{ExperimentConfig, OrchestratorError, RunOutcome};
use crate::agents::{merge_send_logs, LogRecord, SimSource, SimTwin, SourceConfig};
use crate::broker::{Broker, BrokerOutput, ConnId};
use crate::codec::{encode_packet, PacketBuffer, QoS, TopicFilter};
use crate::netem::{EndpointId, NodeId, VirtualNet, VnetEvent};

/// Timer token for rate-limiter wakeups on the broker endpoint; source
/// publish timers use the sequence number, which stays below this.
const WAKE_TOKEN: u64 = u64::MAX;

struct Driver {
    broker: Broker,
    broker_ep: EndpointId,
    twin: SimTwin,
    twin_ep: EndpointId,
    sources: Vec<SimSource>,
    source_eps: Vec<EndpointId>,
    /// Reassembly buffer per (receiver, sender) endpoint pair.
    buffers: BTreeMap<(usize, usize), PacketBuffer>,
    /// Schedule origin; 0 during setup.
    t0_ns: u64,
    /// Earliest broker wakeup currently in the queue, to keep the timer
    /// population at one per deadline.
    pending_wake_ns: Option<u64>,
}

impl Driver {
    fn source_index(&self, ep: EndpointId) -> Option<usize> {
        self.source_eps.iter().position(|&e| e == ep)
    }

    fn conn_of(&self, ep: EndpointId) -> ConnId {
        ep.index() as ConnId
    }

    fn ep_of_conn(&self, conn: ConnId) -> EndpointId {
        EndpointId(conn as usize)
    }

    fn route_broker_output(
        &mut self,
        net: &mut VirtualNet,
        output: BrokerOutput,
    ) -> Result<(), OrchestratorError> {
        for (conn, packet) in output.outbound {
            let bytes = encode_packet(&packet)?;
            net.send(self.broker_ep, self.ep_of_conn(conn), bytes)?;
        }
        // Connection drops never occur in a healthy run; takeover or
        // rejection here means the driver itself is wrong.
        if !output.close.is_empty() {
            return Err(OrchestratorError::InvalidConfig(
                "broker dropped a connection mid-run".into(),
            ));
        }
        Ok(())
    }

    fn arm_broker_wakeup(&mut self, net: &mut VirtualNet, now_ns: u64) {
        if let Some(wake) = self.broker.next_wakeup_ns(now_ns) {
            if self.pending_wake_ns.is_none_or(|pending| wake < pending) {
                net.schedule_timer(wake, self.broker_ep, WAKE_TOKEN);
                self.pending_wake_ns = Some(wake);
            }
        }
    }

    fn handle(&mut self, net: &mut VirtualNet, event: VnetEvent) -> Result<(), OrchestratorError> {
        match event {
            VnetEvent::Deliver { at_ns, from, to, bytes } => {
                if to == self.broker_ep {
                    let buffer = self.buffers.entry((to.index(), from.index())).or_default();
                    buffer.push_bytes(&bytes);
                    let mut packets = Vec::new();
                    while let Some(packet) = buffer.next_packet()? {
                        packets.push(packet);
                    }
                    for packet in packets {
                        let conn = self.conn_of(from);
                        let output = self.broker.handle_packet(conn, packet, at_ns)?;
                        self.route_broker_output(net, output)?;
                    }
                    self.arm_broker_wakeup(net, at_ns);
                } else if to == self.twin_ep {
                    let buffer = self.buffers.entry((to.index(), from.index())).or_default();
                    buffer.push_bytes(&bytes);
                    let mut responses = Vec::new();
                    while let Some(packet) = buffer.next_packet()? {
                        responses.extend(self.twin.on_packet(&packet, at_ns));
                    }
                    for response in responses {
                        net.send(self.twin_ep, self.broker_ep, encode_packet(&response)?)?;
                    }
                } else if let Some(idx) = self.source_index(to) {
                    let buffer = self.buffers.entry((to.index(), from.index())).or_default();
                    buffer.push_bytes(&bytes);
                    while let Some(packet) = buffer.next_packet()? {
                        self.sources[idx].on_packet(&packet);
                    }
                }
            }
            VnetEvent::Timer { at_ns, endpoint, token } => {
                if endpoint == self.broker_ep && token == WAKE_TOKEN {
                    self.pending_wake_ns = None;
                    let output = self.broker.on_timer(at_ns);
                    self.route_broker_output(net, output)?;
                    self.arm_broker_wakeup(net, at_ns);
                } else if let Some(idx) = self.source_index(endpoint) {
                    let seq = token;
                    let packet = self.sources[idx].make_publish(seq, at_ns)?;
                    net.send(endpoint, self.broker_ep, encode_packet(&packet)?)?;
                    let count = self.sources[idx].config().message_count;
                    if seq + 1 < count {
                        let next_at = self.t0_ns + self.sources[idx].publish_offset_ns(seq + 1);
                        net.schedule_timer(next_at, endpoint, seq + 1);
                    }
                }
            }
        }
        Ok(())
    }
}

fn drive(net: &mut VirtualNet, driver: &mut Driver) -> Result<(), OrchestratorError> {
    while let Some(event) = net.next_event() {
        if net.budget_exceeded() {
            return Err(crate::netem::NetemError::LivelockGuard {
                processed: net.events_processed(),
                budget: net.event_budget(),
            }
            .into());
        }
        driver.handle(net, event)?;
    }
    Ok(())
}

/// Run one experiment in virtual time.
pub fn run_sim(config: &ExperimentConfig) -> Result<RunOutcome, OrchestratorError> {
    config.validate()?;
    let point = &config.point;

    let mut net = VirtualNet::new(config.seed);
    for (class, delay) in &config.scenario.egress {
        net.set_egress(*class, *delay);
    }
    // Roughly a dozen events per message end to end; the guard only has
    // to catch runaway loops, not meter healthy runs.
    net.set_event_budget(config.total_messages().saturating_mul(40).saturating_add(100_000));

    let broker_ep = net.add_endpoint(config.scenario.broker_node);
    let twin_ep = net.add_endpoint(config.scenario.twin_node);

    let mut sources = Vec::with_capacity(point.sources as usize);
    let mut source_eps = Vec::with_capacity(point.sources as usize);
    let mut expected_per_client = BTreeMap::new();
    for i in 0..point.sources {
        let source_cfg = SourceConfig::new(
            format!("c{}", i + 1),
            point.messages_per_source,
            point.interval_ms,
            point.payload_bytes,
            config.qos,
        )?;
        expected_per_client.insert(source_cfg.client_id.clone(), point.messages_per_source);
        sources.push(SimSource::new(source_cfg)?);
        source_eps.push(net.add_endpoint(NodeId::Client(i as u16)));
    }

    let twin = SimTwin::new(
        "twin",
        vec![TopicFilter::new("dt/+/data").expect("static filter")],
    );

    let mut driver = Driver {
        broker: Broker::new(config.broker.clone()),
        broker_ep,
        twin,
        twin_ep,
        sources,
        source_eps: source_eps.clone(),
        buffers: BTreeMap::new(),
        t0_ns: 0,
        pending_wake_ns: None,
    };

    // Setup: twin first (it subscribes on CONNACK), then the sources.
    net.send(twin_ep, broker_ep, encode_packet(&driver.twin.connect_packet())?)?;
    for (i, ep) in source_eps.iter().enumerate() {
        let connect = driver.sources[i].connect_packet();
        net.send(*ep, broker_ep, encode_packet(&connect)?)?;
    }
    drive(&mut net, &mut driver)?;
    if !driver.twin.is_subscribed() {
        return Err(OrchestratorError::Timeout("twin subscription".into()));
    }
    if !driver.sources.iter().all(|s| s.is_connected()) {
        return Err(OrchestratorError::Timeout("source connections".into()));
    }

    // Workload: fixed schedule from the post-setup clock.
    let t0_ns = net.now_ns();
    driver.t0_ns = t0_ns;
    if point.messages_per_source > 0 {
        for ep in &source_eps {
            net.schedule_timer(t0_ns, *ep, 0);
        }
    }
    drive(&mut net, &mut driver)?;

    let integrity = driver.twin.integrity(&expected_per_client);
    let expects_full_delivery =
        config.broker.queue_cap.is_none() && config.qos == QoS::AtLeastOnce;
    if expects_full_delivery && !integrity.is_clean() {
        return Err(OrchestratorError::DrainIncomplete {
            sent: integrity.expected,
            received: integrity.received,
        });
    }

    // Integrity is timestamp-free, so computing it before the rebase is
    // equivalent.
    let rebase = |mut records: Vec<LogRecord>| {
        for r in &mut records {
            r.timestamp_ns = r.timestamp_ns.saturating_sub(t0_ns);
        }
        records
    };
    let send_log = rebase(merge_send_logs(
        driver.sources.into_iter().map(SimSource::into_send_log).collect(),
    ));
    let (recv_raw, _unparsed) = driver.twin.into_parts();
    let recv_log = rebase(recv_raw);

    Ok(RunOutcome { send_log, recv_log, integrity })
}
