//! Socket-mode driver: a real broker on a loopback port, delay proxies
//! standing in for the injected egress latency, and source/twin clients
//! on threads sharing one monotonic clock epoch.
//!
//! Proxy wiring mirrors the scenario: sources connect through a proxy
//! carrying the Client egress delay; when broker and twin sit on
//! different nodes the twin connects through a proxy carrying the broker
//! node's egress delay; co-located broker and twin talk loopback,
//! undelayed. A connection proxy delays both directions, so unlike the
//! virtual network the return path (acks) is also delayed — it does not
//! touch the measured client-to-twin latency.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use super::{ExperimentConfig, OrchestratorError, RunOutcome};
use crate::agents::tcp::{run_source, run_twin, MqttConnection};
use crate::agents::{compute_integrity, merge_send_logs, LogRecord, SourceConfig};
use crate::broker::spawn_broker_server;
use crate::codec::TopicFilter;
use crate::netem::{spawn_delay_proxy, DelayProxy, NodeClass};

const NS_PER_MS: u64 = 1_000_000;

/// Run one experiment over real sockets.
pub fn run_tcp(config: &ExperimentConfig) -> Result<RunOutcome, OrchestratorError> {
    config.validate()?;
    let point = &config.point;

    let server = spawn_broker_server("127.0.0.1:0", config.broker.clone()).map_err(|e| {
        if e.kind() == std::io::ErrorKind::AddrInUse {
            OrchestratorError::PortInUse(e.to_string())
        } else {
            OrchestratorError::Io(e)
        }
    })?;
    let broker_addr = server.local_addr();
    let mut proxies: Vec<DelayProxy> = Vec::new();

    // Client egress: every source connection passes through this proxy.
    let client_delay = config.scenario.egress.get(&NodeClass::Client).copied();
    let source_addr = match client_delay {
        Some(delay) if !delay.is_zero() => {
            let proxy = spawn_delay_proxy("127.0.0.1:0", broker_addr, delay, config.seed)?;
            let addr = proxy.local_addr();
            proxies.push(proxy);
            addr
        }
        _ => broker_addr,
    };

    // Broker-node egress applies to broker->twin traffic only when the
    // twin lives on a different node.
    let broker_egress = config
        .scenario
        .egress
        .get(&config.scenario.broker_node.class())
        .copied();
    let twin_addr = match broker_egress {
        Some(delay)
            if !delay.is_zero() && config.scenario.twin_node != config.scenario.broker_node =>
        {
            let proxy = spawn_delay_proxy(
                "127.0.0.1:0",
                broker_addr,
                delay,
                config.seed.wrapping_add(0x7757),
            )?;
            let addr = proxy.local_addr();
            proxies.push(proxy);
            addr
        }
        _ => broker_addr,
    };

    let teardown = |proxies: Vec<DelayProxy>, server: crate::broker::BrokerServer| {
        for proxy in proxies {
            proxy.shutdown();
        }
        server.shutdown();
    };

    let outcome = run_workload(config, source_addr, twin_addr);
    teardown(proxies, server);
    let (send_log, recv_log, unparsed) = outcome?;

    let mut expected_per_client = BTreeMap::new();
    for i in 0..point.sources {
        expected_per_client.insert(format!("c{}", i + 1), point.messages_per_source);
    }
    let integrity = compute_integrity(&expected_per_client, &recv_log, unparsed);
    let expects_full_delivery = config.broker.queue_cap.is_none()
        && config.qos == crate::codec::QoS::AtLeastOnce;
    if expects_full_delivery && !integrity.is_clean() {
        return Err(OrchestratorError::Timeout(format!(
            "drain: sent {} received {}",
            integrity.expected, integrity.received
        )));
    }
    Ok(RunOutcome { send_log, recv_log, integrity })
}

type Logs = (Vec<LogRecord>, Vec<LogRecord>, u64);

fn run_workload(
    config: &ExperimentConfig,
    source_addr: std::net::SocketAddr,
    twin_addr: std::net::SocketAddr,
) -> Result<Logs, OrchestratorError> {
    let point = &config.point;
    let epoch = Instant::now();
    let expected_total = config.total_messages();

    // One-way path bound: client egress plus broker egress upper bounds.
    let path_bound_ms: u64 = config
        .scenario
        .egress
        .values()
        .map(|d| d.base_ms() + d.variation_ms())
        .sum();
    let theoretical_ms = point
        .messages_per_source
        .saturating_sub(1)
        .saturating_mul(point.interval_ms)
        + 2 * path_bound_ms;
    let timeout =
        Duration::from_millis((theoretical_ms as f64 * config.timeout_mult) as u64)
            + Duration::from_secs(5);
    let deadline = Instant::now() + timeout;

    // Twin first; it signals once its subscription is acknowledged.
    let (sub_tx, sub_rx) = mpsc::channel();
    let filters = vec![TopicFilter::new("dt/+/data").expect("static filter")];
    let twin_handle = thread::Builder::new().name("twin".into()).spawn({
        let filters = filters.clone();
        move || run_twin(twin_addr, &filters, epoch, expected_total, deadline, sub_tx)
    })?;
    if sub_rx.recv_timeout(Duration::from_secs(10)).is_err() {
        let _ = twin_handle.join();
        return Err(OrchestratorError::Timeout("twin subscription".into()));
    }

    // Connect all sources before the schedule origin so no publish waits
    // on a handshake.
    let mut connections = Vec::with_capacity(point.sources as usize);
    for i in 0..point.sources {
        let cfg = SourceConfig::new(
            format!("c{}", i + 1),
            point.messages_per_source,
            point.interval_ms,
            point.payload_bytes,
            config.qos,
        )?;
        let conn = MqttConnection::connect(source_addr, &cfg.client_id)?;
        connections.push((conn, cfg));
    }

    // Schedule origin: a short lead so every thread is parked on its
    // first deadline rather than racing the spawn.
    let start_offset_ns = epoch.elapsed().as_nanos() as u64 + 50 * NS_PER_MS;
    let ack_wait = Duration::from_millis(2 * path_bound_ms + 1_000);

    let mut handles = Vec::new();
    for (conn, cfg) in connections {
        handles.push(thread::Builder::new().name(cfg.client_id.clone()).spawn(
            move || run_source(conn, &cfg, epoch, start_offset_ns, ack_wait),
        )?);
    }

    let mut send_logs = Vec::new();
    for handle in handles {
        let log = handle.join().map_err(|_| OrchestratorError::WorkerPanic)??;
        send_logs.push(log);
    }
    let twin_outcome = twin_handle.join().map_err(|_| OrchestratorError::WorkerPanic)??;

    let rebase = |mut records: Vec<LogRecord>| {
        for r in &mut records {
            r.timestamp_ns = r.timestamp_ns.saturating_sub(start_offset_ns);
        }
        records
    };
    Ok((
        rebase(merge_send_logs(send_logs)),
        rebase(twin_outcome.recv_log),
        twin_outcome.unparsed,
    ))
}
