//! TCP front end for the broker core: one reader thread and one writer
//! thread per connection, the state machine behind a lock. Outbound
//! packets are enqueued to per-connection writer channels while the core
//! lock is held, which pins the delivery order the core decided; the
//! blocking socket writes happen outside the lock.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{Shutdown, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use super::{Broker, BrokerConfig, ConnId};
use crate::codec::{encode_packet, CodecError, PacketBuffer};

enum WriterMsg {
    Bytes(Vec<u8>),
    Close,
}

struct Shared {
    core: Mutex<Broker>,
    writers: Mutex<BTreeMap<ConnId, mpsc::Sender<WriterMsg>>>,
    epoch: Instant,
    stop: AtomicBool,
}

impl Shared {
    fn now_ns(&self) -> u64 {
        self.epoch.elapsed().as_nanos() as u64
    }

    /// Route a `BrokerOutput` produced under the core lock. Must be
    /// called with the core lock held so channel enqueue order matches
    /// the core's decision order.
    fn route(&self, output: super::BrokerOutput) {
        let writers = self.writers.lock().unwrap();
        for (conn, packet) in output.outbound {
            match encode_packet(&packet) {
                Ok(bytes) => {
                    if let Some(tx) = writers.get(&conn) {
                        let _ = tx.send(WriterMsg::Bytes(bytes));
                    }
                }
                Err(e) => log::error!("dropping unencodable outbound packet: {e}"),
            }
        }
        for conn in output.close {
            if let Some(tx) = writers.get(&conn) {
                let _ = tx.send(WriterMsg::Close);
            }
        }
    }
}

/// A broker listening on a TCP port. Shut down explicitly; dropping the
/// handle leaves it serving.
pub struct BrokerServer {
    local_addr: std::net::SocketAddr,
    shared: Arc<Shared>,
    accept_thread: Option<thread::JoinHandle<()>>,
}

impl BrokerServer {
    pub fn local_addr(&self) -> std::net::SocketAddr {
        self.local_addr
    }

    pub fn shutdown(mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(self.local_addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
        let writers = self.shared.writers.lock().unwrap();
        for tx in writers.values() {
            let _ = tx.send(WriterMsg::Close);
        }
    }
}

/// Bind `addr` and serve the MQTT subset with the given broker config.
pub fn spawn_broker_server(
    addr: impl ToSocketAddrs,
    cfg: BrokerConfig,
) -> std::io::Result<BrokerServer> {
    let listener = TcpListener::bind(addr)?;
    let local_addr = listener.local_addr()?;
    let rate_limited = cfg.delivery_rate_limit_per_min.is_some();
    let shared = Arc::new(Shared {
        core: Mutex::new(Broker::new(cfg)),
        writers: Mutex::new(BTreeMap::new()),
        epoch: Instant::now(),
        stop: AtomicBool::new(false),
    });

    if rate_limited {
        // Token refills are time-driven, so deliveries blocked on the
        // bucket need a pump. 2 ms polling sits far under the smallest
        // practical token period and on_timer is a no-op when idle.
        let pump = Arc::clone(&shared);
        thread::Builder::new().name("broker-pump".into()).spawn(move || {
            while !pump.stop.load(Ordering::SeqCst) {
                thread::sleep(Duration::from_millis(2));
                let mut core = pump.core.lock().unwrap();
                let out = core.on_timer(pump.now_ns());
                if !out.outbound.is_empty() || !out.close.is_empty() {
                    pump.route(out);
                }
            }
        })?;
    }

    let accept_shared = Arc::clone(&shared);
    let conn_counter = AtomicU64::new(1);
    let accept_thread = thread::Builder::new().name("broker-accept".into()).spawn(move || {
        for stream in listener.incoming() {
            if accept_shared.stop.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = stream else { continue };
            let conn = conn_counter.fetch_add(1, Ordering::SeqCst);
            let _ = stream.set_nodelay(true);
            serve_connection(Arc::clone(&accept_shared), conn, stream);
        }
    })?;

    Ok(BrokerServer { local_addr, shared, accept_thread: Some(accept_thread) })
}

fn serve_connection(shared: Arc<Shared>, conn: ConnId, stream: TcpStream) {
    let (tx, rx) = mpsc::channel::<WriterMsg>();
    shared.writers.lock().unwrap().insert(conn, tx);

    let write_half = match stream.try_clone() {
        Ok(s) => s,
        Err(_) => {
            let _ = stream.shutdown(Shutdown::Both);
            shared.writers.lock().unwrap().remove(&conn);
            return;
        }
    };

    let _ = thread::Builder::new().name(format!("broker-w{conn}")).spawn(move || {
        let mut write_half = write_half;
        for msg in rx {
            match msg {
                WriterMsg::Bytes(bytes) => {
                    if write_half.write_all(&bytes).is_err() {
                        break;
                    }
                }
                WriterMsg::Close => break,
            }
        }
        let _ = write_half.shutdown(Shutdown::Both);
    });

    let reader_shared = shared;
    let _ = thread::Builder::new().name(format!("broker-r{conn}")).spawn(move || {
        let mut stream = stream;
        let _ = stream.set_read_timeout(Some(Duration::from_millis(500)));
        let mut buf = PacketBuffer::new();
        let mut chunk = [0u8; 16 * 1024];
        'conn: loop {
            if reader_shared.stop.load(Ordering::SeqCst) {
                break;
            }
            match stream.read(&mut chunk) {
                Ok(0) => break,
                Ok(n) => {
                    buf.push_bytes(&chunk[..n]);
                    loop {
                        match buf.next_packet() {
                            Ok(Some(packet)) => {
                                let mut core = reader_shared.core.lock().unwrap();
                                let now = reader_shared.now_ns();
                                match core.handle_packet(conn, packet, now) {
                                    Ok(out) => reader_shared.route(out),
                                    Err(e) => {
                                        log::warn!("conn {conn}: {e}; dropping connection");
                                        break 'conn;
                                    }
                                }
                            }
                            Ok(None) => break,
                            Err(e @ (CodecError::Malformed(_)
                            | CodecError::ProtocolViolation(_))) => {
                                log::warn!("conn {conn}: {e}; dropping connection");
                                break 'conn;
                            }
                            Err(e) => {
                                log::warn!("conn {conn}: {e}; dropping connection");
                                break 'conn;
                            }
                        }
                    }
                }
                Err(e)
                    if e.kind() == std::io::ErrorKind::WouldBlock
                        || e.kind() == std::io::ErrorKind::TimedOut =>
                {
                    continue;
                }
                Err(_) => break,
            }
        }
        let mut core = reader_shared.core.lock().unwrap();
        core.connection_closed(conn);
        drop(core);
        if let Some(tx) = reader_shared.writers.lock().unwrap().remove(&conn) {
            let _ = tx.send(WriterMsg::Close);
        }
    });
}
