//! TCP delay proxy: the real-socket counterpart of the virtual network.
//!
//! Every data chunk read from either side is forwarded after
//! `max(arrival + sampled_delay, previous_departure)` in that direction,
//! so byte order is preserved per direction while jitter stays inside
//! the configured band. Delay applies per read chunk, not per IP packet
//! — an approximation of interface-level shaping that is faithful at
//! MQTT message granularity for the small packets this testbed sends.

use std::io::{Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc, Arc};
use std::thread;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::DelayConfig;

const CHUNK: usize = 64 * 1024;

/// A running proxy; dropping the handle leaves it running, call
/// [`DelayProxy::shutdown`] to stop accepting.
pub struct DelayProxy {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<thread::JoinHandle<()>>,
}

impl DelayProxy {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Stop accepting new connections. Established connections keep
    /// flowing until either side closes.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop with a throwaway connection.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(handle) = self.accept_thread.take() {
            let _ = handle.join();
        }
    }
}

/// Listen on `listen`, forwarding each accepted connection to `upstream`
/// with `cfg` delay in both directions. Per-connection delay sequences
/// derive deterministically from `seed` and the connection index.
pub fn spawn_delay_proxy(
    listen: impl ToSocketAddrs,
    upstream: SocketAddr,
    cfg: DelayConfig,
    seed: u64,
) -> std::io::Result<DelayProxy> {
    let listener = TcpListener::bind(listen)?;
    let local_addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = Arc::clone(&stop);
    let conn_counter = Arc::new(AtomicU64::new(0));

    let accept_thread = thread::Builder::new()
        .name("delay-proxy-accept".into())
        .spawn(move || {
            for client in listener.incoming() {
                if stop_accept.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(client) = client else { continue };
                let conn_index = conn_counter.fetch_add(1, Ordering::SeqCst);
                match TcpStream::connect(upstream) {
                    Ok(server) => {
                        let _ = client.set_nodelay(true);
                        let _ = server.set_nodelay(true);
                        pump_pair(client, server, cfg, seed, conn_index);
                    }
                    Err(_) => {
                        // Upstream unreachable: refuse by closing.
                        let _ = client.shutdown(Shutdown::Both);
                    }
                }
            }
        })?;

    Ok(DelayProxy { local_addr, stop, accept_thread: Some(accept_thread) })
}

fn pump_pair(client: TcpStream, server: TcpStream, cfg: DelayConfig, seed: u64, conn: u64) {
    let c2 = client.try_clone();
    let s2 = server.try_clone();
    let (Ok(client_rd), Ok(server_rd)) = (c2, s2) else {
        let _ = client.shutdown(Shutdown::Both);
        let _ = server.shutdown(Shutdown::Both);
        return;
    };
    spawn_direction(client_rd, server, cfg, seed.wrapping_add(conn.wrapping_mul(2)));
    spawn_direction(server_rd, client, cfg, seed.wrapping_add(conn.wrapping_mul(2)).wrapping_add(1));
}

enum Delayed {
    Data { deliver_at: Instant, bytes: Vec<u8> },
    Eof { deliver_at: Instant },
}

fn spawn_direction(mut from: TcpStream, to: TcpStream, cfg: DelayConfig, seed: u64) {
    let (tx, rx) = mpsc::channel::<Delayed>();

    let _ = thread::Builder::new().name("delay-proxy-read".into()).spawn(move || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut last_departure = Instant::now();
        let mut buf = vec![0u8; CHUNK];
        loop {
            match from.read(&mut buf) {
                Ok(0) | Err(_) => {
                    let _ = tx.send(Delayed::Eof { deliver_at: last_departure });
                    return;
                }
                Ok(n) => {
                    let arrival = Instant::now();
                    let delay = std::time::Duration::from_nanos(cfg.sample_ns(&mut rng));
                    let deliver_at = (arrival + delay).max(last_departure);
                    last_departure = deliver_at;
                    if tx
                        .send(Delayed::Data { deliver_at, bytes: buf[..n].to_vec() })
                        .is_err()
                    {
                        return;
                    }
                }
            }
        }
    });

    let _ = thread::Builder::new().name("delay-proxy-write".into()).spawn(move || {
        let mut to = to;
        for item in rx {
            match item {
                Delayed::Data { deliver_at, bytes } => {
                    sleep_until(deliver_at);
                    if to.write_all(&bytes).is_err() {
                        return;
                    }
                }
                Delayed::Eof { deliver_at } => {
                    // Drain pending data first, then propagate the close.
                    sleep_until(deliver_at);
                    let _ = to.shutdown(Shutdown::Write);
                    return;
                }
            }
        }
    });
}

fn sleep_until(deadline: Instant) {
    let now = Instant::now();
    if deadline > now {
        thread::sleep(deadline - now);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{Read, Write};
    use std::net::TcpListener;

    /// Echo server that mirrors every byte back.
    fn spawn_echo() -> SocketAddr {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { return };
                thread::spawn(move || {
                    let mut buf = [0u8; 4096];
                    loop {
                        match stream.read(&mut buf) {
                            Ok(0) | Err(_) => return,
                            Ok(n) => {
                                if stream.write_all(&buf[..n]).is_err() {
                                    return;
                                }
                            }
                        }
                    }
                });
            }
        });
        addr
    }

    #[test]
    fn zero_delay_proxy_is_transparent() {
        let echo = spawn_echo();
        let proxy = spawn_delay_proxy("127.0.0.1:0", echo, DelayConfig::zero(), 1).unwrap();
        let mut conn = TcpStream::connect(proxy.local_addr()).unwrap();
        conn.write_all(b"ping").unwrap();
        let mut out = [0u8; 4];
        conn.read_exact(&mut out).unwrap();
        assert_eq!(&out, b"ping");
        proxy.shutdown();
    }

    #[test]
    fn fixed_delay_adds_round_trip_latency() {
        let echo = spawn_echo();
        let cfg = DelayConfig::new(30, 0).unwrap();
        let proxy = spawn_delay_proxy("127.0.0.1:0", echo, cfg, 1).unwrap();
        let mut conn = TcpStream::connect(proxy.local_addr()).unwrap();

        let start = Instant::now();
        conn.write_all(b"ping").unwrap();
        let mut out = [0u8; 4];
        conn.read_exact(&mut out).unwrap();
        let rtt = start.elapsed().as_secs_f64() * 1000.0;
        // 30 ms out + 30 ms back, generous slack for scheduling.
        assert!(rtt >= 55.0, "rtt {rtt} ms below the injected delay");
        assert!(rtt < 300.0, "rtt {rtt} ms wildly above the injected delay");
        proxy.shutdown();
    }

    #[test]
    fn upstream_close_propagates_after_pending_data() {
        // One-shot server: send a reply, then close immediately.
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        thread::spawn(move || {
            let (mut stream, _) = listener.accept().unwrap();
            stream.write_all(b"bye").unwrap();
        });

        let cfg = DelayConfig::new(20, 0).unwrap();
        let proxy = spawn_delay_proxy("127.0.0.1:0", addr, cfg, 3).unwrap();
        let mut conn = TcpStream::connect(proxy.local_addr()).unwrap();
        let mut all = Vec::new();
        conn.read_to_end(&mut all).unwrap();
        assert_eq!(all, b"bye");
        proxy.shutdown();
    }

    #[test]
    fn refuses_when_upstream_unreachable() {
        // A bound-then-dropped listener leaves a port nothing listens on.
        let dead = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
        let proxy = spawn_delay_proxy("127.0.0.1:0", dead, DelayConfig::zero(), 1).unwrap();
        let mut conn = TcpStream::connect(proxy.local_addr()).unwrap();
        let mut buf = [0u8; 1];
        // The proxy closes the client once the upstream connect fails.
        assert_eq!(conn.read(&mut buf).unwrap(), 0);
        proxy.shutdown();
    }
}
