//! Topic fan-out broker.
//!
//! Each connection opens with a HANDSHAKE carrying the protocol version, the
//! command layout and the topics it subscribes to. Every later message is
//! forwarded as-is to the other connections subscribed to its type. Each
//! subscriber has a bounded outbound queue drained by its own writer thread;
//! a full queue drops the message for that subscriber only and counts it.

use std::collections::HashSet;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crossbeam_channel::{bounded, Receiver, Sender, TrySendError};
use log::{debug, info, warn};
use tw2_core::CommandLayout;

use crate::error::{BusError, ProtocolError};
use crate::wire::{self, Handshake, Message, MsgType, FLAG_ACK, FLAG_ERROR, PROTOCOL_VERSION};

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub addr: String,
    /// Outbound messages buffered per subscriber before dropping.
    pub queue_depth: usize,
    pub handshake_timeout: Duration,
}

impl Default for BrokerConfig {
    fn default() -> Self {
        Self {
            addr: format!("127.0.0.1:{}", crate::DEFAULT_PORT),
            queue_depth: 4096,
            handshake_timeout: Duration::from_secs(5),
        }
    }
}

#[derive(Debug, Default)]
struct Counters {
    forwarded: AtomicU64,
    dropped: AtomicU64,
    protocol_errors: AtomicU64,
    connections: AtomicU64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BrokerStats {
    pub forwarded: u64,
    pub dropped: u64,
    pub protocol_errors: u64,
    pub connections: u64,
    pub active: usize,
}

struct Subscriber {
    id: u64,
    topics: HashSet<MsgType>,
    tx: Sender<Arc<Vec<u8>>>,
}

struct Shared {
    config: BrokerConfig,
    subs: RwLock<Vec<Subscriber>>,
    layout: Mutex<Option<CommandLayout>>,
    counters: Counters,
    shutdown: AtomicBool,
    streams: Mutex<Vec<(u64, TcpStream)>>,
}

pub struct Broker;

impl Broker {
    /// Binds and starts accepting connections on a background thread.
    pub fn start(config: BrokerConfig) -> Result<BrokerHandle, BusError> {
        let addr = config
            .addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| BusError::Handshake(format!("cannot resolve {}", config.addr)))?;
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local = listener.local_addr()?;
        let shared = Arc::new(Shared {
            config,
            subs: RwLock::new(Vec::new()),
            layout: Mutex::new(None),
            counters: Counters::default(),
            shutdown: AtomicBool::new(false),
            streams: Mutex::new(Vec::new()),
        });
        let s = shared.clone();
        let thread = thread::Builder::new()
            .name("broker-accept".into())
            .spawn(move || accept_loop(listener, s))?;
        info!("broker listening on {local}");
        Ok(BrokerHandle {
            addr: local,
            shared,
            thread: Some(thread),
        })
    }
}

pub struct BrokerHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    thread: Option<JoinHandle<()>>,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> BrokerStats {
        let c = &self.shared.counters;
        BrokerStats {
            forwarded: c.forwarded.load(Ordering::Relaxed),
            dropped: c.dropped.load(Ordering::Relaxed),
            protocol_errors: c.protocol_errors.load(Ordering::Relaxed),
            connections: c.connections.load(Ordering::Relaxed),
            active: self.shared.subs.read().unwrap().len(),
        }
    }

    /// Stops accepting and closes every connection.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        for (_, s) in self.shared.streams.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    let mut next_id = 0u64;
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, peer)) => {
                next_id += 1;
                let id = next_id;
                shared.counters.connections.fetch_add(1, Ordering::Relaxed);
                let s = shared.clone();
                let spawned = thread::Builder::new()
                    .name(format!("broker-conn-{id}"))
                    .spawn(move || {
                        if let Err(e) = serve(id, stream, &s) {
                            debug!("connection {id} from {peer} ended: {e}");
                        }
                        remove(&s, id);
                    });
                if let Err(e) = spawned {
                    warn!("cannot spawn connection thread: {e}");
                }
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
    }
}

fn remove(shared: &Shared, id: u64) {
    shared.subs.write().unwrap().retain(|s| s.id != id);
    shared.streams.lock().unwrap().retain(|(i, _)| *i != id);
}

fn send_error(stream: &mut TcpStream, kind: MsgType, text: &str) {
    let msg = Message::new(kind, 0, wire::now_ns(), text.as_bytes().to_vec()).with_flags(FLAG_ERROR);
    if let Ok(bytes) = msg.encode() {
        let _ = stream.write_all(&bytes);
    }
}

fn serve(id: u64, stream: TcpStream, shared: &Shared) -> Result<(), BusError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    stream.set_read_timeout(Some(shared.config.handshake_timeout))?;
    let mut out = stream.try_clone()?;
    shared.streams.lock().unwrap().push((id, stream.try_clone()?));
    let mut reader = BufReader::new(stream.try_clone()?);

    let hello = match wire::read_message(&mut reader) {
        Ok(Some(m)) if m.kind == MsgType::Handshake => m,
        Ok(Some(m)) => {
            shared.counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
            send_error(&mut out, MsgType::Handshake, "expected handshake");
            return Err(BusError::Handshake(format!("first message was {:?}", m.kind)));
        }
        Ok(None) => return Err(BusError::Disconnected),
        Err(e) => {
            if e.is_protocol() {
                shared.counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
                send_error(&mut out, MsgType::Handshake, &e.to_string());
            }
            return Err(e.into());
        }
    };
    let hs = match Handshake::from_payload(&hello.payload) {
        Ok(hs) => hs,
        Err(e) => {
            shared.counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
            send_error(&mut out, MsgType::Handshake, &e.to_string());
            return Err(e.into());
        }
    };
    if hs.version != PROTOCOL_VERSION {
        let text = format!("protocol version {} not supported (broker speaks {PROTOCOL_VERSION})", hs.version);
        send_error(&mut out, MsgType::Handshake, &text);
        return Err(BusError::Handshake(text));
    }
    let layout = {
        let mut current = shared.layout.lock().unwrap();
        match (&*current, &hs.layout) {
            (Some(a), Some(b)) if a != b => {
                let text = "command layout differs from the session layout";
                send_error(&mut out, MsgType::Handshake, text);
                return Err(BusError::Handshake(text.into()));
            }
            (None, Some(b)) => *current = Some(b.clone()),
            _ => {}
        }
        current.clone()
    };
    let reply = Handshake {
        version: PROTOCOL_VERSION,
        layout,
        rates: hs.rates,
        subscribe: hs.subscribe.clone(),
        name: "broker".into(),
    };
    wire::write_message(
        &mut out,
        &Message::new(MsgType::Handshake, 0, wire::now_ns(), reply.to_payload()).with_flags(FLAG_ACK),
    )?;
    debug!("connection {id} `{}` subscribed to {:?}", hs.name, hs.subscribe);

    let (tx, rx) = bounded::<Arc<Vec<u8>>>(shared.config.queue_depth);
    shared.subs.write().unwrap().push(Subscriber {
        id,
        topics: hs.subscribe.iter().copied().collect(),
        tx,
    });
    let writer = thread::Builder::new()
        .name(format!("broker-write-{id}"))
        .spawn(move || write_loop(out, rx))?;

    stream.set_read_timeout(None)?;
    let result = loop {
        match wire::read_message(&mut reader) {
            Ok(Some(msg)) => fan_out(id, &msg, shared),
            Ok(None) => break Ok(()),
            Err(ProtocolError::Io(e)) => break Err(BusError::Io(e)),
            Err(e) => {
                shared.counters.protocol_errors.fetch_add(1, Ordering::Relaxed);
                warn!("connection {id}: {e}; dropping it");
                let mut s = stream.try_clone()?;
                send_error(&mut s, MsgType::Ctrl, &e.to_string());
                break Err(e.into());
            }
        }
    };
    remove(shared, id);
    let _ = stream.shutdown(Shutdown::Both);
    let _ = writer.join();
    result
}

fn fan_out(from: u64, msg: &Message, shared: &Shared) {
    let Ok(bytes) = msg.encode() else { return };
    let bytes = Arc::new(bytes);
    let subs = shared.subs.read().unwrap();
    for s in subs.iter().filter(|s| s.id != from && s.topics.contains(&msg.kind)) {
        match s.tx.try_send(bytes.clone()) {
            Ok(()) => {
                shared.counters.forwarded.fetch_add(1, Ordering::Relaxed);
            }
            Err(TrySendError::Full(_)) => {
                shared.counters.dropped.fetch_add(1, Ordering::Relaxed);
            }
            Err(TrySendError::Disconnected(_)) => {}
        }
    }
}

fn write_loop(mut out: TcpStream, rx: Receiver<Arc<Vec<u8>>>) {
    while let Ok(bytes) = rx.recv() {
        if out.write_all(&bytes).is_err() {
            break;
        }
    }
    let _ = out.shutdown(Shutdown::Both);
}
