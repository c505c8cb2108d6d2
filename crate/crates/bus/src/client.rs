use std::io::BufReader;
use std::net::{Shutdown, SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, TryRecvError};
use log::debug;

use crate::error::BusError;
use crate::wire::{self, Handshake, Message, MsgType};

struct Inner {
    stream: Mutex<TcpStream>,
    seqs: [AtomicU32; 10],
}

/// Cheap clonable publishing half of a [`BusClient`].
#[derive(Clone)]
pub struct BusSender {
    inner: Arc<Inner>,
}

impl BusSender {
    pub fn publish(&self, kind: MsgType, payload: Vec<u8>) -> Result<u32, BusError> {
        self.publish_at(kind, wire::now_ns(), 0, payload)
    }

    /// Publishes with an explicit timestamp and flags. Returns the sequence
    /// number, which counts per message type.
    pub fn publish_at(&self, kind: MsgType, timestamp: u64, flags: u8, payload: Vec<u8>) -> Result<u32, BusError> {
        let seq = self.inner.seqs[kind as usize].fetch_add(1, Ordering::Relaxed);
        let bytes = Message::new(kind, seq, timestamp, payload).with_flags(flags).encode()?;
        let mut s = self.inner.stream.lock().unwrap();
        std::io::Write::write_all(&mut *s, &bytes)?;
        Ok(seq)
    }

    /// Writes raw bytes, bypassing framing. Only useful for testing peers.
    pub fn send_raw(&self, bytes: &[u8]) -> Result<(), BusError> {
        let mut s = self.inner.stream.lock().unwrap();
        std::io::Write::write_all(&mut *s, bytes)?;
        Ok(())
    }
}

pub struct BusClient {
    sender: BusSender,
    rx: Receiver<Message>,
    server: Handshake,
    reader: Option<JoinHandle<()>>,
}

impl BusClient {
    pub fn connect(addr: impl ToSocketAddrs, hello: Handshake) -> Result<Self, BusError> {
        let stream = TcpStream::connect(addr)?;
        Self::handshake(stream, hello)
    }

    /// Retries the TCP connect until `timeout`, for processes started together.
    pub fn connect_retry(addr: SocketAddr, hello: Handshake, timeout: Duration) -> Result<Self, BusError> {
        let deadline = Instant::now() + timeout;
        loop {
            match TcpStream::connect(addr) {
                Ok(s) => return Self::handshake(s, hello),
                Err(e) if Instant::now() >= deadline => return Err(e.into()),
                Err(_) => thread::sleep(Duration::from_millis(50)),
            }
        }
    }

    fn handshake(stream: TcpStream, hello: Handshake) -> Result<Self, BusError> {
        stream.set_nodelay(true)?;
        let mut write = stream.try_clone()?;
        wire::write_message(
            &mut write,
            &Message::new(MsgType::Handshake, 0, wire::now_ns(), hello.to_payload()),
        )?;
        stream.set_read_timeout(Some(Duration::from_secs(5)))?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let reply = match wire::read_message(&mut reader)? {
            Some(m) => m,
            None => return Err(BusError::Disconnected),
        };
        if reply.kind != MsgType::Handshake || reply.is_error() {
            return Err(BusError::Handshake(String::from_utf8_lossy(&reply.payload).into_owned()));
        }
        let server = Handshake::from_payload(&reply.payload)?;
        stream.set_read_timeout(None)?;

        let (tx, rx) = unbounded();
        let name = hello.name.clone();
        let reader = thread::Builder::new()
            .name(format!("bus-read-{name}"))
            .spawn(move || loop {
                match wire::read_message(&mut reader) {
                    Ok(Some(m)) => {
                        if tx.send(m).is_err() {
                            break;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!("client `{name}` reader stopped: {e}");
                        break;
                    }
                }
            })?;
        Ok(Self {
            sender: BusSender {
                inner: Arc::new(Inner {
                    stream: Mutex::new(write),
                    seqs: Default::default(),
                }),
            },
            rx,
            server,
            reader: Some(reader),
        })
    }

    /// The broker's handshake reply; carries the session command layout.
    pub fn server(&self) -> &Handshake {
        &self.server
    }

    pub fn sender(&self) -> BusSender {
        self.sender.clone()
    }

    pub fn publish(&self, kind: MsgType, payload: Vec<u8>) -> Result<u32, BusError> {
        self.sender.publish(kind, payload)
    }

    pub fn publish_at(&self, kind: MsgType, timestamp: u64, flags: u8, payload: Vec<u8>) -> Result<u32, BusError> {
        self.sender.publish_at(kind, timestamp, flags, payload)
    }

    pub fn recv(&self) -> Result<Message, BusError> {
        self.rx.recv().map_err(|_| BusError::Disconnected)
    }

    /// `Ok(None)` on timeout.
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Option<Message>, BusError> {
        match self.rx.recv_timeout(timeout) {
            Ok(m) => Ok(Some(m)),
            Err(RecvTimeoutError::Timeout) => Ok(None),
            Err(RecvTimeoutError::Disconnected) => Err(BusError::Disconnected),
        }
    }

    pub fn try_recv(&self) -> Result<Option<Message>, BusError> {
        match self.rx.try_recv() {
            Ok(m) => Ok(Some(m)),
            Err(TryRecvError::Empty) => Ok(None),
            Err(TryRecvError::Disconnected) => Err(BusError::Disconnected),
        }
    }

    /// Receiving half, for use in `select!`.
    pub fn receiver(&self) -> &Receiver<Message> {
        &self.rx
    }

    pub fn close(mut self) {
        self.shutdown();
    }

    fn shutdown(&mut self) {
        if let Ok(s) = self.sender.inner.stream.lock() {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(r) = self.reader.take() {
            let _ = r.join();
        }
    }
}

impl Drop for BusClient {
    fn drop(&mut self) {
        self.shutdown();
    }
}
