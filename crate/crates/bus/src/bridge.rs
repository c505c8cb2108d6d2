//! Websocket bridge for browser clients.
//!
//! Each websocket client gets its own bus connection subscribed to CMD, STATE
//! and CTRL. Bus messages are re-encoded as JSON text frames ([`BridgeOut`]);
//! JSON requests from the client ([`BridgeIn`]) are published as CTRL. The
//! binary bus path is not affected.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use tungstenite::{Message as WsMessage, WebSocket};
use tw2_core::CommandLayout;

use crate::client::BusClient;
use crate::error::BusError;
use crate::session::Mode;
use crate::wire::{self, CtrlAck, CtrlEvent, Handshake, Message, MsgType};

/// Server-to-client JSON messages, tagged by `type`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BridgeOut {
    Hello {
        version: u8,
        layout: Option<CommandLayout>,
        names: Vec<String>,
    },
    Cmd {
        seq: u32,
        ts: u64,
        values: Vec<f64>,
    },
    State {
        seq: u32,
        ts: u64,
        cmd_ts: u64,
        values: Vec<f64>,
    },
    CtrlAck {
        ts: u64,
        event: String,
        mode: String,
        accepted: bool,
    },
    Mark {
        ts: u64,
        event: String,
    },
    Error {
        message: String,
    },
}

/// Client-to-server JSON messages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BridgeIn {
    /// `event` is a CTRL event name, e.g. `"pause"` or `"mark_failure"`.
    Ctrl { event: String },
}

impl BridgeIn {
    pub fn event(&self) -> Result<CtrlEvent, String> {
        match self {
            BridgeIn::Ctrl { event } => CtrlEvent::from_name(event).ok_or_else(|| format!("unknown event `{event}`")),
        }
    }
}

/// Converts a bus message to its JSON form; `None` for types not bridged.
pub fn to_json(msg: &Message) -> Option<BridgeOut> {
    match msg.kind {
        MsgType::Cmd => wire::bytes_to_f64s(&msg.payload).ok().map(|values| BridgeOut::Cmd {
            seq: msg.seq,
            ts: msg.timestamp,
            values,
        }),
        MsgType::State => wire::parse_state(&msg.payload).ok().map(|(cmd_ts, values)| BridgeOut::State {
            seq: msg.seq,
            ts: msg.timestamp,
            cmd_ts,
            values,
        }),
        MsgType::Ctrl if msg.is_ack() => CtrlAck::from_payload(&msg.payload).ok().map(|a| BridgeOut::CtrlAck {
            ts: msg.timestamp,
            event: a.event.name().into(),
            mode: Mode::from_u8(a.mode).map_or("unknown", Mode::name).into(),
            accepted: a.accepted,
        }),
        MsgType::Ctrl => match wire::ctrl_event(&msg.payload) {
            Ok(e) if e.is_mark() => Some(BridgeOut::Mark {
                ts: msg.timestamp,
                event: e.name().into(),
            }),
            _ => None,
        },
        _ => None,
    }
}

pub struct BridgeHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.halt();
    }

    fn halt(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.halt();
    }
}

/// Listens on `listen` and bridges each websocket client to the broker at `bus`.
pub fn start_bridge(bus: SocketAddr, listen: &str) -> Result<BridgeHandle, BusError> {
    let listener = TcpListener::bind(listen)?;
    listener.set_nonblocking(true)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::Builder::new().name("ws-bridge".into()).spawn(move || {
        let mut workers: Vec<JoinHandle<()>> = Vec::new();
        while !flag.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, peer)) => {
                    let flag = flag.clone();
                    match thread::Builder::new()
                        .name("ws-client".into())
                        .spawn(move || {
                            if let Err(e) = serve(stream, bus, &flag) {
                                debug!("websocket client {peer} closed: {e}");
                            }
                        }) {
                        Ok(h) => workers.push(h),
                        Err(e) => warn!("cannot spawn websocket worker: {e}"),
                    }
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(e) => {
                    warn!("bridge accept failed: {e}");
                    thread::sleep(Duration::from_millis(50));
                }
            }
            workers.retain(|w| !w.is_finished());
        }
        for w in workers {
            let _ = w.join();
        }
    })?;
    info!("websocket bridge on ws://{addr}");
    Ok(BridgeHandle {
        addr,
        stop,
        thread: Some(thread),
    })
}

fn send(ws: &mut WebSocket<TcpStream>, out: &BridgeOut) -> Result<(), BusError> {
    let text = serde_json::to_string(out).expect("bridge messages serialize");
    ws.send(WsMessage::text(text)).map_err(ws_err)
}

fn ws_err(e: tungstenite::Error) -> BusError {
    match e {
        tungstenite::Error::Io(io) => BusError::Io(io),
        tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed => BusError::Disconnected,
        other => BusError::Handshake(other.to_string()),
    }
}

fn serve(stream: TcpStream, bus: SocketAddr, stop: &AtomicBool) -> Result<(), BusError> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    let mut ws = tungstenite::accept(stream).map_err(|e| BusError::Handshake(e.to_string()))?;
    ws.get_ref().set_read_timeout(Some(Duration::from_millis(5)))?;
    let client = BusClient::connect(
        bus,
        Handshake::new("ws-bridge", None, &[MsgType::Cmd, MsgType::State, MsgType::Ctrl]),
    )?;
    let layout = client.server().layout.clone();
    let names = layout.as_ref().map(|l| l.names()).unwrap_or_default();
    send(
        &mut ws,
        &BridgeOut::Hello {
            version: wire::PROTOCOL_VERSION,
            layout,
            names,
        },
    )?;
    while !stop.load(Ordering::Relaxed) {
        while let Some(m) = client.try_recv()? {
            if let Some(out) = to_json(&m) {
                send(&mut ws, &out)?;
            }
        }
        match ws.read() {
            Ok(WsMessage::Text(text)) => {
                let parsed = serde_json::from_str::<BridgeIn>(&text)
                    .map_err(|e| e.to_string())
                    .and_then(|r| r.event());
                match parsed {
                    Ok(event) => {
                        client.publish(MsgType::Ctrl, vec![event as u8])?;
                    }
                    Err(message) => send(&mut ws, &BridgeOut::Error { message })?,
                }
            }
            Ok(WsMessage::Close(_)) => return Ok(()),
            Ok(_) => {}
            Err(tungstenite::Error::Io(e))
                if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => return Err(ws_err(e)),
        }
    }
    let _ = ws.close(None);
    Ok(())
}
