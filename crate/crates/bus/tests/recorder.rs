use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use tw2_bus::recorder::{record, replay, RecordConfig};
use tw2_bus::wire::{self, CtrlAck, CtrlEvent, Handshake, MsgType, FLAG_ACK};
use tw2_bus::{Broker, BrokerConfig, BrokerHandle, BusClient};
use tw2_core::episode::{Episode, EpisodeHeader, MarkKind, Rates};
use tw2_core::{CommandLayout, CommandVector, ProprioState};

const JOINTS: usize = 3;

fn layout() -> CommandLayout {
    CommandLayout::new(
        (0..JOINTS).map(|i| format!("j{i}")).collect(),
        vec!["l0".into()],
        vec!["r0".into()],
    )
}

fn header() -> EpisodeHeader {
    EpisodeHeader {
        layout: layout(),
        proprio_joints: JOINTS,
        normalization: None,
        rates: Rates::default(),
        model_hash: "test".into(),
        created_at: 0,
    }
}

fn broker() -> BrokerHandle {
    Broker::start(BrokerConfig {
        addr: "127.0.0.1:0".into(),
        ..Default::default()
    })
    .unwrap()
}

fn command(k: u64) -> Vec<f64> {
    (0..layout().dim()).map(|i| (k as f64 * 0.37 + i as f64).sin()).collect()
}

/// Publishes CMD (optional) and STATE at 50 Hz until `stop`.
fn streamer(b: &BrokerHandle, with_cmd: bool, stop: Arc<AtomicBool>) -> JoinHandle<u64> {
    let c = BusClient::connect(b.local_addr(), Handshake::new("streamer", Some(layout()), &[])).unwrap();
    thread::spawn(move || {
        let start = Instant::now();
        let mut k = 0;
        while !stop.load(Ordering::Relaxed) {
            let ts = wire::now_ns();
            if with_cmd {
                c.publish_at(MsgType::Cmd, ts, 0, wire::cmd_payload(&command(k))).unwrap();
            }
            let state = ProprioState::zeros(JOINTS).flatten();
            c.publish(MsgType::State, wire::state_payload(ts, &state)).unwrap();
            k += 1;
            let next = start + Duration::from_millis(20) * k as u32;
            if let Some(d) = next.checked_duration_since(Instant::now()) {
                thread::sleep(d);
            }
        }
        k
    })
}

fn synthetic_episode(n: u64, hz: f64) -> Episode {
    let mut ep = Episode::new(header());
    let t0 = 1_000_000_000u64;
    for k in 0..n {
        let ts = t0 + (k as f64 * 1e9 / hz) as u64;
        let cmd = CommandVector::unflatten(&layout(), &command(k), ts).unwrap();
        ep.push(ts, cmd, ProprioState::zeros(JOINTS), None).unwrap();
    }
    ep
}

#[test]
fn ten_second_session_gives_300_records_with_pause_mark() {
    let b = broker();
    let stop = Arc::new(AtomicBool::new(false));
    let s = streamer(&b, true, stop.clone());
    thread::sleep(Duration::from_millis(100));
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("session.tw2e");
    let ctrl = BusClient::connect(b.local_addr(), Handshake::new("ctrl", None, &[])).unwrap();
    let pause_ts = Arc::new(std::sync::Mutex::new(0u64));
    let marker = {
        let pause_ts = pause_ts.clone();
        thread::spawn(move || {
            thread::sleep(Duration::from_secs(4));
            let ts = wire::now_ns();
            let ack = CtrlAck {
                event: CtrlEvent::Pause,
                mode: 2,
                accepted: true,
            };
            ctrl.publish_at(MsgType::Ctrl, ts, FLAG_ACK, ack.to_payload()).unwrap();
            *pause_ts.lock().unwrap() = ts;
            thread::sleep(Duration::from_millis(200));
        })
    };
    let cfg = RecordConfig {
        duration: Some(Duration::from_secs(10)),
        ..Default::default()
    };
    let stats = record(b.local_addr(), &path, header(), &cfg, Arc::new(AtomicBool::new(false))).unwrap();
    marker.join().unwrap();
    stop.store(true, Ordering::Relaxed);
    s.join().unwrap();

    let ep = Episode::read(&path).unwrap();
    assert!((299..=301).contains(&ep.len()), "{} records", ep.len());
    assert_eq!(stats.records as usize, ep.len());
    assert_eq!(ep.marks.len(), 1);
    assert_eq!(ep.marks[0].kind, MarkKind::Pause);
    assert_eq!(ep.marks[0].timestamp, *pause_ts.lock().unwrap());
    assert!(!path.with_extension("tw2e.frames.tmp").exists());
}

#[test]
fn replay_reproduces_commands_bit_exact() {
    let b = broker();
    let source = synthetic_episode(90, 30.0);
    let sub = BusClient::connect(b.local_addr(), Handshake::new("sub", Some(layout()), &[MsgType::Cmd])).unwrap();

    // Re-record the replay alongside a state stream.
    let stop = Arc::new(AtomicBool::new(false));
    let s = streamer(&b, false, stop.clone());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("rerecord.tw2e");
    let rec_stop = Arc::new(AtomicBool::new(false));
    let rec = {
        let (addr, path, rec_stop) = (b.local_addr(), path.clone(), rec_stop.clone());
        thread::spawn(move || record(addr, path, header(), &RecordConfig::default(), rec_stop).unwrap())
    };
    thread::sleep(Duration::from_millis(200));

    let replay_start = wire::now_ns();
    let sent = replay(b.local_addr(), &source, 1.0, &AtomicBool::new(false)).unwrap();
    assert_eq!(sent, 90);
    thread::sleep(Duration::from_millis(100));
    rec_stop.store(true, Ordering::Relaxed);
    rec.join().unwrap();
    stop.store(true, Ordering::Relaxed);
    s.join().unwrap();

    let mut got = Vec::new();
    while let Some(m) = sub.try_recv().unwrap() {
        got.push(m);
    }
    assert_eq!(got.len(), 90);
    for (m, r) in got.iter().zip(&source.records) {
        let flat = wire::parse_cmd(&m.payload, &layout()).unwrap();
        let want = r.command.flatten(&layout()).unwrap();
        assert_eq!(
            flat.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            want.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        assert!(m.timestamp >= replay_start);
    }

    // Every re-recorded command is one of the replayed ones, in order.
    let again = Episode::read(&path).unwrap();
    assert!(again.len() >= 80, "{}", again.len());
    let originals: Vec<Vec<f64>> = source.command_rows();
    let mut cursor = 0;
    for row in again.command_rows() {
        let at = originals[cursor..]
            .iter()
            .position(|o| o == &row)
            .expect("re-recorded command not in source");
        cursor += at;
    }
}

#[test]
fn replay_speed_scales_wall_time() {
    let b = broker();
    let source = synthetic_episode(91, 30.0);
    let span = (source.records[90].timestamp - source.records[0].timestamp) as f64 / 1e9;
    for speed in [1.0, 2.0] {
        let sub =
            BusClient::connect(b.local_addr(), Handshake::new("sub", Some(layout()), &[MsgType::Cmd])).unwrap();
        thread::sleep(Duration::from_millis(50));
        replay(b.local_addr(), &source, speed, &AtomicBool::new(false)).unwrap();
        let mut stamps = Vec::new();
        while let Some(m) = sub.recv_timeout(Duration::from_millis(200)).unwrap() {
            stamps.push(m.timestamp);
        }
        assert_eq!(stamps.len(), 91);
        let wall = (stamps[90] - stamps[0]) as f64 / 1e9;
        let want = span / speed;
        assert!((wall - want).abs() / want < 0.01, "speed {speed}: {wall} s vs {want} s");
    }
    assert!(replay(b.local_addr(), &source, 0.0, &AtomicBool::new(false)).is_err());
}
