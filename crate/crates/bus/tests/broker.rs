use std::io::{Read, Write};
use std::net::TcpStream;
use std::thread;
use std::time::{Duration, Instant};

use tw2_bus::latency::{measure_latency, percentile, EchoResponder};
use tw2_bus::wire::{self, Handshake, Message, MsgType};
use tw2_bus::{Broker, BrokerConfig, BrokerHandle, BusClient, BusError};
use tw2_core::CommandLayout;

fn layout() -> CommandLayout {
    CommandLayout::new(
        (0..4).map(|i| format!("j{i}")).collect(),
        vec!["l0".into()],
        vec!["r0".into()],
    )
}

fn broker() -> BrokerHandle {
    Broker::start(BrokerConfig {
        addr: "127.0.0.1:0".into(),
        ..Default::default()
    })
    .unwrap()
}

fn client(b: &BrokerHandle, name: &str, subs: &[MsgType]) -> BusClient {
    BusClient::connect(b.local_addr(), Handshake::new(name, Some(layout()), subs)).unwrap()
}

fn wait_for_subscribers(b: &BrokerHandle, n: usize) {
    let deadline = Instant::now() + Duration::from_secs(5);
    while b.stats().active < n {
        assert!(Instant::now() < deadline, "subscribers did not register");
        thread::sleep(Duration::from_millis(5));
    }
}

#[test]
fn loopback_cmd_stream_in_order_and_fast() {
    let b = broker();
    let sub = client(&b, "sub", &[MsgType::Cmd, MsgType::Latency]);
    let publisher = client(&b, "pub", &[MsgType::Latency]);
    let _echo = EchoResponder::start(b.local_addr()).unwrap();
    wait_for_subscribers(&b, 3);

    let dim = layout().dim();
    let recv = thread::spawn(move || {
        let mut seqs = Vec::new();
        let mut delays = Vec::new();
        while seqs.len() < 1000 {
            let m = sub.recv_timeout(Duration::from_secs(2)).unwrap().expect("stream stalled");
            if m.kind != MsgType::Cmd {
                continue;
            }
            delays.push(wire::now_ns().saturating_sub(m.timestamp));
            assert_eq!(wire::bytes_to_f64s(&m.payload).unwrap()[0], m.seq as f64);
            seqs.push(m.seq);
        }
        (seqs, delays)
    });
    let period = Duration::from_millis(20);
    let start = Instant::now();
    for k in 0..1000u32 {
        let deadline = start + period * k;
        if let Some(d) = deadline.checked_duration_since(Instant::now()) {
            thread::sleep(d);
        }
        let mut flat = vec![0.0; dim];
        flat[0] = k as f64;
        assert_eq!(publisher.publish(MsgType::Cmd, wire::cmd_payload(&flat)).unwrap(), k);
    }
    let (seqs, delays) = recv.join().unwrap();
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1), "reordered or missing");
    assert_eq!(seqs.len(), 1000);
    let p99 = percentile(&delays, 99.0) as f64 / 1e6;
    assert!(p99 < 5.0, "one-way p99 {p99} ms");

    let report = measure_latency(&publisher, 200, Duration::from_millis(2)).unwrap();
    assert_eq!(report.rtt_ns.len(), 200);
    assert!(report.one_way_p99_ms() < 5.0, "echo one-way p99 {}", report.one_way_p99_ms());
    assert!(report.p99_ms() < 10.0);
    assert_eq!(b.stats().dropped, 0);
}

#[test]
fn mid_stream_join_sees_only_new_messages() {
    let b = broker();
    let publisher = client(&b, "pub", &[]);
    let early = client(&b, "early", &[MsgType::State]);
    wait_for_subscribers(&b, 2);
    for k in 0..10 {
        publisher.publish(MsgType::State, wire::state_payload(k, &[])).unwrap();
    }
    for _ in 0..10 {
        early.recv_timeout(Duration::from_secs(1)).unwrap().unwrap();
    }
    let late = client(&b, "late", &[MsgType::State]);
    wait_for_subscribers(&b, 3);
    for k in 10..15 {
        publisher.publish(MsgType::State, wire::state_payload(k, &[])).unwrap();
    }
    let mut seen = Vec::new();
    while let Some(m) = late.recv_timeout(Duration::from_millis(300)).unwrap() {
        seen.push(wire::parse_state(&m.payload).unwrap().0);
    }
    assert_eq!(seen, vec![10, 11, 12, 13, 14]);
}

#[test]
fn publisher_does_not_receive_its_own_messages_and_topics_filter() {
    let b = broker();
    let a = client(&b, "a", &[MsgType::Cmd]);
    let s = client(&b, "s", &[MsgType::State]);
    wait_for_subscribers(&b, 2);
    a.publish(MsgType::Cmd, wire::cmd_payload(&vec![0.0; layout().dim()])).unwrap();
    assert!(a.recv_timeout(Duration::from_millis(200)).unwrap().is_none());
    assert!(s.recv_timeout(Duration::from_millis(100)).unwrap().is_none());
}

#[test]
fn malformed_frame_drops_only_that_connection() {
    let b = broker();
    let good_pub = client(&b, "good", &[]);
    let sub = client(&b, "sub", &[MsgType::Cmd]);
    let bad = client(&b, "bad", &[MsgType::Cmd]);
    wait_for_subscribers(&b, 3);
    let mut garbage = Message::new(MsgType::Cmd, 0, 0, vec![]).encode().unwrap();
    garbage[0..4].copy_from_slice(b"NOPE");
    bad.sender().send_raw(&garbage).unwrap();

    let deadline = Instant::now() + Duration::from_secs(2);
    let mut disconnected = false;
    while Instant::now() < deadline {
        match bad.recv_timeout(Duration::from_millis(50)) {
            Ok(Some(m)) => assert!(m.is_error()),
            Ok(None) => {}
            Err(BusError::Disconnected) => {
                disconnected = true;
                break;
            }
            Err(e) => panic!("{e}"),
        }
    }
    assert!(disconnected, "bad peer was not dropped");
    assert_eq!(b.stats().protocol_errors, 1);
    assert_eq!(b.stats().active, 2);

    for k in 0..5 {
        let mut flat = vec![0.0; layout().dim()];
        flat[0] = k as f64;
        good_pub.publish(MsgType::Cmd, wire::cmd_payload(&flat)).unwrap();
    }
    for k in 0..5 {
        let m = sub.recv_timeout(Duration::from_secs(1)).unwrap().unwrap();
        assert_eq!(m.seq, k);
    }
}

#[test]
fn handshake_rejections() {
    let b = broker();
    let _first = client(&b, "first", &[]);
    let other = CommandLayout::new(vec!["x".into()], vec![], vec![]);
    match BusClient::connect(b.local_addr(), Handshake::new("other", Some(other), &[])) {
        Err(BusError::Handshake(msg)) => assert!(msg.contains("layout"), "{msg}"),
        Err(e) => panic!("unexpected {e}"),
        Ok(_) => panic!("mismatched layout accepted"),
    }

    let mut hs = Handshake::new("old", None, &[]);
    hs.version = 9;
    assert!(matches!(
        BusClient::connect(b.local_addr(), hs),
        Err(BusError::Handshake(_))
    ));

    // A header with an unknown protocol version is refused before the payload.
    let mut raw = TcpStream::connect(b.local_addr()).unwrap();
    let mut bytes = Message::new(MsgType::Handshake, 0, 0, b"{}".to_vec()).encode().unwrap();
    bytes[4] = 2;
    raw.write_all(&bytes).unwrap();
    raw.set_read_timeout(Some(Duration::from_secs(2))).unwrap();
    let mut reply = Vec::new();
    let _ = raw.read_to_end(&mut reply);
    let m = wire::decode(&reply).unwrap();
    assert!(m.is_error());

    // Clients without a layout may join and learn the session layout.
    let viewer = BusClient::connect(b.local_addr(), Handshake::new("viewer", None, &[])).unwrap();
    assert_eq!(viewer.server().layout, Some(layout()));
}

#[test]
fn latency_probe_times_out_without_peer() {
    let b = broker();
    let c = client(&b, "lonely", &[MsgType::Latency]);
    let t0 = Instant::now();
    assert!(matches!(
        measure_latency(&c, 1, Duration::ZERO),
        Err(BusError::Timeout(_))
    ));
    assert!(t0.elapsed() >= Duration::from_millis(990));
}

#[test]
fn latency_uses_sender_clock_only() {
    // The responder stamps its echoes with a clock an hour ahead.
    let b = broker();
    let prober = client(&b, "prober", &[MsgType::Latency]);
    let skewed = client(&b, "skewed", &[MsgType::Latency]);
    wait_for_subscribers(&b, 2);
    let echo = thread::spawn(move || {
        for _ in 0..20 {
            let m = skewed.recv_timeout(Duration::from_secs(2)).unwrap().unwrap();
            let skewed_now = wire::now_ns() + 3_600_000_000_000;
            skewed
                .publish_at(MsgType::Latency, skewed_now, wire::FLAG_ACK, m.payload)
                .unwrap();
        }
    });
    let report = measure_latency(&prober, 20, Duration::ZERO).unwrap();
    echo.join().unwrap();
    assert!(report.max_ms() < 100.0, "{}", report.max_ms());
}
