mod common;

use std::thread;
use std::time::Duration;

use latctl::driver::ExpertDriver;
use latctl::episode::{EpisodeConfig, TerminalEvent};
use latctl::pid::ExpertConfig;
use latctl::supervisor::ControlSource;
use latctl::telemetry::{hello_for, run_with_server, ServeReport, ServerMessage, TelemetryConfig, TelemetryServer, Thresholds};
use latctl::track::circle_track;

use common::{connect, next_message, send, Client};

fn start(max_steps: u64, cfg: TelemetryConfig) -> (std::net::SocketAddr, thread::JoinHandle<ServeReport>) {
    let track = circle_track("ring", 150.0, 240, 7.5).unwrap();
    let episode = EpisodeConfig {
        max_steps,
        ..EpisodeConfig::default()
    };
    let hello = hello_for(&track, &episode, cfg.frame_hz, Thresholds::default());
    let server = TelemetryServer::bind("127.0.0.1:0", hello, cfg.queue_len).unwrap();
    let addr = server.local_addr();
    let handle = thread::spawn(move || {
        let mut driver = ExpertDriver::new(ExpertConfig::default(), 26.82);
        run_with_server(&mut driver, &track, &episode, &cfg, server).unwrap()
    });
    (addr, handle)
}

fn live() -> TelemetryConfig {
    TelemetryConfig {
        time_scale: 1.0,
        wait_for_client: true,
        wait_timeout_s: 10.0,
        queue_len: 64,
        ..TelemetryConfig::default()
    }
}

fn expect_hello(ws: &mut Client) {
    match next_message(ws) {
        Some(ServerMessage::Hello(h)) => {
            assert_eq!(h.track.name, "ring");
            assert_eq!(h.beam_angles.len(), 19);
        }
        other => panic!("expected hello first, got {other:?}"),
    }
}

#[test]
fn override_round_trip() {
    let (addr, handle) = start(2000, live());
    let mut ws = connect(addr);
    expect_hello(&mut ws);
    send(&mut ws, r#"{"kind":"take_control"}"#);
    send(&mut ws, r#"{"kind":"steer","value":0.3,"client_t":0.0}"#);
    let mut saw_human = false;
    let mut saw_return = false;
    while let Some(msg) = next_message(&mut ws) {
        match msg {
            ServerMessage::Frame(f) if !saw_human && f.source == ControlSource::HumanOverride => {
                assert_eq!(f.steer, 0.3);
                saw_human = true;
                send(&mut ws, r#"{"kind":"release"}"#);
            }
            ServerMessage::Frame(f) if saw_human && f.source == ControlSource::Expert => saw_return = true,
            ServerMessage::End(e) => {
                assert_eq!(e.terminal, TerminalEvent::Timeout);
                break;
            }
            _ => {}
        }
    }
    assert!(saw_human && saw_return);
    let report = handle.join().unwrap();
    assert_eq!(report.clients, 1);
    assert_eq!(report.malformed, 0);

    let steer = report.overrides.iter().find(|e| e.kind == "steer").unwrap();
    assert!(steer.accepted);
    let rec = &report.log.records[steer.step as usize];
    assert_eq!(rec.step, steer.step);
    assert_eq!(rec.source, ControlSource::HumanOverride);
    assert_eq!(rec.cmd.steer, 0.3);

    let release = report.overrides.iter().find(|e| e.kind == "release").unwrap();
    assert!(release.accepted && release.step > steer.step);
    for r in &report.log.records[release.step as usize..] {
        assert_eq!(r.source, ControlSource::Expert);
    }
    for r in &report.log.records[steer.step as usize..release.step as usize] {
        assert_eq!((r.source, r.cmd.steer), (ControlSource::HumanOverride, 0.3));
    }
}

#[test]
fn malformed_messages_are_counted_and_ignored() {
    let (addr, handle) = start(600, live());
    let mut ws = connect(addr);
    expect_hello(&mut ws);
    send(&mut ws, "not json");
    send(&mut ws, r#"{"kind":"fly"}"#);
    send(&mut ws, r#"{"kind":"steer"}"#);
    // steering without control is rejected
    send(&mut ws, r#"{"kind":"steer","value":0.5}"#);
    while let Some(msg) = next_message(&mut ws) {
        if let ServerMessage::Frame(f) = msg {
            assert_ne!(f.source, ControlSource::HumanOverride);
        }
    }
    let report = handle.join().unwrap();
    assert_eq!(report.malformed, 3);
    let steer = report.overrides.iter().find(|e| e.kind == "steer").unwrap();
    assert!(!steer.accepted);
    assert!(report.log.records.iter().all(|r| r.source == ControlSource::Expert));
}

#[test]
fn disconnect_releases_control() {
    let (addr, handle) = start(1500, live());
    let mut ws = connect(addr);
    expect_hello(&mut ws);
    send(&mut ws, r#"{"kind":"take_control"}"#);
    send(&mut ws, r#"{"kind":"steer","value":-0.2}"#);
    while let Some(msg) = next_message(&mut ws) {
        if matches!(msg, ServerMessage::Frame(ref f) if f.source == ControlSource::HumanOverride) {
            break;
        }
    }
    drop(ws);
    let report = handle.join().unwrap();
    let gone = report.overrides.iter().find(|e| e.kind == "disconnect").expect("disconnect event");
    let last = report.log.records.last().unwrap();
    assert!(gone.step < last.step);
    assert_eq!(last.source, ControlSource::Expert);
    assert!(report.log.records[gone.step as usize..]
        .iter()
        .all(|r| r.source == ControlSource::Expert));
}

#[test]
fn runs_without_any_client() {
    let cfg = TelemetryConfig {
        time_scale: 0.0,
        ..TelemetryConfig::default()
    };
    let (_, handle) = start(2_000_000, cfg);
    let report = handle.join().unwrap();
    assert_eq!(report.clients, 0);
    assert_eq!(report.log.summary.terminal, TerminalEvent::LapComplete);
}

#[test]
fn second_client_cannot_steal_control() {
    let (addr, handle) = start(1000, live());
    let mut a = connect(addr);
    let mut b = connect(addr);
    expect_hello(&mut a);
    expect_hello(&mut b);
    send(&mut a, r#"{"kind":"take_control"}"#);
    thread::sleep(Duration::from_millis(50));
    send(&mut b, r#"{"kind":"take_control"}"#);
    send(&mut b, r#"{"kind":"steer","value":0.9}"#);
    while next_message(&mut b).is_some() {}
    while next_message(&mut a).is_some() {}
    let report = handle.join().unwrap();
    let takes: Vec<_> = report.overrides.iter().filter(|e| e.kind == "take_control").collect();
    assert_eq!(takes.len(), 2);
    assert!(takes[0].accepted && !takes[1].accepted);
    assert!(report.log.records.iter().all(|r| r.cmd.steer != 0.9));
}
