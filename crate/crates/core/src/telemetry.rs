//! Live telemetry over WebSocket.
//!
//! The simulation loop owns the episode and runs on the calling thread. An
//! accept thread hands each connection to its own client thread, which sends
//! a `hello` message with the track geometry, then streams frames from a
//! bounded keep-latest queue and forwards parsed override messages to the
//! loop over a channel. Overrides are drained before every physics step, so
//! one received before step `k` begins affects step `k`.
//!
//! Wire format (JSON text messages):
//! - server → client: `{"type":"hello",...}` once, then `{"type":"frame",...}`
//!   at up to `frame_hz`, and finally `{"type":"end",...}`.
//! - client → server: `{"kind":"take_control"}`, `{"kind":"steer","value":0.3}`,
//!   `{"kind":"release"}`, each with an optional `client_t`.

use std::collections::VecDeque;
use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use tungstenite::{Message, WebSocket};

use crate::episode::{Controller, Episode, EpisodeConfig, TerminalEvent, TrajectoryLog};
use crate::supervisor::{ControlSource, RunStats};
use crate::track::TrackGeometry;
use crate::{Error, Result};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TelemetryConfig {
    pub bind: String,
    pub frame_hz: f64,
    /// Simulated seconds per wall-clock second; 0 runs unpaced.
    pub time_scale: f64,
    /// Hold the first physics step until a client connects.
    pub wait_for_client: bool,
    pub wait_timeout_s: f64,
    /// Frames buffered per client before the oldest is dropped.
    pub queue_len: usize,
}

impl Default for TelemetryConfig {
    fn default() -> Self {
        TelemetryConfig {
            bind: "127.0.0.1:8765".into(),
            frame_hz: 50.0,
            time_scale: 1.0,
            wait_for_client: false,
            wait_timeout_s: 30.0,
            queue_len: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackMessage {
    pub name: String,
    pub half_width: f64,
    pub length: f64,
    pub centerline: Vec<[f64; 2]>,
    pub left_edge: Vec<[f64; 2]>,
    pub right_edge: Vec<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hello {
    pub protocol: u32,
    pub track: TrackMessage,
    pub frame_hz: f64,
    pub beam_angles: Vec<f64>,
    pub max_range: f64,
    pub cov_on: Option<f64>,
    pub cov_off: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub step: u64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
    pub lidar: Vec<f64>,
    pub steer: f64,
    pub accel: f64,
    pub brake: f64,
    /// Ensemble mean, std, CoV and odd count; absent for models without an ensemble.
    pub mean: Option<f64>,
    pub sigma: Option<f64>,
    pub cov: Option<f64>,
    pub odd_count: Option<usize>,
    pub total_odd_counts: u64,
    pub interventions: u64,
    pub source: ControlSource,
    pub lap_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndMessage {
    pub terminal: TerminalEvent,
    pub lap_fraction: f64,
    pub t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ServerMessage {
    Hello(Hello),
    Frame(TelemetryFrame),
    End(EndMessage),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OverrideMessage {
    TakeControl {
        #[serde(default)]
        client_t: Option<f64>,
    },
    Steer {
        value: f64,
        #[serde(default)]
        client_t: Option<f64>,
    },
    Release {
        #[serde(default)]
        client_t: Option<f64>,
    },
}

impl OverrideMessage {
    pub fn kind(&self) -> &'static str {
        match self {
            OverrideMessage::TakeControl { .. } => "take_control",
            OverrideMessage::Steer { .. } => "steer",
            OverrideMessage::Release { .. } => "release",
        }
    }
}

/// An override as applied by the simulation loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverrideEvent {
    /// Physics step the override first affects.
    pub step: u64,
    pub client: u64,
    pub kind: String,
    pub value: Option<f64>,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServeReport {
    pub log: TrajectoryLog,
    pub stats: RunStats,
    pub malformed: u64,
    pub overrides: Vec<OverrideEvent>,
    pub clients: u64,
}

/// Optional metadata for the hello message.
#[derive(Debug, Clone, Copy, Default)]
pub struct Thresholds {
    pub cov_on: Option<f64>,
    pub cov_off: Option<f64>,
}

enum ClientEvent {
    Connected,
    Override(u64, OverrideMessage),
    Malformed,
    Disconnected(u64),
}

/// Bounded queue that drops the oldest entry when full.
struct FrameQueue {
    inner: Mutex<(VecDeque<Arc<String>>, bool)>,
    ready: Condvar,
    capacity: usize,
}

impl FrameQueue {
    fn new(capacity: usize) -> Self {
        FrameQueue {
            inner: Mutex::new((VecDeque::with_capacity(capacity), false)),
            ready: Condvar::new(),
            capacity: capacity.max(1),
        }
    }

    fn push(&self, msg: Arc<String>) {
        let mut g = self.inner.lock().unwrap();
        if g.0.len() == self.capacity {
            g.0.pop_front();
        }
        g.0.push_back(msg);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.inner.lock().unwrap().1 = true;
        self.ready.notify_all();
    }

    /// Next message, `Ok(None)` on timeout, `Err(())` once closed and drained.
    fn pop(&self, timeout: Duration) -> std::result::Result<Option<Arc<String>>, ()> {
        let mut g = self.inner.lock().unwrap();
        if g.0.is_empty() && !g.1 {
            g = self.ready.wait_timeout(g, timeout).unwrap().0;
        }
        match g.0.pop_front() {
            Some(m) => Ok(Some(m)),
            None if g.1 => Err(()),
            None => Ok(None),
        }
    }
}

struct Shared {
    queues: Mutex<Vec<(u64, Arc<FrameQueue>)>>,
    stop: AtomicBool,
}

pub struct TelemetryServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    events: Receiver<ClientEvent>,
    accept: Option<JoinHandle<()>>,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl TelemetryServer {
    /// Binds the listening socket; a busy port is a startup error.
    pub fn bind(bind: &str, hello: Hello, queue_len: usize) -> Result<Self> {
        let listener =
            TcpListener::bind(bind).map_err(|e| Error::Telemetry(format!("cannot bind {bind}: {e}")))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::Telemetry(e.to_string()))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::Telemetry(e.to_string()))?;
        let shared = Arc::new(Shared {
            queues: Mutex::new(Vec::new()),
            stop: AtomicBool::new(false),
        });
        let (tx, rx) = mpsc::channel();
        let hello_text = serde_json::to_string(&ServerMessage::Hello(hello)).expect("hello serializes");
        let workers = Arc::new(Mutex::new(Vec::new()));
        let accept = {
            let shared = shared.clone();
            let workers = workers.clone();
            std::thread::spawn(move || accept_loop(listener, shared, tx, hello_text, queue_len, workers))
        };
        Ok(TelemetryServer {
            addr,
            shared,
            events: rx,
            accept: Some(accept),
            workers,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    fn broadcast(&self, text: String) {
        let msg = Arc::new(text);
        for (_, q) in self.shared.queues.lock().unwrap().iter() {
            q.push(msg.clone());
        }
    }

    fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        for (_, q) in self.shared.queues.lock().unwrap().iter() {
            q.close();
        }
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
        let handles: Vec<_> = self.workers.lock().unwrap().drain(..).collect();
        for h in handles {
            let _ = h.join();
        }
    }
}

impl Drop for TelemetryServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(
    listener: TcpListener,
    shared: Arc<Shared>,
    tx: Sender<ClientEvent>,
    hello: String,
    queue_len: usize,
    workers: Arc<Mutex<Vec<JoinHandle<()>>>>,
) {
    let mut next_id = 0u64;
    while !shared.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                next_id += 1;
                let id = next_id;
                let queue = Arc::new(FrameQueue::new(queue_len));
                let tx = tx.clone();
                let hello = hello.clone();
                let shared2 = shared.clone();
                let h = std::thread::spawn(move || client_loop(id, stream, queue, shared2, tx, hello));
                workers.lock().unwrap().push(h);
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
            Err(_) => std::thread::sleep(Duration::from_millis(10)),
        }
    }
}

fn client_loop(
    id: u64,
    stream: TcpStream,
    queue: Arc<FrameQueue>,
    shared: Arc<Shared>,
    tx: Sender<ClientEvent>,
    hello: String,
) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let Ok(mut ws) = tungstenite::accept(stream) else {
        return;
    };
    if ws.send(Message::text(hello)).is_err() {
        return;
    }
    let _ = ws.get_ref().set_read_timeout(Some(Duration::from_millis(1)));
    // Register only after the hello is out, so frames never precede it.
    shared.queues.lock().unwrap().push((id, queue.clone()));
    let _ = tx.send(ClientEvent::Connected);
    let result = pump(id, &mut ws, &queue, &tx);
    shared.queues.lock().unwrap().retain(|(cid, _)| *cid != id);
    if result.is_ok() {
        let _ = ws.close(None);
        let _ = ws.flush();
    }
    let _ = tx.send(ClientEvent::Disconnected(id));
}

fn pump(
    id: u64,
    ws: &mut WebSocket<TcpStream>,
    queue: &FrameQueue,
    tx: &Sender<ClientEvent>,
) -> std::result::Result<(), ()> {
    loop {
        loop {
            match ws.read() {
                Ok(Message::Text(text)) => {
                    let ev = match serde_json::from_str::<OverrideMessage>(&text) {
                        Ok(m) => ClientEvent::Override(id, m),
                        Err(_) => ClientEvent::Malformed,
                    };
                    let _ = tx.send(ev);
                }
                Ok(Message::Binary(_)) => {
                    let _ = tx.send(ClientEvent::Malformed);
                }
                Ok(Message::Close(_)) => return Err(()),
                Ok(_) => {}
                Err(tungstenite::Error::Io(e))
                    if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) =>
                {
                    break
                }
                Err(_) => return Err(()),
            }
        }
        match queue.pop(Duration::from_millis(2)) {
            Ok(Some(msg)) => {
                if ws.send(Message::text(msg.as_str())).is_err() {
                    return Err(());
                }
            }
            Ok(None) => {}
            Err(()) => return Ok(()),
        }
    }
}

pub fn hello_for(track: &TrackGeometry, episode: &EpisodeConfig, frame_hz: f64, thresholds: Thresholds) -> Hello {
    let pts = |v: &[crate::Vec2]| v.iter().map(|p| [p.x, p.y]).collect::<Vec<_>>();
    Hello {
        protocol: PROTOCOL_VERSION,
        track: TrackMessage {
            name: track.name().to_string(),
            half_width: track.half_width(),
            length: track.total_length(),
            centerline: pts(track.waypoints()),
            left_edge: pts(track.left_edge()),
            right_edge: pts(track.right_edge()),
        },
        frame_hz,
        beam_angles: episode.lidar.angles(),
        max_range: episode.lidar.max_range,
        cov_on: thresholds.cov_on,
        cov_off: thresholds.cov_off,
    }
}

/// Override state owned by the simulation loop.
#[derive(Debug, Default)]
struct LoopState {
    controller: Option<u64>,
    steer: f64,
    events: Vec<OverrideEvent>,
    malformed: u64,
    clients: u64,
}

impl LoopState {
    fn human(&self) -> Option<f64> {
        self.controller.map(|_| self.steer)
    }

    fn handle(&mut self, ev: ClientEvent, step: u64) {
        match ev {
            ClientEvent::Connected => self.clients += 1,
            ClientEvent::Malformed => self.malformed += 1,
            ClientEvent::Disconnected(id) => {
                if self.controller == Some(id) {
                    self.controller = None;
                    self.events.push(OverrideEvent {
                        step,
                        client: id,
                        kind: "disconnect".into(),
                        value: None,
                        accepted: true,
                    });
                }
            }
            ClientEvent::Override(id, msg) => {
                let (accepted, value) = match msg {
                    OverrideMessage::TakeControl { .. } => {
                        let ok = self.controller.map_or(true, |c| c == id);
                        if ok && self.controller.is_none() {
                            self.controller = Some(id);
                            self.steer = 0.0;
                        }
                        (ok, None)
                    }
                    OverrideMessage::Steer { value, .. } => {
                        let ok = self.controller == Some(id) && value.is_finite();
                        let v = if value.is_finite() { value.clamp(-1.0, 1.0) } else { value };
                        if ok {
                            self.steer = v;
                        }
                        (ok, Some(v))
                    }
                    OverrideMessage::Release { .. } => {
                        let ok = self.controller == Some(id);
                        if ok {
                            self.controller = None;
                        }
                        (ok, None)
                    }
                };
                self.events.push(OverrideEvent {
                    step,
                    client: id,
                    kind: msg.kind().into(),
                    value,
                    accepted,
                });
            }
        }
    }
}

/// Runs one live episode, streaming frames and applying human overrides.
pub fn serve<C: Controller>(
    controller: &mut C,
    track: &TrackGeometry,
    episode: &EpisodeConfig,
    cfg: &TelemetryConfig,
    thresholds: Thresholds,
) -> Result<ServeReport> {
    let server = TelemetryServer::bind(&cfg.bind, hello_for(track, episode, cfg.frame_hz, thresholds), cfg.queue_len)?;
    log::info!("telemetry listening on ws://{}", server.local_addr());
    run_with_server(controller, track, episode, cfg, server)
}

/// Like [`serve`] but on an already bound server (lets callers learn the port first).
pub fn run_with_server<C: Controller>(
    controller: &mut C,
    track: &TrackGeometry,
    episode: &EpisodeConfig,
    cfg: &TelemetryConfig,
    mut server: TelemetryServer,
) -> Result<ServeReport> {
    if !(cfg.frame_hz > 0.0) || !(cfg.time_scale >= 0.0) {
        return Err(Error::Config("frame_hz must be positive and time_scale non-negative".into()));
    }
    let mut ep = Episode::new(track, episode.clone())?;
    let dt = episode.sim.dt;
    let decimation = ((1.0 / (dt * cfg.frame_hz)).round() as u64).max(1);
    let mut ls = LoopState::default();
    let mut stats = RunStats::default();

    if cfg.wait_for_client {
        let deadline = Instant::now() + Duration::from_secs_f64(cfg.wait_timeout_s.max(0.0));
        while ls.clients == 0 {
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(Error::Telemetry("no client connected before the wait timeout".into()));
            }
            if let Ok(ev) = server.events.recv_timeout(left.min(Duration::from_millis(50))) {
                ls.handle(ev, 0);
            }
        }
    }

    let start = Instant::now();
    loop {
        let step = ep.step_index();
        while let Ok(ev) = server.events.try_recv() {
            ls.handle(ev, step);
        }
        if cfg.time_scale > 0.0 {
            let due = Duration::from_secs_f64(ep.time() / cfg.time_scale);
            let now = start.elapsed();
            if due > now {
                std::thread::sleep(due - now);
                // messages that arrived while sleeping are still before this step
                while let Ok(ev) = server.events.try_recv() {
                    ls.handle(ev, step);
                }
            }
        }
        let human = ls.human();
        let terminal = ep.step(controller, human);
        if let Some(d) = ep.last_decision() {
            if let Some(s) = &d.stats {
                stats.accumulate(s, d.source);
            }
        }
        if step % decimation == 0 || terminal.is_some() {
            if let Some(frame) = frame_of(&ep, &stats) {
                server.broadcast(serde_json::to_string(&ServerMessage::Frame(frame)).expect("frame serializes"));
            }
        }
        if let Some(t) = terminal {
            server.broadcast(
                serde_json::to_string(&ServerMessage::End(EndMessage {
                    terminal: t,
                    lap_fraction: ep.lap_fraction(),
                    t: ep.time(),
                }))
                .expect("end serializes"),
            );
            break;
        }
    }
    server.shutdown();
    while let Ok(ev) = server.events.try_recv() {
        ls.handle(ev, ep.step_index());
    }
    Ok(ServeReport {
        log: ep.finish(),
        stats,
        malformed: ls.malformed,
        overrides: ls.events,
        clients: ls.clients,
    })
}

/// State after the latest step, with the command and scan that produced it.
fn frame_of(ep: &Episode<'_>, stats: &RunStats) -> Option<TelemetryFrame> {
    let d = ep.last_decision()?;
    let scan = ep.last_scan();
    let st = ep.state();
    let s = d.stats.as_ref();
    Some(TelemetryFrame {
        step: ep.step_index(),
        t: ep.time(),
        x: st.x,
        y: st.y,
        heading: st.heading,
        speed: st.speed,
        lidar: scan.distances.clone(),
        steer: d.cmd.steer,
        accel: d.cmd.accel,
        brake: d.cmd.brake,
        mean: s.map(|s| s.mean),
        sigma: s.map(|s| s.std),
        cov: s.map(|s| s.cov),
        odd_count: s.map(|s| s.odd_count),
        total_odd_counts: stats.total_odd_counts,
        interventions: stats.interventions,
        source: d.source,
        lap_fraction: ep.lap_fraction(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn override_wire_format() {
        let m: OverrideMessage = serde_json::from_str(r#"{"kind":"steer","value":0.3}"#).unwrap();
        assert_eq!(m, OverrideMessage::Steer { value: 0.3, client_t: None });
        let m: OverrideMessage = serde_json::from_str(r#"{"kind":"take_control","client_t":1.5}"#).unwrap();
        assert_eq!(m, OverrideMessage::TakeControl { client_t: Some(1.5) });
        assert!(serde_json::from_str::<OverrideMessage>(r#"{"kind":"jump"}"#).is_err());
        assert!(serde_json::from_str::<OverrideMessage>(r#"{"kind":"steer"}"#).is_err());
    }

    #[test]
    fn queue_keeps_latest() {
        let q = FrameQueue::new(2);
        for i in 0..5 {
            q.push(Arc::new(i.to_string()));
        }
        assert_eq!(q.pop(Duration::ZERO).unwrap().unwrap().as_str(), "3");
        assert_eq!(q.pop(Duration::ZERO).unwrap().unwrap().as_str(), "4");
        assert_eq!(q.pop(Duration::ZERO), Ok(None));
        q.close();
        assert_eq!(q.pop(Duration::ZERO), Err(()));
    }

    #[test]
    fn port_in_use_is_startup_error() {
        let hold = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = hold.local_addr().unwrap().to_string();
        let track = crate::track::circle_track("c", 100.0, 64, 7.5).unwrap();
        let hello = hello_for(&track, &EpisodeConfig::default(), 50.0, Thresholds::default());
        assert!(matches!(TelemetryServer::bind(&addr, hello, 4), Err(Error::Telemetry(_))));
    }
}
