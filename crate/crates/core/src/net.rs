//! TCP service mode. Frames are canonical JSON messages, one per line.
//!
//! The foreman runs one event loop thread that owns all state; every connection
//! gets a reader thread feeding it. Workers run their agent on one thread with
//! a reader thread alongside and send heartbeats from the same loop.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use crate::foreman::{Foreman, ForemanConfig, Outbound, Peer};
use crate::protocol::{LoadOrigin, Message};
use crate::transport::PayloadStore;
use crate::worker::WorkerAgent;

pub fn write_frame<W: Write>(w: &mut W, msg: &Message) -> io::Result<()> {
    let mut frame = msg.to_frame();
    frame.push('\n');
    w.write_all(frame.as_bytes())?;
    w.flush()
}

pub struct FrameReader<R> {
    inner: BufReader<R>,
    line: String,
}

impl<R: Read> FrameReader<R> {
    pub fn new(r: R) -> Self {
        FrameReader {
            inner: BufReader::new(r),
            line: String::new(),
        }
    }

    /// Next message, or `None` at end of stream. Blank lines are skipped.
    pub fn next_message(&mut self) -> io::Result<Option<Message>> {
        loop {
            self.line.clear();
            if self.inner.read_line(&mut self.line)? == 0 {
                return Ok(None);
            }
            let frame = self.line.trim_end();
            if frame.is_empty() {
                continue;
            }
            return Message::from_frame(frame)
                .map(Some)
                .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e));
        }
    }
}

enum Event {
    Open(u64, TcpStream),
    Frame(u64, Message),
    Closed(u64),
}

struct Conn {
    stream: TcpStream,
    peer: Option<Peer>,
}

pub struct ForemanHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ForemanHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the acceptor.
        let _ = TcpStream::connect(self.addr);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    /// Blocks until the service stops.
    pub fn join(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

/// Binds `addr` and serves until [`ForemanHandle::shutdown`].
pub fn spawn_foreman(
    addr: &str,
    config: ForemanConfig,
    store: PayloadStore,
) -> io::Result<ForemanHandle> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = mpsc::channel();

    let acceptor = {
        let stop = stop.clone();
        let tx = tx.clone();
        thread::spawn(move || accept_loop(listener, stop, tx))
    };
    let event_loop = {
        let stop = stop.clone();
        thread::spawn(move || foreman_loop(Foreman::new(config, store), rx, stop))
    };
    info!("foreman listening on {local}");
    Ok(ForemanHandle {
        addr: local,
        stop,
        threads: vec![acceptor, event_loop],
    })
}

fn accept_loop(listener: TcpListener, stop: Arc<AtomicBool>, tx: Sender<Event>) {
    let mut next_id = 0u64;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match stream {
            Ok(s) => s,
            Err(e) => {
                warn!("accept: {e}");
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        next_id += 1;
        let id = next_id;
        let Ok(read_half) = stream.try_clone() else {
            continue;
        };
        if tx.send(Event::Open(id, stream)).is_err() {
            break;
        }
        let tx = tx.clone();
        thread::spawn(move || {
            let mut reader = FrameReader::new(read_half);
            loop {
                match reader.next_message() {
                    Ok(Some(msg)) => {
                        if tx.send(Event::Frame(id, msg)).is_err() {
                            return;
                        }
                    }
                    Ok(None) => break,
                    Err(e) => {
                        debug!("connection {id}: {e}");
                        break;
                    }
                }
            }
            let _ = tx.send(Event::Closed(id));
        });
    }
}

fn foreman_loop(mut foreman: Foreman, rx: Receiver<Event>, stop: Arc<AtomicBool>) {
    let started = Instant::now();
    let now = || started.elapsed().as_millis() as u64;
    let tick_every =
        Duration::from_millis((foreman.config().heartbeat_interval_ms / 4).clamp(10, 1000));
    let mut next_tick = Instant::now() + tick_every;
    let mut conns: BTreeMap<u64, Conn> = BTreeMap::new();
    let mut workers: BTreeMap<String, u64> = BTreeMap::new();

    while !stop.load(Ordering::SeqCst) {
        let wait = next_tick.saturating_duration_since(Instant::now());
        let first = match rx.recv_timeout(wait) {
            Ok(ev) => Some(ev),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let mut out = Vec::new();
        let t = now();
        // Apply everything that has arrived, then run one scheduling round.
        for ev in first.into_iter().chain(rx.try_iter()) {
            match ev {
                Event::Open(id, stream) => {
                    conns.insert(id, Conn { stream, peer: None });
                }
                Event::Frame(id, msg) => {
                    let Some(current) = conns.get(&id).map(|c| c.peer.clone()) else {
                        continue;
                    };
                    let peer = match (&current, &msg) {
                        (_, Message::WorkerRegister { worker_id, .. }) => {
                            if let Some(old) = workers.insert(worker_id.clone(), id) {
                                if old != id {
                                    if let Some(c) = conns.get_mut(&old) {
                                        c.peer = None;
                                    }
                                }
                            }
                            Peer::Worker(worker_id.clone())
                        }
                        (Some(p), _) => p.clone(),
                        (None, Message::SubmitPipelineJob(_)) => Peer::Client(id),
                        (None, other) => {
                            warn!("connection {id}: {} before registration", other.kind());
                            continue;
                        }
                    };
                    if let Some(conn) = conns.get_mut(&id) {
                        conn.peer = Some(peer.clone());
                    }
                    out.extend(foreman.apply(t, peer, msg));
                }
                Event::Closed(id) => {
                    if let Some(Conn {
                        peer: Some(Peer::Worker(w)),
                        ..
                    }) = conns.remove(&id)
                    {
                        if workers.get(&w) == Some(&id) {
                            workers.remove(&w);
                            info!("`{w}` disconnected");
                            out.extend(foreman.on_worker_disconnect(t, &w));
                        }
                    }
                }
            }
        }
        if Instant::now() >= next_tick {
            out.extend(foreman.tick(t));
            next_tick = Instant::now() + tick_every;
        }
        out.extend(foreman.schedule(t));
        for Outbound { to, msg } in out {
            let id = match &to {
                Peer::Worker(w) => workers.get(w).copied(),
                Peer::Client(c) => Some(*c),
            };
            let Some(conn) = id.and_then(|id| conns.get_mut(&id)) else {
                debug!("dropping {} for {to:?}: not connected", msg.kind());
                continue;
            };
            if let Err(e) = write_frame(&mut conn.stream, &msg) {
                warn!("write to {to:?}: {e}");
                let _ = conn.stream.shutdown(Shutdown::Both);
            }
        }
    }
    for conn in conns.values() {
        let _ = conn.stream.shutdown(Shutdown::Both);
    }
}

#[derive(Debug, Clone)]
pub struct WorkerOptions {
    pub heartbeat_ms: u64,
    /// Sleep for simulated load durations before acknowledging.
    pub honour_simulated_load: bool,
    /// Drop the connection for good after sending this many task results.
    /// Used to inject a mid-job failure.
    pub exit_after_results: Option<usize>,
    pub reconnect_delay_ms: u64,
}

impl Default for WorkerOptions {
    fn default() -> Self {
        WorkerOptions {
            heartbeat_ms: 30_000,
            honour_simulated_load: true,
            exit_after_results: None,
            reconnect_delay_ms: 500,
        }
    }
}

pub struct WorkerHandle {
    stop: Arc<AtomicBool>,
    thread: JoinHandle<io::Result<WorkerAgent>>,
}

impl WorkerHandle {
    /// Stops the worker and returns its agent.
    pub fn stop(self) -> io::Result<WorkerAgent> {
        self.stop.store(true, Ordering::SeqCst);
        self.thread.join().expect("worker thread panicked")
    }

    pub fn is_finished(&self) -> bool {
        self.thread.is_finished()
    }
}

pub fn spawn_worker(addr: SocketAddr, agent: WorkerAgent, opts: WorkerOptions) -> WorkerHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let s = stop.clone();
    WorkerHandle {
        stop,
        thread: thread::spawn(move || run_worker(addr, agent, opts, s)),
    }
}

/// Runs a worker against the foreman at `addr` until `stop` is set,
/// reconnecting when the connection drops.
pub fn run_worker(
    addr: SocketAddr,
    mut agent: WorkerAgent,
    opts: WorkerOptions,
    stop: Arc<AtomicBool>,
) -> io::Result<WorkerAgent> {
    let mut results = 0usize;
    while !stop.load(Ordering::SeqCst) {
        let stream = match TcpStream::connect(addr) {
            Ok(s) => s,
            Err(e) => {
                debug!("{}: connect: {e}", agent.id());
                thread::sleep(Duration::from_millis(opts.reconnect_delay_ms));
                continue;
            }
        };
        let _ = stream.set_nodelay(true);
        match session(&stream, &mut agent, &opts, &stop, &mut results) {
            Ok(Exit::Stopped) | Ok(Exit::Injected) => {
                let _ = stream.shutdown(Shutdown::Both);
                return Ok(agent);
            }
            Ok(Exit::Lost) => info!("{}: connection lost", agent.id()),
            Err(e) => warn!("{}: {e}", agent.id()),
        }
        let _ = stream.shutdown(Shutdown::Both);
        thread::sleep(Duration::from_millis(opts.reconnect_delay_ms));
    }
    Ok(agent)
}

enum Exit {
    Stopped,
    Lost,
    Injected,
}

fn session(
    stream: &TcpStream,
    agent: &mut WorkerAgent,
    opts: &WorkerOptions,
    stop: &AtomicBool,
    results: &mut usize,
) -> io::Result<Exit> {
    let started = Instant::now();
    let mut writer = stream.try_clone()?;
    let (tx, rx) = mpsc::channel();
    let read_half = stream.try_clone()?;
    thread::spawn(move || {
        let mut reader = FrameReader::new(read_half);
        while let Ok(Some(msg)) = reader.next_message() {
            if tx.send(msg).is_err() {
                break;
            }
        }
    });

    write_frame(&mut writer, &agent.register())?;
    write_frame(&mut writer, &agent.emit_heartbeat(0))?;
    let beat = Duration::from_millis(opts.heartbeat_ms.max(1));
    let mut next_beat = Instant::now() + beat;
    // Short waits so a stop request is noticed promptly.
    let poll = Duration::from_millis(50);

    loop {
        if stop.load(Ordering::SeqCst) {
            return Ok(Exit::Stopped);
        }
        let wait = next_beat
            .saturating_duration_since(Instant::now())
            .min(poll);
        match rx.recv_timeout(wait) {
            Ok(msg) => {
                let Some(reply) = agent.handle(msg) else {
                    continue;
                };
                if opts.honour_simulated_load {
                    if let Message::ModelLoaded(ack) = &reply {
                        if ack.source != LoadOrigin::Resident
                            && agent.config().simulate_load.is_some()
                        {
                            thread::sleep(Duration::from_millis(ack.load_duration_ms));
                        }
                    }
                }
                let is_result = matches!(reply, Message::TaskResult(_));
                write_frame(&mut writer, &reply)?;
                if is_result {
                    *results += 1;
                    if opts.exit_after_results == Some(*results) {
                        info!("{}: leaving after {results} results", agent.id());
                        return Ok(Exit::Injected);
                    }
                }
            }
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => return Ok(Exit::Lost),
        }
        if Instant::now() >= next_beat {
            let t = started.elapsed().as_millis() as u64;
            write_frame(&mut writer, &agent.emit_heartbeat(t))?;
            next_beat = Instant::now() + beat;
        }
    }
}
