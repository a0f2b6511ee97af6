//! Virtual-time driver. All agents run in one thread; a (time, sequence)
//! ordered queue carries messages, delayed replies and timers.
//!
//! Everything queued for instant `t` is handled in sub-batches: deliveries to
//! workers and events for the foreman are applied, then the foreman runs one
//! scheduling round. Messages produced at `t` form the next sub-batch.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::FleetConfig;
use super::report::{LatencySummary, ModeReport, WorkerReport};
use super::SimError;
use crate::foreman::{Foreman, ForemanConfig, ForemanEvent, JobStatus, Peer};
use crate::model::{ExecutionMode, WorkerId};
use crate::protocol::{LoadModel, LoadOrigin, LoadSource, Message, SubmitPipelineJob};
use crate::transport::{decode_payload, encode_payload, resolve_payload, PayloadStore, Tensor};
use crate::worker::{AffineExecutor, SimulatedLoad, WorkerAgent, WorkerConfig};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;

const CLIENT: u64 = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    ToWorker,
    ToForeman,
}

/// A message as it crossed between the foreman and a worker.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub at_ms: u64,
    /// Scheduling rounds completed before this message was handled.
    pub round: u64,
    pub worker: WorkerId,
    pub direction: Direction,
    pub msg: Message,
}

/// Everything a single-mode run produces.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub report: ModeReport,
    /// Sink activations in input order.
    pub sink_outputs: Vec<Tensor>,
    pub trace: Vec<TraceEntry>,
    pub foreman_events: Vec<ForemanEvent>,
    /// For each foreman event, the index of the scheduling round it belongs
    /// to: events raised while handling a batch share the index of the round
    /// that closes that batch.
    pub event_rounds: Vec<u64>,
    /// Virtual time of each scheduling round, indexed by round number.
    pub round_times: Vec<u64>,
}

#[derive(Debug)]
enum Event {
    Submit,
    ToWorker(WorkerId, Message),
    ToForeman(WorkerId, Message),
    Heartbeat(WorkerId),
    Tick,
    Kill(WorkerId),
}

struct SimWorker {
    agent: WorkerAgent,
    alive: bool,
    /// Largest footprint among partitions this worker loaded.
    footprints_loaded: u64,
    tasks: u64,
    loads: u64,
}

struct Sim<'a> {
    cfg: &'a FleetConfig,
    queue: BTreeMap<(u64, u64), Event>,
    seq: u64,
    foreman: Foreman,
    workers: BTreeMap<WorkerId, SimWorker>,
    footprints: BTreeMap<String, u64>,
    trace: Vec<TraceEntry>,
    rounds: u64,
    round_times: Vec<u64>,
    event_rounds: Vec<u64>,
    outcome: Option<Result<u64, SimError>>,
    submission: Option<SubmitPipelineJob>,
}

impl Sim<'_> {
    fn push(&mut self, at: u64, ev: Event) {
        self.queue.insert((at, self.seq), ev);
        self.seq += 1;
    }

    fn route(&mut self, now: u64, out: Vec<crate::foreman::Outbound>) {
        for o in out {
            match (o.to, o.msg) {
                (Peer::Worker(w), msg) => self.push(now, Event::ToWorker(w, msg)),
                (Peer::Client(_), Message::JobResult(_)) => self.outcome = Some(Ok(now)),
                (Peer::Client(_), Message::JobFailed { reason, .. }) => {
                    self.outcome = Some(Err(SimError::JobFailed(reason)))
                }
                (Peer::Client(_), Message::JobRejected { reason }) => {
                    self.outcome = Some(Err(SimError::Rejected(reason)))
                }
                (Peer::Client(_), _) => {}
            }
        }
    }

    fn stamp_events(&mut self) {
        let n = self.foreman.events().len();
        self.event_rounds.resize(n, self.rounds);
    }

    fn record(&mut self, now: u64, worker: &str, direction: Direction, msg: &Message) {
        self.trace.push(TraceEntry {
            at_ms: now,
            round: self.rounds,
            worker: worker.to_string(),
            direction,
            msg: msg.clone(),
        });
    }

    fn process(&mut self, now: u64, ev: Event) {
        match ev {
            Event::Submit => {
                let sub = self.submission.take().expect("submitted once");
                let out =
                    self.foreman
                        .apply(now, Peer::Client(CLIENT), Message::SubmitPipelineJob(sub));
                self.route(now, out);
            }
            Event::ToWorker(w, msg) => {
                if !self.workers[&w].alive {
                    return;
                }
                self.record(now, &w, Direction::ToWorker, &msg);
                let stage = match &msg {
                    Message::TaskAssign(a) => Some(a.stage_index),
                    _ => None,
                };
                let spec = self
                    .cfg
                    .workers
                    .iter()
                    .find(|s| s.id == w)
                    .expect("configured worker");
                let sw = self.workers.get_mut(&w).unwrap();
                let Some(reply) = sw.agent.handle(msg) else {
                    return;
                };
                let delay = match &reply {
                    Message::TaskResult(_) | Message::TaskFailed { .. } => {
                        sw.tasks += 1;
                        spec.compute_for(stage.expect("reply to an assignment"))
                    }
                    Message::ModelLoaded(ack) => {
                        sw.loads += 1;
                        let fp = self.footprints.get(&ack.artefact_id).copied().unwrap_or(0);
                        sw.footprints_loaded = sw.footprints_loaded.max(fp);
                        match ack.source {
                            LoadOrigin::Network => spec.cold_load_ms,
                            LoadOrigin::DiskCache => spec.warm_load_ms,
                            LoadOrigin::Resident => 0,
                        }
                    }
                    _ => 0,
                };
                self.push(now + delay, Event::ToForeman(w, reply));
            }
            Event::ToForeman(w, msg) => {
                if !self.workers[&w].alive {
                    return;
                }
                self.record(now, &w, Direction::ToForeman, &msg);
                let out = self.foreman.apply(now, Peer::Worker(w), msg);
                self.route(now, out);
            }
            Event::Heartbeat(w) => {
                if !self.workers[&w].alive {
                    return;
                }
                let hb = self.workers.get_mut(&w).unwrap().agent.emit_heartbeat(now);
                self.record(now, &w, Direction::ToForeman, &hb);
                let out = self.foreman.apply(now, Peer::Worker(w.clone()), hb);
                self.route(now, out);
                self.push(now + self.cfg.heartbeat_interval_ms, Event::Heartbeat(w));
            }
            Event::Tick => {
                let out = self.foreman.tick(now);
                self.route(now, out);
                self.push(now + self.cfg.heartbeat_interval_ms, Event::Tick);
            }
            Event::Kill(w) => {
                self.workers.get_mut(&w).unwrap().alive = false;
            }
        }
    }

    fn run(&mut self) -> Result<u64, SimError> {
        while let Some((&(now, _), _)) = self.queue.first_key_value() {
            if now > self.cfg.horizon_ms {
                return Err(SimError::Stalled(self.cfg.horizon_ms));
            }
            while self
                .queue
                .first_key_value()
                .is_some_and(|(&(t, _), _)| t == now)
            {
                let batch: Vec<Event> = {
                    let later = self.queue.split_off(&(now + 1, 0));
                    let current = std::mem::replace(&mut self.queue, later);
                    current.into_values().collect()
                };
                for ev in batch {
                    self.process(now, ev);
                    self.stamp_events();
                    if let Some(done) = self.outcome.take() {
                        return done;
                    }
                }
                let out = self.foreman.schedule(now);
                self.stamp_events();
                self.rounds += 1;
                self.round_times.push(now);
                self.route(now, out);
            }
        }
        Err(SimError::Stalled(self.cfg.horizon_ms))
    }
}

/// Runs one job in `mode` on a fresh fleet.
pub fn run_mode(cfg: &FleetConfig, mode: ExecutionMode) -> Result<RunOutcome, SimError> {
    cfg.validate()?;
    let tmp = tempfile::tempdir().map_err(|e| SimError::Io(e.to_string()))?;
    let store =
        PayloadStore::open(tmp.path().join("store")).map_err(|e| SimError::Io(e.to_string()))?;
    let blobs = cfg.stage_blobs();
    let spec = cfg.pipeline(mode, &blobs);
    let footprints = spec
        .stages
        .iter()
        .map(|m| (m.artefact_id.clone(), m.memory_footprint_bytes))
        .collect();

    let foreman = Foreman::new(
        ForemanConfig {
            tau_ws: cfg.tau_ws,
            strategy: cfg.strategy,
            heartbeat_interval_ms: cfg.heartbeat_interval_ms,
            staleness_multiplier: cfg.staleness_multiplier,
        },
        store.clone(),
    );
    let submission = SubmitPipelineJob {
        blobs: blobs.iter().map(|b| BASE64.encode(b)).collect(),
        inputs: cfg
            .inputs()
            .iter()
            .map(|t| encode_payload(t, cfg.codec))
            .collect(),
        spec: spec.clone(),
    };
    let mut sim = Sim {
        cfg,
        queue: BTreeMap::new(),
        seq: 0,
        foreman,
        workers: BTreeMap::new(),
        footprints,
        trace: Vec::new(),
        rounds: 0,
        round_times: Vec::new(),
        event_rounds: Vec::new(),
        outcome: None,
        submission: Some(submission),
    };

    for ws in &cfg.workers {
        let mut wc = WorkerConfig::new(ws.id.clone(), tmp.path().join("cache").join(&ws.id));
        wc.tau_ws = cfg.tau_ws;
        wc.codec = cfg.codec;
        wc.gpu_available = ws.gpu_available;
        wc.simulate_load = Some(SimulatedLoad {
            cold_ms: ws.cold_load_ms,
            warm_ms: ws.warm_load_ms,
        });
        wc.telemetry_profile = ws.telemetry.clone();
        let mut agent = WorkerAgent::new(wc, Box::new(AffineExecutor), store.clone())
            .map_err(|e| SimError::Io(e.to_string()))?;
        let mut footprint = 0;
        for &k in &ws.preload_cached {
            agent
                .preload_cache(&cfg.artefact_id(k), &blobs[k])
                .map_err(|e| SimError::Io(e.to_string()))?;
        }
        if let Some(k) = ws.preload_resident {
            let m = &spec.stages[k];
            agent
                .handle_load_model(&LoadModel {
                    artefact_id: m.artefact_id.clone(),
                    source: LoadSource::Blob(BASE64.encode(&blobs[k])),
                    checksum: m.blob_checksum.clone(),
                    memory_footprint_bytes: m.memory_footprint_bytes,
                })
                .map_err(|e| SimError::Io(e.to_string()))?;
            footprint = m.memory_footprint_bytes;
        }
        let reg = agent.register();
        sim.foreman.apply(0, Peer::Worker(ws.id.clone()), reg);
        let hb = agent.emit_heartbeat(0);
        sim.foreman.apply(0, Peer::Worker(ws.id.clone()), hb);
        sim.workers.insert(
            ws.id.clone(),
            SimWorker {
                agent,
                alive: true,
                footprints_loaded: footprint,
                tasks: 0,
                loads: 0,
            },
        );
    }

    sim.push(0, Event::Submit);
    for ws in &cfg.workers {
        sim.push(cfg.heartbeat_interval_ms, Event::Heartbeat(ws.id.clone()));
    }
    sim.push(cfg.heartbeat_interval_ms, Event::Tick);
    for f in &cfg.failures {
        sim.push(f.at_ms, Event::Kill(f.worker_id.clone()));
    }

    let makespan_ms = sim.run()?;
    let job = sim.foreman.job(1).expect("job was accepted");
    debug_assert_eq!(job.status, JobStatus::Complete);

    let mut sink_outputs = Vec::new();
    for routed in job.graph.sink_outputs() {
        let env = resolve_payload(routed.expect("job complete"), &store)
            .map_err(|e| SimError::Io(e.to_string()))?;
        sink_outputs.push(decode_payload(&env).map_err(|e| SimError::Io(e.to_string()))?);
    }
    let result = job.result.clone().expect("job complete");
    let metrics = job.metrics.clone().expect("job complete");

    let workers = cfg
        .workers
        .iter()
        .map(|ws| {
            let sw = &sim.workers[&ws.id];
            WorkerReport {
                worker_id: ws.id.clone(),
                peak_rss_bytes: sw.agent.peak_rss_bytes(),
                max_shard_footprint_bytes: sw.footprints_loaded,
                tasks: sw.tasks,
                loads: sw.loads,
            }
        })
        .collect();
    let report = ModeReport {
        mode,
        makespan_ms,
        workers,
        tier_hits: metrics.tier_hits,
        total_loads: metrics.tier_hits.iter().sum(),
        compression: metrics.compression,
        stage_latency: job
            .stage_latency_ms
            .iter()
            .enumerate()
            .map(|(k, l)| LatencySummary::from_samples(k, l))
            .collect(),
        recovery_events: job.recovery_events.clone(),
        mean_logits: result.mean_logits,
        predicted_class: result.predicted_class,
    };
    Ok(RunOutcome {
        report,
        sink_outputs,
        trace: sim.trace,
        foreman_events: sim.foreman.events().to_vec(),
        event_rounds: {
            let mut r = sim.event_rounds;
            r.resize(sim.foreman.events().len(), sim.rounds);
            r
        },
        round_times: sim.round_times,
    })
}
