//! The foreman as a sans-IO state machine.
//!
//! Callers feed it inbound messages with [`Foreman::apply`], then run a
//! scheduling round with [`Foreman::schedule`]. Both return the messages to
//! send. [`Foreman::handle`] does the two in one step. Keeping event
//! application apart from scheduling lets a driver apply every event that
//! arrived at one instant before deciding anything, which makes rounds
//! independent of arrival order within that instant.

mod job;
mod recovery;
mod registry;

use std::collections::{BTreeMap, BTreeSet};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use log::{debug, info, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{aggregate_results, AggregateError};
use crate::graph::{materialize_tasks, GraphError};
use crate::model::{
    validate_pipeline_spec, ArtefactId, JobId, Rejection, TaskId, TelemetrySnapshot,
    WorkerDescriptor, WorkerId,
};
use crate::protocol::{
    Capabilities, CompressionStats, Heartbeat, JobMetrics, JobResult, LoadModel, LoadSource,
    Message, ModelLoaded, SubmitPipelineJob, TaskAssign, TaskResult,
};
use crate::scheduler::{
    select_load_target, two_phase_assign, AssignPhase, LoadPlan, PendingTask, RankingStrategy,
    ResidencyTier,
};
use crate::transport::{
    compression_ratio, decode_payload, resolve_payload, route_payload, sha256_hex, PayloadStore,
    TransportError, DEFAULT_TAU_WS,
};

pub use job::{JobRecord, JobStatus, LoadInstruction, RecoveryEvent};
pub use recovery::{best_survivor, recovery_scores, success_rate, Survivor};
use registry::{PendingLoad, Registry, WorkerEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForemanConfig {
    pub tau_ws: u64,
    pub strategy: RankingStrategy,
    pub heartbeat_interval_ms: u64,
    /// Missed heartbeat intervals before a worker is declared gone.
    pub staleness_multiplier: u32,
}

impl Default for ForemanConfig {
    fn default() -> Self {
        ForemanConfig {
            tau_ws: DEFAULT_TAU_WS,
            strategy: RankingStrategy::EntropyWeightedSum,
            heartbeat_interval_ms: 30_000,
            staleness_multiplier: 3,
        }
    }
}

impl ForemanConfig {
    pub fn staleness_ms(&self) -> u64 {
        self.heartbeat_interval_ms * self.staleness_multiplier as u64
    }
}

/// A connection endpoint as the foreman sees it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Peer {
    Worker(WorkerId),
    Client(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Outbound {
    pub to: Peer,
    pub msg: Message,
}

impl Outbound {
    fn worker(id: &str, msg: Message) -> Self {
        Outbound {
            to: Peer::Worker(id.to_string()),
            msg,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadReason {
    /// Stage-0 broadcast at job creation.
    Broadcast,
    /// First load of a downstream stage after its first upstream completion.
    Jit,
    /// Pending or expected work with no worker holding the partition.
    Deferred,
    /// Replacement after a worker dropped out.
    Recovery,
}

/// Instrumentation trail of scheduling decisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum ForemanEvent {
    JobCreated {
        job: JobId,
        at_ms: u64,
    },
    LoadPlanned {
        job: JobId,
        stage: usize,
        plan: LoadPlan,
        reason: LoadReason,
        at_ms: u64,
    },
    JitTriggered {
        job: JobId,
        stage: usize,
        at_ms: u64,
    },
    TaskDispatched {
        job: JobId,
        task: TaskId,
        worker: WorkerId,
        phase: AssignPhase,
        at_ms: u64,
    },
    TaskCompleted {
        job: JobId,
        task: TaskId,
        worker: WorkerId,
        at_ms: u64,
    },
    WorkerLost {
        worker: WorkerId,
        affected: Vec<(JobId, TaskId)>,
        at_ms: u64,
    },
    JobFinished {
        job: JobId,
        status: JobStatus,
        at_ms: u64,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ForemanError {
    #[error(transparent)]
    Validation(#[from] Rejection),
    #[error("stage {stage}: blob checksum mismatch")]
    ChecksumMismatch { stage: usize },
    #[error("expected {expected} stage blobs, got {actual}")]
    BlobCount { expected: usize, actual: usize },
    #[error("input {index}: {reason}")]
    InputMismatch { index: usize, reason: String },
    #[error("unknown job {0}")]
    UnknownJob(JobId),
    #[error("unknown worker `{0}`")]
    UnknownWorker(WorkerId),
    #[error("task {task} is not owned by `{worker}`")]
    WrongWorker { task: TaskId, worker: WorkerId },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Aggregate(#[from] AggregateError),
}

pub struct Foreman {
    config: ForemanConfig,
    store: PayloadStore,
    registry: Registry,
    jobs: BTreeMap<JobId, JobRecord>,
    next_job: JobId,
    events: Vec<ForemanEvent>,
}

impl Foreman {
    pub fn new(config: ForemanConfig, store: PayloadStore) -> Self {
        Foreman {
            config,
            store,
            registry: Registry::default(),
            jobs: BTreeMap::new(),
            next_job: 1,
            events: Vec::new(),
        }
    }

    pub fn config(&self) -> &ForemanConfig {
        &self.config
    }

    pub fn store(&self) -> &PayloadStore {
        &self.store
    }

    pub fn job(&self, id: JobId) -> Option<&JobRecord> {
        self.jobs.get(&id)
    }

    pub fn jobs(&self) -> impl Iterator<Item = &JobRecord> {
        self.jobs.values()
    }

    pub fn events(&self) -> &[ForemanEvent] {
        &self.events
    }

    pub fn worker(&self, id: &str) -> Option<&WorkerDescriptor> {
        self.registry.get(id).map(|e| &e.desc)
    }

    pub fn workers(&self) -> impl Iterator<Item = &WorkerDescriptor> {
        self.registry.iter().map(|e| &e.desc)
    }

    /// Task the worker is currently executing, if any.
    pub fn worker_task(&self, id: &str) -> Option<(JobId, TaskId)> {
        self.registry.get(id).and_then(|e| e.busy)
    }

    /// Applies an event and runs a scheduling round.
    pub fn handle(&mut self, now: u64, from: Peer, msg: Message) -> Vec<Outbound> {
        let mut out = self.apply(now, from, msg);
        out.extend(self.schedule(now));
        out
    }

    /// Applies one inbound message without scheduling.
    pub fn apply(&mut self, now: u64, from: Peer, msg: Message) -> Vec<Outbound> {
        let mut out = Vec::new();
        match (from, msg) {
            (Peer::Client(c), Message::SubmitPipelineJob(sub)) => {
                match self.create_job(now, Peer::Client(c), sub) {
                    Ok((_, msgs)) => out.extend(msgs),
                    Err(e) => {
                        info!("job rejected: {e}");
                        out.push(Outbound {
                            to: Peer::Client(c),
                            msg: Message::JobRejected {
                                reason: e.to_string(),
                            },
                        });
                    }
                }
            }
            (
                Peer::Worker(w),
                Message::WorkerRegister {
                    worker_id,
                    capabilities,
                },
            ) => {
                if w != worker_id {
                    warn!("registration for `{worker_id}` arrived on connection of `{w}`");
                }
                // A worker that reconnects before its old connection timed out
                // loses whatever it was doing.
                if self
                    .registry
                    .get(&worker_id)
                    .is_some_and(|e| e.desc.connected)
                {
                    out.extend(self.on_worker_disconnect(now, &worker_id));
                }
                self.register_worker(now, worker_id, capabilities);
            }
            (Peer::Worker(w), Message::Heartbeat(hb)) => {
                if let Err(e) = self.on_heartbeat(now, &w, hb) {
                    warn!("{e}");
                }
            }
            (Peer::Worker(w), Message::ModelLoaded(ack)) => self.on_model_loaded(&w, ack),
            (Peer::Worker(w), Message::ModelUnloaded { artefact_id }) => {
                if let Some(e) = self.registry.get_mut(&w) {
                    if e.desc.resident_partition.as_deref() == Some(artefact_id.as_str()) {
                        e.desc.resident_partition = None;
                    }
                }
            }
            (
                Peer::Worker(w),
                Message::ModelLoadFailed {
                    artefact_id,
                    reason,
                },
            ) => {
                warn!("`{w}` failed to load {artefact_id}: {reason}");
                if let Some(e) = self.registry.get_mut(&w) {
                    e.pending_load = None;
                    e.desc.disk_cache.remove(&artefact_id);
                }
            }
            (Peer::Worker(w), Message::TaskResult(res)) => {
                match self.on_task_complete(now, &w, res) {
                    Ok(msgs) => out.extend(msgs),
                    Err(e) => warn!("dropping result from `{w}`: {e}"),
                }
            }
            (
                Peer::Worker(w),
                Message::TaskFailed {
                    job_id,
                    task_id,
                    reason,
                },
            ) => {
                warn!("`{w}` failed task {task_id} of job {job_id}: {reason}");
                if let Err(e) = self.on_task_failed(&w, job_id, task_id) {
                    warn!("{e}");
                }
            }
            (from, msg) => debug!("ignoring {} from {from:?}", msg.kind()),
        }
        out
    }

    pub fn register_worker(&mut self, now: u64, id: WorkerId, caps: Capabilities) {
        match self.registry.get_mut(&id) {
            Some(e) => {
                e.desc.connected = true;
                e.synced = false;
                e.busy = None;
                e.pending_load = None;
                e.last_seen_ms = now;
                e.gpu_available = caps.gpu_available;
            }
            None => self
                .registry
                .insert(WorkerEntry::new(id, caps.gpu_available, now)),
        }
    }

    pub fn on_heartbeat(
        &mut self,
        now: u64,
        worker: &str,
        hb: Heartbeat,
    ) -> Result<(), ForemanError> {
        let e = self
            .registry
            .get_mut(worker)
            .ok_or_else(|| ForemanError::UnknownWorker(worker.to_string()))?;
        e.desc.last_heartbeat = hb.telemetry;
        e.last_seen_ms = now;
        e.desc.disk_cache = hb.cached.into_iter().collect();
        if !e.desc.connected {
            info!("`{worker}` rejoined");
            e.desc.connected = true;
            e.synced = false;
        }
        if !e.synced {
            e.desc.resident_partition = hb.resident;
            if let Some(r) = &e.desc.resident_partition {
                e.desc.disk_cache.insert(r.clone());
            }
            e.synced = true;
        }
        Ok(())
    }

    fn on_model_loaded(&mut self, worker: &str, ack: ModelLoaded) {
        let Some(e) = self.registry.get_mut(worker) else {
            return;
        };
        if e.pending_load
            .as_ref()
            .is_some_and(|p| p.artefact == ack.artefact_id)
        {
            e.pending_load = None;
        }
        e.desc.set_resident(ack.artefact_id);
        e.peak_rss_bytes = e.peak_rss_bytes.max(ack.tracked_rss_bytes);
    }

    /// Validates a submission, materialises its graph and broadcasts stage 0.
    pub fn create_job(
        &mut self,
        now: u64,
        client: Peer,
        sub: SubmitPipelineJob,
    ) -> Result<(JobId, Vec<Outbound>), ForemanError> {
        let pipeline = validate_pipeline_spec(sub.spec)?;
        let spec = pipeline.spec();
        if sub.blobs.len() != spec.stage_count() {
            return Err(ForemanError::BlobCount {
                expected: spec.stage_count(),
                actual: sub.blobs.len(),
            });
        }
        let mut blobs = Vec::with_capacity(sub.blobs.len());
        for (stage, (b64, manifest)) in sub.blobs.iter().zip(&spec.stages).enumerate() {
            let bytes = BASE64
                .decode(b64)
                .map_err(|_| ForemanError::ChecksumMismatch { stage })?;
            if sha256_hex(&bytes) != manifest.blob_checksum {
                return Err(ForemanError::ChecksumMismatch { stage });
            }
            blobs.push(bytes);
        }
        if sub.inputs.len() != spec.input_count {
            return Err(ForemanError::InputMismatch {
                index: sub.inputs.len(),
                reason: format!("expected {} inputs", spec.input_count),
            });
        }
        let mut graph = materialize_tasks(&pipeline);
        for (index, env) in sub.inputs.into_iter().enumerate() {
            let tensor = decode_payload(&env).map_err(|e| ForemanError::InputMismatch {
                index,
                reason: e.to_string(),
            })?;
            if tensor.shape() != spec.stages[0].input_shape.as_slice() {
                return Err(ForemanError::InputMismatch {
                    index,
                    reason: format!(
                        "shape {:?} does not match stage-0 input {:?}",
                        tensor.shape(),
                        spec.stages[0].input_shape
                    ),
                });
            }
            let routed = route_payload(env, self.config.tau_ws, &self.store)?;
            graph.set_input(index, routed)?;
        }

        let job_id = self.next_job;
        self.next_job += 1;
        let pending_load_instructions = spec
            .stages
            .iter()
            .skip(1)
            .map(|m| (m.stage_index, LoadInstruction::from_manifest(m)))
            .collect();
        let pipeline_id = spec.pipeline_id.clone();
        let record = JobRecord::new(
            job_id,
            client.clone(),
            pipeline,
            graph,
            blobs,
            pending_load_instructions,
            now,
        );
        self.jobs.insert(job_id, record);
        self.events.push(ForemanEvent::JobCreated {
            job: job_id,
            at_ms: now,
        });
        info!("job {job_id} ({pipeline_id}) accepted");

        let mut out = vec![Outbound {
            to: client,
            msg: Message::JobAccepted {
                job_id,
                pipeline_id,
            },
        }];
        let stage0 = self.jobs[&job_id].artefact(0).to_string();
        let targets: Vec<WorkerDescriptor> = self
            .registry
            .iter()
            .filter(|e| e.available())
            .map(|e| e.desc.clone())
            .collect();
        for w in &targets {
            let plan = LoadPlan::for_worker(&stage0, w);
            self.emit_load(now, job_id, 0, plan, LoadReason::Broadcast, &mut out);
        }
        Ok((job_id, out))
    }

    fn emit_load(
        &mut self,
        now: u64,
        job_id: JobId,
        stage: usize,
        plan: LoadPlan,
        reason: LoadReason,
        out: &mut Vec<Outbound>,
    ) {
        let job = self.jobs.get_mut(&job_id).expect("job exists");
        job.tier_hits[plan.tier.number() as usize - 1] += 1;
        if reason == LoadReason::Jit {
            job.pending_load_instructions.remove(&stage);
        }
        self.events.push(ForemanEvent::LoadPlanned {
            job: job_id,
            stage,
            plan: plan.clone(),
            reason,
            at_ms: now,
        });
        if plan.is_noop() {
            return;
        }
        let manifest = &job.pipeline.spec().stages[stage];
        let source = if plan.tier == ResidencyTier::Cached {
            LoadSource::CacheRef(plan.load.clone())
        } else {
            LoadSource::Blob(BASE64.encode(&job.blobs[stage]))
        };
        let load = LoadModel {
            artefact_id: plan.load.clone(),
            source,
            checksum: manifest.blob_checksum.clone(),
            memory_footprint_bytes: manifest.memory_footprint_bytes,
        };
        if let Some(old) = &plan.unload_first {
            out.push(Outbound::worker(
                &plan.worker_id,
                Message::UnloadModel {
                    artefact_id: old.clone(),
                },
            ));
        }
        out.push(Outbound::worker(&plan.worker_id, Message::LoadModel(load)));
        let entry = self
            .registry
            .get_mut(&plan.worker_id)
            .expect("planned worker registered");
        entry.pending_load = Some(PendingLoad {
            artefact: plan.load,
            job: job_id,
            stage,
        });
    }

    pub fn on_task_complete(
        &mut self,
        now: u64,
        worker: &str,
        res: TaskResult,
    ) -> Result<Vec<Outbound>, ForemanError> {
        let job = self
            .jobs
            .get_mut(&res.job_id)
            .ok_or(ForemanError::UnknownJob(res.job_id))?;
        let task = job.graph.task(res.task_id)?;
        if task.assigned_worker.as_deref() != Some(worker) {
            return Err(ForemanError::WrongWorker {
                task: res.task_id,
                worker: worker.to_string(),
            });
        }
        let stage = task.stage_index;
        let shape = resolve_payload(&res.output, &self.store)?.shape;
        job.graph.complete_task(res.task_id, res.output, &shape)?;

        if let Some(dispatched) = job.dispatched_at.remove(&res.task_id) {
            job.stage_latency_ms[stage].push(now - dispatched);
        }
        if res.raw_bytes > 0 {
            job.compression.payloads += 1;
            job.compression.raw_bytes += res.raw_bytes;
            job.compression.compressed_bytes += res.compressed_bytes;
            job.ratio_sum += compression_ratio::<f64>(res.raw_bytes, res.compressed_bytes);
        }
        let first_at_stage = job.graph.completed_in_stage(stage) == 1;
        let next = stage + 1;
        let trigger_jit =
            first_at_stage && next < job.graph.stage_count() && job.jit_dispatched.insert(next);
        let finished = job.graph.is_complete();

        if let Some(e) = self.registry.get_mut(worker) {
            e.busy = None;
            e.desc.success_count += 1;
        }
        self.events.push(ForemanEvent::TaskCompleted {
            job: res.job_id,
            task: res.task_id,
            worker: worker.to_string(),
            at_ms: now,
        });
        if trigger_jit {
            self.events.push(ForemanEvent::JitTriggered {
                job: res.job_id,
                stage: next,
                at_ms: now,
            });
        }
        if finished {
            return self.finish_job(now, res.job_id);
        }
        Ok(Vec::new())
    }

    fn on_task_failed(
        &mut self,
        worker: &str,
        job_id: JobId,
        task_id: TaskId,
    ) -> Result<(), ForemanError> {
        let job = self
            .jobs
            .get_mut(&job_id)
            .ok_or(ForemanError::UnknownJob(job_id))?;
        if job.graph.task(task_id)?.assigned_worker.as_deref() != Some(worker) {
            return Err(ForemanError::WrongWorker {
                task: task_id,
                worker: worker.to_string(),
            });
        }
        job.graph.fail_task(task_id)?;
        job.dispatched_at.remove(&task_id);
        if let Some(e) = self.registry.get_mut(worker) {
            e.busy = None;
            e.desc.failure_count += 1;
        }
        Ok(())
    }

    fn finish_job(&mut self, now: u64, job_id: JobId) -> Result<Vec<Outbound>, ForemanError> {
        let job = self.jobs.get_mut(&job_id).expect("job exists");
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for routed in job.graph.sink_outputs() {
            let env = resolve_payload(
                routed.expect("complete graph has every sink output"),
                &self.store,
            )?;
            let t = decode_payload(&env)?;
            let width = *t.shape().last().unwrap();
            rows.extend(
                t.to_f32_vec()
                    .chunks(width)
                    .map(|c| c.iter().map(|&v| v as f64).collect()),
            );
        }
        let prediction = aggregate_results(&rows)?;
        job.status = JobStatus::Complete;
        job.finished_ms = Some(now);
        let mut compression = job.compression.clone();
        if compression.payloads > 0 {
            compression.mean_ratio_pct = job.ratio_sum / compression.payloads as f64;
        }
        let metrics = JobMetrics {
            makespan_ms: now - job.created_ms,
            peak_rss_bytes: self
                .registry
                .iter()
                .map(|e| (e.desc.worker_id.clone(), e.peak_rss_bytes))
                .collect(),
            compression,
            tier_hits: job.tier_hits,
        };
        let msg = Message::JobResult(JobResult {
            job_id,
            mean_logits: prediction.mean_logits.clone(),
            predicted_class: prediction.predicted_class,
            metrics: metrics.clone(),
        });
        job.result = Some(prediction);
        job.metrics = Some(metrics);
        self.events.push(ForemanEvent::JobFinished {
            job: job_id,
            status: JobStatus::Complete,
            at_ms: now,
        });
        info!("job {job_id} complete");
        Ok(vec![Outbound {
            to: job.client.clone(),
            msg,
        }])
    }

    /// Declares every worker silent for the staleness window disconnected.
    pub fn tick(&mut self, now: u64) -> Vec<Outbound> {
        let window = self.config.staleness_ms();
        let stale: Vec<WorkerId> = self
            .registry
            .iter()
            .filter(|e| e.desc.connected && now.saturating_sub(e.last_seen_ms) >= window)
            .map(|e| e.desc.worker_id.clone())
            .collect();
        let mut out = Vec::new();
        for w in stale {
            info!(
                "`{w}` missed {} heartbeats",
                self.config.staleness_multiplier
            );
            out.extend(self.on_worker_disconnect(now, &w));
        }
        out
    }

    /// Resets the worker's in-flight task and plans replacement loads.
    pub fn on_worker_disconnect(&mut self, now: u64, worker: &str) -> Vec<Outbound> {
        let mut out = Vec::new();
        let Some(e) = self.registry.get_mut(worker) else {
            return out;
        };
        if !e.desc.connected {
            return out;
        }
        e.desc.connected = false;
        e.synced = false;
        e.pending_load = None;
        e.desc.resident_partition = None;
        let busy = e.busy.take();

        let mut affected = Vec::new();
        if let Some((job_id, task_id)) = busy {
            e.desc.failure_count += 1;
            if let Some(job) = self.jobs.get_mut(&job_id) {
                if job.graph.fail_task(task_id).is_ok() {
                    job.dispatched_at.remove(&task_id);
                    affected.push((job_id, task_id));
                }
            }
        }
        self.events.push(ForemanEvent::WorkerLost {
            worker: worker.to_string(),
            affected: affected.clone(),
            at_ms: now,
        });

        if self.registry.connected() == 0 {
            let running: Vec<JobId> = self
                .jobs
                .values()
                .filter(|j| j.status == JobStatus::Running)
                .map(|j| j.job_id)
                .collect();
            for job_id in running {
                let job = self.jobs.get_mut(&job_id).unwrap();
                job.graph.abort();
                job.status = JobStatus::Failed;
                job.finished_ms = Some(now);
                self.events.push(ForemanEvent::JobFinished {
                    job: job_id,
                    status: JobStatus::Failed,
                    at_ms: now,
                });
                out.push(Outbound {
                    to: job.client.clone(),
                    msg: Message::JobFailed {
                        job_id,
                        reason: "no workers left".into(),
                    },
                });
            }
            return out;
        }

        for &(job_id, task_id) in &affected {
            let job = &self.jobs[&job_id];
            let stage = job
                .graph
                .task(task_id)
                .expect("affected task exists")
                .stage_index;
            let artefact = job.artefact(stage).to_string();
            let mut plan = None;
            if self.registry.holders(&artefact) == 0 {
                let survivors: Vec<Survivor<'_>> = self
                    .registry
                    .iter()
                    .filter(|e| e.available())
                    .map(|e| Survivor {
                        desc: &e.desc,
                        gpu_available: e.gpu_available,
                    })
                    .collect();
                if let Some(i) = best_survivor(&artefact, &survivors) {
                    let p = LoadPlan::for_worker(&artefact, survivors[i].desc);
                    plan = Some(p);
                }
            }
            let loaded_on = plan.as_ref().map(|p| p.worker_id.clone());
            if let Some(p) = plan {
                self.emit_load(now, job_id, stage, p, LoadReason::Recovery, &mut out);
            }
            self.jobs
                .get_mut(&job_id)
                .unwrap()
                .recovery_events
                .push(RecoveryEvent {
                    at_ms: now,
                    lost_worker: worker.to_string(),
                    task: task_id,
                    reload_on: loaded_on,
                });
        }
        out
    }

    /// One scheduling round: assign pending tasks to idle gated workers, then
    /// plan loads for stages that need a partition nobody holds.
    pub fn schedule(&mut self, now: u64) -> Vec<Outbound> {
        let mut out = Vec::new();
        let running: Vec<JobId> = self
            .jobs
            .values()
            .filter(|j| j.status == JobStatus::Running)
            .map(|j| j.job_id)
            .collect();
        for job_id in running {
            self.assign_round(now, job_id, &mut out);
            self.load_round(now, job_id, &mut out);
        }
        out
    }

    fn assign_round(&mut self, now: u64, job_id: JobId, out: &mut Vec<Outbound>) {
        let job = &self.jobs[&job_id];
        let pending: Vec<PendingTask> = job
            .graph
            .pending_tasks()
            .iter()
            .map(|t| PendingTask {
                task_id: t.task_id,
                artefact: job.artefact(t.stage_index).to_string(),
            })
            .collect();
        if pending.is_empty() {
            return;
        }
        let fleet: Vec<&WorkerDescriptor> = self
            .registry
            .iter()
            .filter(|e| e.available())
            .map(|e| &e.desc)
            .collect();
        let plan = two_phase_assign(&pending, &fleet, self.config.strategy);

        for (task_id, worker, phase) in plan.assignments {
            let job = self.jobs.get_mut(&job_id).unwrap();
            job.graph
                .dispatch(task_id, worker.clone())
                .expect("assigned task was pending");
            job.dispatched_at.insert(task_id, now);
            let task = job.graph.task(task_id).unwrap();
            let assign = TaskAssign {
                job_id,
                task_id,
                stage_index: task.stage_index,
                artefact_id: job.artefact(task.stage_index).to_string(),
                input: task
                    .input_payload
                    .clone()
                    .expect("pending task has its input"),
            };
            self.registry.get_mut(&worker).unwrap().busy = Some((job_id, task_id));
            self.events.push(ForemanEvent::TaskDispatched {
                job: job_id,
                task: task_id,
                worker: worker.clone(),
                phase,
                at_ms: now,
            });
            out.push(Outbound::worker(&worker, Message::TaskAssign(assign)));
        }
    }

    /// Artefacts that still have unfinished work in some running job.
    fn needed_artefacts(&self) -> BTreeSet<&str> {
        self.jobs
            .values()
            .filter(|j| j.status == JobStatus::Running)
            .flat_map(|j| {
                (0..j.graph.stage_count())
                    .filter(|&k| j.graph.unfinished_in_stage(k) > 0)
                    .map(move |k| j.artefact(k))
            })
            .collect()
    }

    fn load_round(&mut self, now: u64, job_id: JobId, out: &mut Vec<Outbound>) {
        let stages = self.jobs[&job_id].graph.stage_count();
        for stage in 0..stages {
            let job = &self.jobs[&job_id];
            let eligible = stage == 0 || job.jit_dispatched.contains(&stage);
            if !eligible || job.graph.unfinished_in_stage(stage) == 0 {
                continue;
            }
            let artefact = job.artefact(stage).to_string();
            if self.registry.holders(&artefact) > 0 {
                continue;
            }
            let reason = if job.pending_load_instructions.contains_key(&stage) {
                LoadReason::Jit
            } else {
                LoadReason::Deferred
            };

            // Keep the last copy of a partition that still has work. It may only
            // be given up for a stage with tasks ready to run; otherwise two
            // blocked stages would trade the same worker back and forth.
            let needed = self.needed_artefacts();
            let available: Vec<&WorkerEntry> =
                self.registry.iter().filter(|e| e.available()).collect();
            let unprotected: Vec<&WorkerDescriptor> = available
                .iter()
                .filter(|e| match &e.desc.resident_partition {
                    Some(r) => !(needed.contains(r.as_str()) && self.registry.holders(r) == 1),
                    None => true,
                })
                .map(|e| &e.desc)
                .collect();
            let candidates: Vec<&WorkerDescriptor> = if !unprotected.is_empty() {
                unprotected
            } else if job.graph.pending_in_stage(stage) > 0 {
                available.iter().map(|e| &e.desc).collect()
            } else {
                continue;
            };
            let Ok(plan) = select_load_target(&artefact, &candidates, self.config.strategy) else {
                continue;
            };
            self.emit_load(now, job_id, stage, plan, reason, out);
        }
    }

    /// Telemetry currently on record for a worker.
    pub fn telemetry(&self, id: &str) -> Option<&TelemetrySnapshot> {
        self.registry.get(id).map(|e| &e.desc.last_heartbeat)
    }

    /// Peak tracked RSS reported by each worker's load acknowledgements.
    pub fn peak_rss(&self) -> BTreeMap<WorkerId, u64> {
        self.registry
            .iter()
            .map(|e| (e.desc.worker_id.clone(), e.peak_rss_bytes))
            .collect()
    }

    /// Artefact a stage of a job runs.
    pub fn stage_artefact(&self, job: JobId, stage: usize) -> Option<ArtefactId> {
        self.jobs.get(&job).map(|j| j.artefact(stage).to_string())
    }

    pub fn compression_stats(&self, job: JobId) -> Option<CompressionStats> {
        self.jobs.get(&job).map(|j| j.compression.clone())
    }
}

#[cfg(test)]
mod tests;
