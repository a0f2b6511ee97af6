//! Worker agent: holds at most one partition in memory, keeps transferred
//! partitions on disk, runs tasks for the resident partition and reports
//! telemetry. Like the foreman it is a plain state machine; transports and the
//! simulation harness feed it messages.

mod cache;
mod executor;

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use log::{debug, warn};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ArtefactId, JobId, TelemetrySnapshot, WorkerId};
use crate::protocol::{
    Capabilities, Heartbeat, LoadModel, LoadOrigin, LoadSource, Message, ModelLoaded, TaskAssign,
    TaskResult,
};
use crate::transport::{
    decode_payload, encode_payload, resolve_payload, route_payload, sha256_hex, Codec,
    PayloadStore, TransportError, DEFAULT_TAU_WS,
};

pub use cache::{DiskCache, SessionCache};
pub use executor::{
    Activation, AffineArtefact, AffineExecutor, ExecutorError, IdentityExecutor, SplitMix64,
    StageExecutor, StageSession,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WorkerError {
    #[error("`{active}` is resident; refusing to load `{requested}` without an unload")]
    ResidencyViolation {
        active: ArtefactId,
        requested: ArtefactId,
    },
    #[error("checksum mismatch for `{0}`")]
    ChecksumMismatch(ArtefactId),
    #[error("`{0}` is not resident")]
    NotResident(ArtefactId),
    #[error("task needs `{requested}` but {active:?} is resident")]
    PartitionNotResident {
        requested: ArtefactId,
        active: Option<ArtefactId>,
    },
    #[error("`{0}` is not in the disk cache")]
    CacheMiss(ArtefactId),
    #[error("blob is not valid base64")]
    BadBlob,
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error("io: {0}")]
    Io(String),
}

/// Fixed load durations reported instead of measured ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimulatedLoad {
    pub cold_ms: u64,
    pub warm_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerConfig {
    pub worker_id: WorkerId,
    pub cache_dir: PathBuf,
    pub tau_ws: u64,
    pub codec: Codec,
    pub gpu_available: bool,
    /// Disk cache byte budget enforced between jobs; `None` keeps everything.
    pub cache_budget_bytes: Option<u64>,
    pub simulate_load: Option<SimulatedLoad>,
    /// Telemetry rows reported in turn, cycling. Empty means defaults.
    pub telemetry_profile: Vec<TelemetrySnapshot>,
}

impl WorkerConfig {
    pub fn new(worker_id: impl Into<WorkerId>, cache_dir: impl Into<PathBuf>) -> Self {
        WorkerConfig {
            worker_id: worker_id.into(),
            cache_dir: cache_dir.into(),
            tau_ws: DEFAULT_TAU_WS,
            codec: Codec::Zlib,
            gpu_available: false,
            cache_budget_bytes: None,
            simulate_load: None,
            telemetry_profile: Vec::new(),
        }
    }
}

pub struct WorkerAgent {
    config: WorkerConfig,
    executor: Box<dyn StageExecutor>,
    store: PayloadStore,
    sessions: SessionCache,
    disk: DiskCache,
    peak_rss_bytes: u64,
    heartbeats: usize,
    current_job: Option<JobId>,
}

impl WorkerAgent {
    pub fn new(
        config: WorkerConfig,
        executor: Box<dyn StageExecutor>,
        store: PayloadStore,
    ) -> Result<Self, WorkerError> {
        let disk = DiskCache::open(&config.cache_dir, config.cache_budget_bytes)?;
        Ok(WorkerAgent {
            config,
            executor,
            store,
            sessions: SessionCache::default(),
            disk,
            peak_rss_bytes: 0,
            heartbeats: 0,
            current_job: None,
        })
    }

    pub fn id(&self) -> &str {
        &self.config.worker_id
    }

    pub fn config(&self) -> &WorkerConfig {
        &self.config
    }

    pub fn resident(&self) -> Option<&str> {
        self.sessions.active()
    }

    pub fn tracked_rss_bytes(&self) -> u64 {
        self.sessions.tracked_rss_bytes()
    }

    pub fn peak_rss_bytes(&self) -> u64 {
        self.peak_rss_bytes
    }

    pub fn disk_cache(&self) -> &DiskCache {
        &self.disk
    }

    pub fn register(&self) -> Message {
        Message::WorkerRegister {
            worker_id: self.config.worker_id.clone(),
            capabilities: Capabilities {
                gpu_available: self.config.gpu_available,
            },
        }
    }

    /// Handles one foreman instruction and returns the reply, if any.
    pub fn handle(&mut self, msg: Message) -> Option<Message> {
        match msg {
            Message::LoadModel(load) => Some(match self.handle_load_model(&load) {
                Ok(ack) => Message::ModelLoaded(ack),
                Err(e) => {
                    warn!(
                        "{}: load of {} failed: {e}",
                        self.config.worker_id, load.artefact_id
                    );
                    Message::ModelLoadFailed {
                        artefact_id: load.artefact_id,
                        reason: e.to_string(),
                    }
                }
            }),
            Message::UnloadModel { artefact_id } => match self.handle_unload_model(&artefact_id) {
                Ok(()) => Some(Message::ModelUnloaded { artefact_id }),
                Err(e) => {
                    warn!("{}: {e}", self.config.worker_id);
                    None
                }
            },
            Message::TaskAssign(task) => Some(match self.execute_task(&task) {
                Ok(res) => Message::TaskResult(res),
                Err(e) => Message::TaskFailed {
                    job_id: task.job_id,
                    task_id: task.task_id,
                    reason: e.to_string(),
                },
            }),
            other => {
                debug!("{}: ignoring {}", self.config.worker_id, other.kind());
                None
            }
        }
    }

    /// Places a partition file in the disk cache without loading it.
    pub fn preload_cache(&mut self, artefact: &str, blob: &[u8]) -> Result<(), WorkerError> {
        self.disk.put(artefact, &sha256_hex(blob), blob)
    }

    pub fn handle_load_model(&mut self, load: &LoadModel) -> Result<ModelLoaded, WorkerError> {
        let started = Instant::now();
        if self.sessions.active() == Some(load.artefact_id.as_str()) {
            return Ok(self.ack(load, LoadOrigin::Resident, 0));
        }
        if let Some(active) = self.sessions.active() {
            return Err(WorkerError::ResidencyViolation {
                active: active.to_string(),
                requested: load.artefact_id.clone(),
            });
        }
        let (blob, origin) = match &load.source {
            LoadSource::Blob(b64) => {
                let blob = BASE64.decode(b64).map_err(|_| WorkerError::BadBlob)?;
                if sha256_hex(&blob) != load.checksum {
                    return Err(WorkerError::ChecksumMismatch(load.artefact_id.clone()));
                }
                self.disk.put(&load.artefact_id, &load.checksum, &blob)?;
                (blob, LoadOrigin::Network)
            }
            LoadSource::CacheRef(id) => (self.disk.get(id, &load.checksum)?, LoadOrigin::DiskCache),
        };
        let session = self.executor.open(&blob)?;
        self.sessions.activate(
            load.artefact_id.clone(),
            load.memory_footprint_bytes,
            session,
        )?;
        self.peak_rss_bytes = self.peak_rss_bytes.max(self.sessions.tracked_rss_bytes());
        let measured = started.elapsed().as_millis() as u64;
        let duration = match (self.config.simulate_load, origin) {
            (Some(s), LoadOrigin::Network) => s.cold_ms,
            (Some(s), _) => s.warm_ms,
            (None, _) => measured,
        };
        Ok(self.ack(load, origin, duration))
    }

    fn ack(&self, load: &LoadModel, source: LoadOrigin, load_duration_ms: u64) -> ModelLoaded {
        ModelLoaded {
            artefact_id: load.artefact_id.clone(),
            source,
            load_duration_ms,
            tracked_rss_bytes: self.sessions.tracked_rss_bytes(),
        }
    }

    /// Releases the session; the disk copy stays.
    pub fn handle_unload_model(&mut self, artefact: &str) -> Result<(), WorkerError> {
        self.sessions.release(artefact)
    }

    pub fn execute_task(&mut self, task: &TaskAssign) -> Result<TaskResult, WorkerError> {
        if self.current_job != Some(task.job_id) {
            // Job boundary: the only point at which the disk budget is enforced.
            self.current_job = Some(task.job_id);
            let pinned: BTreeSet<&str> = self.sessions.active().into_iter().collect();
            let evicted = self.disk.evict_to_budget(&pinned)?;
            if !evicted.is_empty() {
                debug!("{}: evicted {evicted:?}", self.config.worker_id);
            }
        }
        let session = self.sessions.session_for(&task.artefact_id)?;
        let input = decode_payload(&resolve_payload(&task.input, &self.store)?)?;
        let output = session.run(&input)?;
        let envelope = encode_payload(&output, self.config.codec);
        let compressed_bytes = envelope.payload_len()? as u64;
        let raw_bytes = output.bytes().len() as u64;
        let output = route_payload(envelope, self.config.tau_ws, &self.store)?;
        Ok(TaskResult {
            job_id: task.job_id,
            task_id: task.task_id,
            output,
            raw_bytes,
            compressed_bytes,
        })
    }

    pub fn emit_heartbeat(&mut self, now_ms: u64) -> Message {
        let profile = &self.config.telemetry_profile;
        let mut telemetry = if profile.is_empty() {
            TelemetrySnapshot::default()
        } else {
            profile[self.heartbeats % profile.len()].clone()
        };
        telemetry.timestamp = now_ms;
        self.heartbeats += 1;
        Message::Heartbeat(Heartbeat {
            telemetry,
            resident: self.sessions.active().map(str::to_string),
            cached: self.disk.artefacts().cloned().collect(),
        })
    }
}
