//! Wire protocol. One canonical JSON object per frame, discriminated by `type`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::model::{ArtefactId, JobId, PipelineSpec, TaskId, TelemetrySnapshot, WorkerId};
use crate::transport::{PayloadEnvelope, PayloadRouting};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Message {
    SubmitPipelineJob(SubmitPipelineJob),
    JobAccepted {
        job_id: JobId,
        pipeline_id: String,
    },
    JobRejected {
        reason: String,
    },
    LoadModel(LoadModel),
    ModelLoaded(ModelLoaded),
    ModelLoadFailed {
        artefact_id: ArtefactId,
        reason: String,
    },
    UnloadModel {
        artefact_id: ArtefactId,
    },
    ModelUnloaded {
        artefact_id: ArtefactId,
    },
    TaskAssign(TaskAssign),
    TaskResult(TaskResult),
    TaskFailed {
        job_id: JobId,
        task_id: TaskId,
        reason: String,
    },
    Heartbeat(Heartbeat),
    WorkerRegister {
        worker_id: WorkerId,
        capabilities: Capabilities,
    },
    JobResult(JobResult),
    JobFailed {
        job_id: JobId,
        reason: String,
    },
}

impl Message {
    pub fn kind(&self) -> &'static str {
        match self {
            Message::SubmitPipelineJob(_) => "SUBMIT_PIPELINE_JOB",
            Message::JobAccepted { .. } => "JOB_ACCEPTED",
            Message::JobRejected { .. } => "JOB_REJECTED",
            Message::LoadModel(_) => "LOAD_MODEL",
            Message::ModelLoaded(_) => "MODEL_LOADED",
            Message::ModelLoadFailed { .. } => "MODEL_LOAD_FAILED",
            Message::UnloadModel { .. } => "UNLOAD_MODEL",
            Message::ModelUnloaded { .. } => "MODEL_UNLOADED",
            Message::TaskAssign(_) => "TASK_ASSIGN",
            Message::TaskResult(_) => "TASK_RESULT",
            Message::TaskFailed { .. } => "TASK_FAILED",
            Message::Heartbeat(_) => "HEARTBEAT",
            Message::WorkerRegister { .. } => "WORKER_REGISTER",
            Message::JobResult(_) => "JOB_RESULT",
            Message::JobFailed { .. } => "JOB_FAILED",
        }
    }

    /// Canonical frame text (no trailing newline).
    pub fn to_frame(&self) -> String {
        crate::canonical::to_string(self).expect("messages always serialize")
    }

    pub fn from_frame(frame: &str) -> serde_json::Result<Message> {
        serde_json::from_str(frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitPipelineJob {
    /// Manifests (with checksums) and execution mode.
    pub spec: PipelineSpec,
    /// Base64 stage blobs in stage order.
    pub blobs: Vec<String>,
    /// One envelope per input, in input order.
    pub inputs: Vec<PayloadEnvelope>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadSource {
    /// Base64 blob sent over the wire.
    Blob(String),
    /// Load from the worker's disk cache.
    CacheRef(ArtefactId),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadModel {
    pub artefact_id: ArtefactId,
    pub source: LoadSource,
    pub checksum: String,
    pub memory_footprint_bytes: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadOrigin {
    Network,
    DiskCache,
    /// Already the active session.
    Resident,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelLoaded {
    pub artefact_id: ArtefactId,
    pub source: LoadOrigin,
    pub load_duration_ms: u64,
    pub tracked_rss_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskAssign {
    pub job_id: JobId,
    pub task_id: TaskId,
    pub stage_index: usize,
    pub artefact_id: ArtefactId,
    pub input: PayloadRouting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub job_id: JobId,
    pub task_id: TaskId,
    pub output: PayloadRouting,
    /// Uncompressed activation size.
    pub raw_bytes: u64,
    /// Size of the encoded (compressed) activation bytes.
    pub compressed_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Heartbeat {
    pub telemetry: TelemetrySnapshot,
    pub resident: Option<ArtefactId>,
    pub cached: Vec<ArtefactId>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub gpu_available: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CompressionStats {
    pub payloads: u64,
    pub raw_bytes: u64,
    pub compressed_bytes: u64,
    /// Mean per-payload percentage saved.
    pub mean_ratio_pct: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct JobMetrics {
    pub makespan_ms: u64,
    pub peak_rss_bytes: BTreeMap<WorkerId, u64>,
    pub compression: CompressionStats,
    /// Load plans per residency tier, index 0 = tier 1.
    pub tier_hits: [u64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job_id: JobId,
    pub mean_logits: Vec<f64>,
    pub predicted_class: usize,
    pub metrics: JobMetrics,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn frames_carry_type_tag_and_round_trip() {
        let m = Message::UnloadModel {
            artefact_id: "cell_a".into(),
        };
        let f = m.to_frame();
        assert_eq!(f, r#"{"artefact_id":"cell_a","type":"UNLOAD_MODEL"}"#);
        assert_eq!(Message::from_frame(&f).unwrap(), m);
        assert_eq!(m.kind(), "UNLOAD_MODEL");
    }

    #[test]
    fn load_source_tagging() {
        let m = Message::LoadModel(LoadModel {
            artefact_id: "cell_b".into(),
            source: LoadSource::CacheRef("cell_b".into()),
            checksum: "00".into(),
            memory_footprint_bytes: 7,
        });
        let f = m.to_frame();
        assert!(f.contains(r#""source":{"cache_ref":"cell_b"}"#), "{f}");
        assert_eq!(Message::from_frame(&f).unwrap(), m);
    }
}
