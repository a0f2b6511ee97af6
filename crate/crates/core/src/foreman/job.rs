use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::graph::TaskGraph;
use crate::model::{ArtefactId, JobId, PartitionManifest, TaskId, ValidatedPipeline, WorkerId};
use crate::protocol::{CompressionStats, JobMetrics};
use crate::PredictionF64;

use super::Peer;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobStatus {
    Running,
    Complete,
    Failed,
}

/// A downstream load held back until its stage is first needed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoadInstruction {
    pub artefact_id: ArtefactId,
    pub checksum: String,
    pub memory_footprint_bytes: u64,
}

impl LoadInstruction {
    pub fn from_manifest(m: &PartitionManifest) -> Self {
        LoadInstruction {
            artefact_id: m.artefact_id.clone(),
            checksum: m.blob_checksum.clone(),
            memory_footprint_bytes: m.memory_footprint_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecoveryEvent {
    pub at_ms: u64,
    pub lost_worker: WorkerId,
    pub task: TaskId,
    /// Survivor chosen to reload the partition, if one was needed.
    pub reload_on: Option<WorkerId>,
}

#[derive(Debug)]
pub struct JobRecord {
    pub job_id: JobId,
    pub client: Peer,
    pub pipeline: ValidatedPipeline,
    pub graph: TaskGraph,
    pub(crate) blobs: Vec<Vec<u8>>,
    pub pending_load_instructions: BTreeMap<usize, LoadInstruction>,
    pub jit_dispatched: BTreeSet<usize>,
    pub status: JobStatus,
    pub created_ms: u64,
    pub finished_ms: Option<u64>,
    pub result: Option<PredictionF64>,
    pub metrics: Option<JobMetrics>,
    /// Index 0 counts tier-1 plans.
    pub tier_hits: [u64; 4],
    pub compression: CompressionStats,
    pub(crate) ratio_sum: f64,
    pub(crate) dispatched_at: BTreeMap<TaskId, u64>,
    /// Dispatch-to-result latencies per stage.
    pub stage_latency_ms: Vec<Vec<u64>>,
    pub recovery_events: Vec<RecoveryEvent>,
}

impl JobRecord {
    pub(crate) fn new(
        job_id: JobId,
        client: Peer,
        pipeline: ValidatedPipeline,
        graph: TaskGraph,
        blobs: Vec<Vec<u8>>,
        pending_load_instructions: BTreeMap<usize, LoadInstruction>,
        now: u64,
    ) -> Self {
        let stages = graph.stage_count();
        JobRecord {
            job_id,
            client,
            pipeline,
            graph,
            blobs,
            pending_load_instructions,
            jit_dispatched: BTreeSet::new(),
            status: JobStatus::Running,
            created_ms: now,
            finished_ms: None,
            result: None,
            metrics: None,
            tier_hits: [0; 4],
            compression: CompressionStats::default(),
            ratio_sum: 0.0,
            dispatched_at: BTreeMap::new(),
            stage_latency_ms: vec![Vec::new(); stages],
            recovery_events: Vec::new(),
        }
    }

    pub fn artefact(&self, stage: usize) -> &str {
        &self.pipeline.spec().stages[stage].artefact_id
    }
}
