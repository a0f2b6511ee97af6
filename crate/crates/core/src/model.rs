//! Domain types shared by every subsystem, plus the pipeline validation rules.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type WorkerId = String;
pub type ArtefactId = String;
pub type TaskId = usize;
pub type JobId = u64;

/// One ordered stage of a partitioned model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PartitionManifest {
    pub stage_index: usize,
    pub artefact_id: ArtefactId,
    /// Lowercase hex SHA-256 of the raw blob bytes.
    pub blob_checksum: String,
    pub blob_size_bytes: u64,
    /// Simulated resident-set cost while the shard is loaded.
    pub memory_footprint_bytes: u64,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    pub eager_broadcast: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutionMode {
    Streaming,
    Barrier,
}

impl fmt::Display for ExecutionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ExecutionMode::Streaming => f.write_str("streaming"),
            ExecutionMode::Barrier => f.write_str("barrier"),
        }
    }
}

impl std::str::FromStr for ExecutionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "streaming" => Ok(ExecutionMode::Streaming),
            "barrier" => Ok(ExecutionMode::Barrier),
            other => Err(format!("unknown execution mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub pipeline_id: String,
    pub stages: Vec<PartitionManifest>,
    pub execution_mode: ExecutionMode,
    pub input_count: usize,
    /// Explicit stage edges. When absent the linear chain is derived from stage order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub edges: Option<Vec<(usize, usize)>>,
}

impl PipelineSpec {
    pub fn stage_count(&self) -> usize {
        self.stages.len()
    }
}

/// Position of a stage in the linear chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageRole {
    Source,
    Intermediate,
    Sink,
    /// Single-stage pipeline: both source and sink.
    SourceSink,
}

impl StageRole {
    pub fn is_source(self) -> bool {
        matches!(self, StageRole::Source | StageRole::SourceSink)
    }

    pub fn is_sink(self) -> bool {
        matches!(self, StageRole::Sink | StageRole::SourceSink)
    }
}

/// A pipeline that passed [`validate_pipeline_spec`]. Stages are sorted by index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidatedPipeline {
    spec: PipelineSpec,
    roles: Vec<StageRole>,
}

impl ValidatedPipeline {
    pub fn spec(&self) -> &PipelineSpec {
        &self.spec
    }

    pub fn roles(&self) -> &[StageRole] {
        &self.roles
    }

    pub fn role(&self, stage: usize) -> StageRole {
        self.roles[stage]
    }

    pub fn into_spec(self) -> PipelineSpec {
        self.spec
    }

    /// Edges of the derived chain, `k -> k+1`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        (1..self.roles.len()).map(|k| (k - 1, k)).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ValidationError {
    #[error("pipeline has no stages")]
    EmptyPipeline,
    #[error("pipeline has zero inputs")]
    NoInputs,
    #[error("stage index {0} appears more than once")]
    DuplicateStageIndex(usize),
    #[error("stage indices are not contiguous from 0: missing {0}")]
    MissingStageIndex(usize),
    #[error("artefact `{0}` is used by more than one stage")]
    DuplicateArtefactId(ArtefactId),
    #[error(
        "stage {stage}: output shape {output:?} does not match next input shape {next_input:?}"
    )]
    ShapeMismatch {
        stage: usize,
        output: Vec<usize>,
        next_input: Vec<usize>,
    },
    #[error("stage {0}: shapes must be non-empty with positive dimensions")]
    InvalidShape(usize),
    #[error("stage {0}: eager_broadcast must be set exactly for stage 0")]
    EagerFlag(usize),
    #[error("stage {0}: blob checksum is not a 64-char lowercase hex digest")]
    MalformedChecksum(usize),
    #[error("stage {0}: blob size and memory footprint must be positive")]
    ZeroSize(usize),
    #[error("explicit topology contains a cycle")]
    CyclicTopology,
    #[error("explicit topology is not the linear stage chain")]
    NonLinearTopology,
}

/// Every invariant a rejected spec violated.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("pipeline rejected: {}", .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
pub struct Rejection(pub Vec<ValidationError>);

impl Rejection {
    pub fn contains(&self, err: &ValidationError) -> bool {
        self.0.contains(err)
    }
}

pub fn is_sha256_hex(s: &str) -> bool {
    s.len() == 64
        && s.bytes()
            .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b))
}

pub fn validate_pipeline_spec(spec: PipelineSpec) -> Result<ValidatedPipeline, Rejection> {
    let mut errors = Vec::new();
    if spec.stages.is_empty() {
        errors.push(ValidationError::EmptyPipeline);
    }
    if spec.input_count == 0 {
        errors.push(ValidationError::NoInputs);
    }

    let mut stages = spec.stages.clone();
    stages.sort_by_key(|s| s.stage_index);

    let mut seen = BTreeSet::new();
    for s in &stages {
        if !seen.insert(s.stage_index) {
            errors.push(ValidationError::DuplicateStageIndex(s.stage_index));
        }
    }
    if let Some(missing) = (0..stages.len()).find(|k| !seen.contains(k)) {
        if !stages.is_empty() {
            errors.push(ValidationError::MissingStageIndex(missing));
        }
    }

    let mut artefacts = BTreeSet::new();
    for s in &stages {
        if !artefacts.insert(s.artefact_id.clone()) {
            errors.push(ValidationError::DuplicateArtefactId(s.artefact_id.clone()));
        }
        let bad_shape = |shape: &[usize]| shape.is_empty() || shape.contains(&0);
        if bad_shape(&s.input_shape) || bad_shape(&s.output_shape) {
            errors.push(ValidationError::InvalidShape(s.stage_index));
        }
        if s.eager_broadcast != (s.stage_index == 0) {
            errors.push(ValidationError::EagerFlag(s.stage_index));
        }
        if !is_sha256_hex(&s.blob_checksum) {
            errors.push(ValidationError::MalformedChecksum(s.stage_index));
        }
        if s.blob_size_bytes == 0 || s.memory_footprint_bytes == 0 {
            errors.push(ValidationError::ZeroSize(s.stage_index));
        }
    }

    for pair in stages.windows(2) {
        if pair[0].output_shape != pair[1].input_shape {
            errors.push(ValidationError::ShapeMismatch {
                stage: pair[0].stage_index,
                output: pair[0].output_shape.clone(),
                next_input: pair[1].input_shape.clone(),
            });
        }
    }

    if let Some(edges) = &spec.edges {
        let n = stages.len();
        if has_cycle(n, edges) {
            errors.push(ValidationError::CyclicTopology);
        } else {
            let mut sorted = edges.clone();
            sorted.sort_unstable();
            sorted.dedup();
            let chain: Vec<_> = (1..n).map(|k| (k - 1, k)).collect();
            if sorted != chain {
                errors.push(ValidationError::NonLinearTopology);
            }
        }
    }

    if !errors.is_empty() {
        return Err(Rejection(errors));
    }

    let roles = stage_roles(stages.len());
    Ok(ValidatedPipeline {
        spec: PipelineSpec { stages, ..spec },
        roles,
    })
}

fn stage_roles(count: usize) -> Vec<StageRole> {
    (0..count)
        .map(|k| match (k == 0, k + 1 == count) {
            (true, true) => StageRole::SourceSink,
            (true, false) => StageRole::Source,
            (false, true) => StageRole::Sink,
            (false, false) => StageRole::Intermediate,
        })
        .collect()
}

/// Kahn's algorithm over stage nodes; edges referencing unknown nodes count as their own nodes.
fn has_cycle(nodes: usize, edges: &[(usize, usize)]) -> bool {
    let mut indegree: BTreeMap<usize, usize> = (0..nodes).map(|k| (k, 0)).collect();
    let mut out: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(a, b) in edges {
        indegree.entry(a).or_insert(0);
        *indegree.entry(b).or_insert(0) += 1;
        out.entry(a).or_default().push(b);
    }
    let mut ready: Vec<usize> = indegree
        .iter()
        .filter(|(_, d)| **d == 0)
        .map(|(k, _)| *k)
        .collect();
    let mut visited = 0;
    while let Some(n) = ready.pop() {
        visited += 1;
        for &m in out.get(&n).map(Vec::as_slice).unwrap_or(&[]) {
            let d = indegree.get_mut(&m).expect("edge target registered");
            *d -= 1;
            if *d == 0 {
                ready.push(m);
            }
        }
    }
    visited != indegree.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Blocked,
    Pending,
    Dispatched,
    Running,
    Complete,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_id: TaskId,
    pub stage_index: usize,
    pub input_index: usize,
    pub state: TaskState,
    pub deps_remaining: usize,
    pub dependency_ids: Vec<TaskId>,
    pub input_payload: Option<crate::transport::PayloadRouting>,
    pub assigned_worker: Option<WorkerId>,
    pub attempt_count: u32,
}

/// Heartbeat telemetry. Cost criteria: cpu_load, rtt_ms, temperature_c.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetrySnapshot {
    pub cpu_load: f64,
    pub ram_free_bytes: u64,
    pub battery_fraction: f64,
    pub rtt_ms: f64,
    pub temperature_c: f64,
    pub timestamp: u64,
}

impl Default for TelemetrySnapshot {
    fn default() -> Self {
        TelemetrySnapshot {
            cpu_load: 0.0,
            ram_free_bytes: 0,
            battery_fraction: 1.0,
            rtt_ms: 0.0,
            temperature_c: 25.0,
            timestamp: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid telemetry: {0}")]
pub struct TelemetryError(&'static str);

impl TelemetrySnapshot {
    pub fn validate(&self) -> Result<(), TelemetryError> {
        let finite = [
            self.cpu_load,
            self.battery_fraction,
            self.rtt_ms,
            self.temperature_c,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            return Err(TelemetryError("non-finite field"));
        }
        if !(0.0..=1.0).contains(&self.cpu_load) || !(0.0..=1.0).contains(&self.battery_fraction) {
            return Err(TelemetryError("fraction outside [0,1]"));
        }
        if self.rtt_ms < 0.0 {
            return Err(TelemetryError("negative rtt"));
        }
        Ok(())
    }
}

/// Registry view of one worker.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerDescriptor {
    pub worker_id: WorkerId,
    /// The single active session, if any.
    pub resident_partition: Option<ArtefactId>,
    pub disk_cache: BTreeSet<ArtefactId>,
    pub last_heartbeat: TelemetrySnapshot,
    pub connected: bool,
    pub success_count: u64,
    pub failure_count: u64,
}

impl WorkerDescriptor {
    pub fn new(worker_id: impl Into<WorkerId>) -> Self {
        WorkerDescriptor {
            worker_id: worker_id.into(),
            resident_partition: None,
            disk_cache: BTreeSet::new(),
            last_heartbeat: TelemetrySnapshot::default(),
            connected: true,
            success_count: 0,
            failure_count: 0,
        }
    }

    pub fn with_resident(mut self, artefact: impl Into<ArtefactId>) -> Self {
        let a = artefact.into();
        self.disk_cache.insert(a.clone());
        self.resident_partition = Some(a);
        self
    }

    pub fn with_cached(mut self, artefact: impl Into<ArtefactId>) -> Self {
        self.disk_cache.insert(artefact.into());
        self
    }

    pub fn with_telemetry(mut self, t: TelemetrySnapshot) -> Self {
        self.last_heartbeat = t;
        self
    }

    /// Record a confirmed load; keeps `resident ∈ disk_cache`.
    pub fn set_resident(&mut self, artefact: ArtefactId) {
        self.disk_cache.insert(artefact.clone());
        self.resident_partition = Some(artefact);
    }
}

#[cfg(test)]
pub(crate) mod fixtures {
    use super::*;

    pub fn checksum(tag: &str) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(tag.as_bytes()))
    }

    pub fn manifest(k: usize, input: &[usize], output: &[usize]) -> PartitionManifest {
        PartitionManifest {
            stage_index: k,
            artefact_id: format!("cell_{}", (b'a' + k as u8) as char),
            blob_checksum: checksum(&format!("cell{k}")),
            blob_size_bytes: 1024,
            memory_footprint_bytes: 1000 * (k as u64 + 1),
            input_shape: input.to_vec(),
            output_shape: output.to_vec(),
            eager_broadcast: k == 0,
        }
    }

    /// DistilBERT-shaped chain: [B,S] -> [B,S,H] -> [B,S,H] -> [B,2].
    pub fn distilbert_like(mode: ExecutionMode, n: usize) -> PipelineSpec {
        PipelineSpec {
            pipeline_id: "distilbert-sst2".into(),
            stages: vec![
                manifest(0, &[1, 8], &[1, 8, 16]),
                manifest(1, &[1, 8, 16], &[1, 8, 16]),
                manifest(2, &[1, 8, 16], &[1, 2]),
            ],
            execution_mode: mode,
            input_count: n,
            edges: None,
        }
    }
}
