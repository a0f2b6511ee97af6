use serde::{Deserialize, Serialize};

use super::SimError;
use crate::model::{ExecutionMode, PartitionManifest, PipelineSpec, TelemetrySnapshot, WorkerId};
use crate::scheduler::RankingStrategy;
use crate::transport::{sha256_hex, Codec, Tensor, DEFAULT_TAU_WS};
use crate::worker::{Activation, AffineArtefact, SplitMix64};

/// One pipeline stage of the synthetic model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    /// Output features per input row.
    pub width: usize,
    pub footprint_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkerSpec {
    pub id: WorkerId,
    /// Compute delay per stage. A single entry applies to every stage.
    pub compute_ms: Vec<u64>,
    #[serde(default)]
    pub cold_load_ms: u64,
    #[serde(default)]
    pub warm_load_ms: u64,
    /// Reported in turn on each heartbeat.
    #[serde(default)]
    pub telemetry: Vec<TelemetrySnapshot>,
    #[serde(default)]
    pub gpu_available: bool,
    /// Stage whose partition is already in memory at start.
    #[serde(default)]
    pub preload_resident: Option<usize>,
    /// Stages whose partition files are already on disk at start.
    #[serde(default)]
    pub preload_cached: Vec<usize>,
}

impl WorkerSpec {
    pub fn compute_for(&self, stage: usize) -> u64 {
        if self.compute_ms.len() == 1 {
            self.compute_ms[0]
        } else {
            self.compute_ms[stage]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FailureSpec {
    pub worker_id: WorkerId,
    pub at_ms: u64,
}

fn default_input_count() -> usize {
    5
}
fn default_input_width() -> usize {
    8
}
fn default_tau() -> u64 {
    DEFAULT_TAU_WS
}
fn default_heartbeat() -> u64 {
    100
}
fn default_staleness() -> u32 {
    3
}
fn default_codec() -> Codec {
    Codec::Zlib
}
fn default_horizon() -> u64 {
    24 * 3600 * 1000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetConfig {
    #[serde(default = "default_input_count")]
    pub input_count: usize,
    #[serde(default = "default_input_width")]
    pub input_width: usize,
    pub stages: Vec<StageSpec>,
    pub workers: Vec<WorkerSpec>,
    #[serde(default = "default_tau")]
    pub tau_ws: u64,
    #[serde(default)]
    pub strategy: RankingStrategy,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_heartbeat")]
    pub heartbeat_interval_ms: u64,
    #[serde(default = "default_staleness")]
    pub staleness_multiplier: u32,
    #[serde(default = "default_codec")]
    pub codec: Codec,
    #[serde(default)]
    pub failures: Vec<FailureSpec>,
    /// Virtual time after which a run is abandoned.
    #[serde(default = "default_horizon")]
    pub horizon_ms: u64,
}

impl FleetConfig {
    /// A fleet with uniform delays and default everything else.
    pub fn uniform(workers: usize, stages: usize, inputs: usize, compute_ms: u64) -> Self {
        FleetConfig {
            input_count: inputs,
            input_width: default_input_width(),
            stages: (0..stages)
                .map(|k| StageSpec {
                    width: if k + 1 == stages { 2 } else { 16 },
                    footprint_bytes: 1_000_000 * (k as u64 + 1),
                })
                .collect(),
            workers: (0..workers)
                .map(|i| WorkerSpec {
                    id: format!("w{i}"),
                    compute_ms: vec![compute_ms],
                    cold_load_ms: 0,
                    warm_load_ms: 0,
                    telemetry: Vec::new(),
                    gpu_available: false,
                    preload_resident: None,
                    preload_cached: Vec::new(),
                })
                .collect(),
            tau_ws: default_tau(),
            strategy: RankingStrategy::default(),
            seed: 0,
            heartbeat_interval_ms: default_heartbeat(),
            staleness_multiplier: default_staleness(),
            codec: default_codec(),
            failures: Vec::new(),
            horizon_ms: default_horizon(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self, SimError> {
        let c: FleetConfig =
            serde_json::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_json(&self) -> String {
        crate::canonical::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let err = |m: String| Err(SimError::Config(m));
        let s = self.stages.len();
        if s == 0 {
            return err("at least one stage is required".into());
        }
        if self.input_count == 0 {
            return err("input_count must be positive".into());
        }
        if self.input_width == 0 || self.stages.iter().any(|st| st.width == 0) {
            return err("widths must be positive".into());
        }
        if self.workers.is_empty() {
            return err("at least one worker is required".into());
        }
        if self.heartbeat_interval_ms == 0 || self.staleness_multiplier == 0 {
            return err("heartbeat interval and staleness multiplier must be positive".into());
        }
        let mut ids = std::collections::BTreeSet::new();
        for w in &self.workers {
            if !ids.insert(&w.id) {
                return err(format!("duplicate worker `{}`", w.id));
            }
            if w.compute_ms.len() != 1 && w.compute_ms.len() != s {
                return err(format!(
                    "worker `{}`: compute_ms needs 1 or {s} entries",
                    w.id
                ));
            }
            if w.preload_resident.is_some_and(|k| k >= s)
                || w.preload_cached.iter().any(|&k| k >= s)
            {
                return err(format!(
                    "worker `{}`: preload refers to a missing stage",
                    w.id
                ));
            }
            for t in &w.telemetry {
                t.validate()
                    .map_err(|e| SimError::Config(format!("worker `{}`: {e}", w.id)))?;
            }
        }
        for f in &self.failures {
            if !ids.contains(&f.worker_id) {
                return err(format!("failure names unknown worker `{}`", f.worker_id));
            }
        }
        Ok(())
    }

    pub fn artefact_id(&self, stage: usize) -> String {
        format!("stage_{stage}")
    }

    pub fn stage_input_width(&self, stage: usize) -> usize {
        if stage == 0 {
            self.input_width
        } else {
            self.stages[stage - 1].width
        }
    }

    /// Affine artefact bytes for each stage.
    pub fn stage_blobs(&self) -> Vec<Vec<u8>> {
        let last = self.stages.len() - 1;
        (0..self.stages.len())
            .map(|k| {
                let act = if k == last {
                    Activation::None
                } else {
                    Activation::Tanh
                };
                let seed = self.seed.wrapping_mul(1_000_003).wrapping_add(k as u64 + 1);
                AffineArtefact::new(
                    seed,
                    &[1, self.stage_input_width(k)],
                    &[1, self.stages[k].width],
                    act,
                )
                .to_bytes()
            })
            .collect()
    }

    pub fn pipeline(&self, mode: ExecutionMode, blobs: &[Vec<u8>]) -> PipelineSpec {
        PipelineSpec {
            pipeline_id: "sim".into(),
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(k, st)| PartitionManifest {
                    stage_index: k,
                    artefact_id: self.artefact_id(k),
                    blob_checksum: sha256_hex(&blobs[k]),
                    blob_size_bytes: blobs[k].len() as u64,
                    memory_footprint_bytes: st.footprint_bytes,
                    input_shape: vec![1, self.stage_input_width(k)],
                    output_shape: vec![1, st.width],
                    eager_broadcast: k == 0,
                })
                .collect(),
            execution_mode: mode,
            input_count: self.input_count,
            edges: None,
        }
    }

    /// Seeded inputs in [-1, 1).
    pub fn inputs(&self) -> Vec<Tensor> {
        let mut rng = SplitMix64(self.seed ^ 0x005E_ED0F_1A9E);
        (0..self.input_count)
            .map(|_| {
                let v: Vec<f32> = (0..self.input_width).map(|_| rng.weight() * 10.0).collect();
                Tensor::from_f32(vec![1, self.input_width], &v).expect("shape matches")
            })
            .collect()
    }

    /// Telemetry never changes during a run.
    pub fn has_static_telemetry(&self) -> bool {
        self.workers.iter().all(|w| w.telemetry.len() <= 1)
    }
}
