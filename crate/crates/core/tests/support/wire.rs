//! Values whose canonical bytes are pinned under `tests/golden/`.

use std::collections::BTreeMap;
use std::path::PathBuf;

use shardflow::model::{ExecutionMode, PartitionManifest, PipelineSpec, TelemetrySnapshot};
use shardflow::protocol::{
    Capabilities, CompressionStats, Heartbeat, JobMetrics, JobResult, LoadModel, LoadOrigin,
    LoadSource, Message, ModelLoaded, SubmitPipelineJob, TaskAssign, TaskResult,
};
use shardflow::transport::{
    encode_payload, sha256_hex, Codec, PayloadEnvelope, PayloadRouting, Tensor,
};

pub fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn envelope() -> PayloadEnvelope {
    let t = Tensor::from_f32(vec![1, 4], &[0.0, 0.5, -1.0, 2.25]).unwrap();
    encode_payload(&t, Codec::Zlib)
}

pub fn messages() -> Vec<Message> {
    let blob = b"cell_a weights";
    let sum = sha256_hex(blob);
    let manifest = PartitionManifest {
        stage_index: 0,
        artefact_id: "cell_a".into(),
        blob_checksum: sum.clone(),
        blob_size_bytes: blob.len() as u64,
        memory_footprint_bytes: 43_000_000,
        input_shape: vec![1, 4],
        output_shape: vec![1, 2],
        eager_broadcast: true,
    };
    let telemetry = TelemetrySnapshot {
        cpu_load: 0.25,
        ram_free_bytes: 1_500_000_000,
        battery_fraction: 0.8,
        rtt_ms: 12.5,
        temperature_c: 31.0,
        timestamp: 30_000,
    };
    let mut peak = BTreeMap::new();
    peak.insert("w1".to_string(), 43_000_000);
    vec![
        Message::SubmitPipelineJob(SubmitPipelineJob {
            spec: PipelineSpec {
                pipeline_id: "demo".into(),
                stages: vec![manifest],
                execution_mode: ExecutionMode::Streaming,
                input_count: 1,
                edges: Some(vec![]),
            },
            blobs: vec!["Y2VsbF9hIHdlaWdodHM=".into()],
            inputs: vec![envelope()],
        }),
        Message::JobAccepted {
            job_id: 1,
            pipeline_id: "demo".into(),
        },
        Message::JobRejected {
            reason: "stage 0: blob checksum mismatch".into(),
        },
        Message::LoadModel(LoadModel {
            artefact_id: "cell_a".into(),
            source: LoadSource::CacheRef("cell_a".into()),
            checksum: sum,
            memory_footprint_bytes: 43_000_000,
        }),
        Message::ModelLoaded(ModelLoaded {
            artefact_id: "cell_a".into(),
            source: LoadOrigin::DiskCache,
            load_duration_ms: 6000,
            tracked_rss_bytes: 43_000_000,
        }),
        Message::ModelLoadFailed {
            artefact_id: "cell_a".into(),
            reason: "checksum mismatch for `cell_a`".into(),
        },
        Message::UnloadModel {
            artefact_id: "cell_a".into(),
        },
        Message::ModelUnloaded {
            artefact_id: "cell_a".into(),
        },
        Message::TaskAssign(TaskAssign {
            job_id: 1,
            task_id: 5,
            stage_index: 1,
            artefact_id: "cell_b".into(),
            input: PayloadRouting::Inline(envelope()),
        }),
        Message::TaskResult(TaskResult {
            job_id: 1,
            task_id: 5,
            output: PayloadRouting::StoreRef(sha256_hex(&envelope().canonical_bytes())),
            raw_bytes: 16,
            compressed_bytes: 20,
        }),
        Message::TaskFailed {
            job_id: 1,
            task_id: 5,
            reason: "task needs `cell_c` but Some(\"cell_b\") is resident".into(),
        },
        Message::Heartbeat(Heartbeat {
            telemetry,
            resident: Some("cell_a".into()),
            cached: vec!["cell_a".into(), "cell_b".into()],
        }),
        Message::WorkerRegister {
            worker_id: "w1".into(),
            capabilities: Capabilities {
                gpu_available: false,
            },
        },
        Message::JobResult(JobResult {
            job_id: 1,
            mean_logits: vec![4.0 / 3.0, 1.0 / 3.0],
            predicted_class: 0,
            metrics: JobMetrics {
                makespan_ms: 18_400,
                peak_rss_bytes: peak,
                compression: CompressionStats {
                    payloads: 15,
                    raw_bytes: 46_080,
                    compressed_bytes: 17_520,
                    mean_ratio_pct: 61.979166666666664,
                },
                tier_hits: [1, 2, 5, 1],
            },
        }),
        Message::JobFailed {
            job_id: 2,
            reason: "no workers left".into(),
        },
    ]
}

/// Compares `bytes` with the golden file `name`.
pub fn compare(name: &str, bytes: &[u8]) -> Result<(), String> {
    let path = golden_dir().join(name);
    let want = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    if want == bytes {
        Ok(())
    } else {
        Err(format!(
            "{name} differs:\n  golden: {}\n  actual: {}",
            String::from_utf8_lossy(&want),
            String::from_utf8_lossy(bytes)
        ))
    }
}
