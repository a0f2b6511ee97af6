//! Client side: turns stage artefact files and an inputs file into a job
//! submission, sends it to a foreman and waits for the outcome.
//!
//! Each stage file `<name>` is accompanied by a manifest `<name>.json`:
//!
//! ```json
//! {"memory_footprint_bytes": 4000000, "input_shape": [1, 8], "output_shape": [1, 16]}
//! ```
//!
//! `artefact_id` defaults to the file name and `blob_checksum`, if present,
//! must match the file. The inputs file holds a header line such as
//! `dtype=float32 shape=1,8` followed by one tensor per line as numbers
//! separated by commas or spaces. Blank lines and `#` comments are skipped.

use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_pipeline_spec, ArtefactId, ExecutionMode, PartitionManifest, PipelineSpec, Rejection,
};
use crate::protocol::{JobResult, Message, SubmitPipelineJob};
use crate::transport::{encode_payload, sha256_hex, Codec, DType, Tensor};
use crate::worker::{Activation, AffineArtefact};

#[derive(Debug, Error)]
pub enum SdkError {
    #[error("file not found: {}", .0.display())]
    FileMissing(PathBuf),
    #[error("no stage artefacts given")]
    EmptyStages,
    #[error("{}: {msg}", path.display())]
    Manifest { path: PathBuf, msg: String },
    #[error("stage {stage}: file checksum {actual} does not match recorded {expected}")]
    ChecksumMismatch {
        stage: usize,
        expected: String,
        actual: String,
    },
    #[error("inputs line {line}: {msg}")]
    Inputs { line: usize, msg: String },
    #[error("input shape {actual:?} does not match stage 0 input shape {expected:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error(transparent)]
    Validation(#[from] Rejection),
    #[error("connection refused by {0}")]
    ConnectionRefused(String),
    #[error("job rejected: {0}")]
    JobRejected(String),
    #[error("job failed: {0}")]
    JobFailed(String),
    #[error("no result within {0:?}")]
    Timeout(Duration),
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Sidecar manifest of one stage file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageManifestFile {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artefact_id: Option<ArtefactId>,
    pub memory_footprint_bytes: u64,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blob_checksum: Option<String>,
}

pub fn manifest_path(stage_file: &Path) -> PathBuf {
    let mut s = stage_file.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read(path: &Path) -> Result<Vec<u8>, SdkError> {
    std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => SdkError::FileMissing(path.to_path_buf()),
        _ => SdkError::Io(e),
    })
}

/// Parses an inputs file.
pub fn parse_inputs(text: &str) -> Result<Vec<Tensor>, SdkError> {
    let mut header: Option<(DType, Vec<usize>)> = None;
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let err = |msg: String| SdkError::Inputs { line: line_no, msg };
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((dtype, shape)) = &header else {
            let mut dtype = None;
            let mut shape = None;
            for field in line.split_whitespace() {
                match field.split_once('=') {
                    Some(("dtype", v)) => {
                        dtype = Some(DType::parse(v).map_err(|e| err(e.to_string()))?)
                    }
                    Some(("shape", v)) => {
                        let dims: Result<Vec<usize>, _> =
                            v.split(',').map(|d| d.trim().parse::<usize>()).collect();
                        shape = Some(dims.map_err(|e| err(format!("bad shape `{v}`: {e}")))?);
                    }
                    _ => return Err(err(format!("unexpected header field `{field}`"))),
                }
            }
            match (dtype, shape) {
                (Some(d), Some(s)) if !s.is_empty() && s.iter().all(|&x| x > 0) => {
                    header = Some((d, s))
                }
                _ => {
                    return Err(err(
                        "header needs dtype=<float32|int64> and shape=<d1,d2,..>".into(),
                    ))
                }
            }
            continue;
        };
        let fields: Vec<&str> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let want: usize = shape.iter().product();
        if fields.len() != want {
            return Err(err(format!(
                "{} values for shape {shape:?}, expected {want}",
                fields.len()
            )));
        }
        let tensor = match dtype {
            DType::Float32 => {
                let v: Result<Vec<f32>, _> = fields.iter().map(|f| f.parse::<f32>()).collect();
                Tensor::from_f32(shape.clone(), &v.map_err(|e| err(e.to_string()))?)
            }
            DType::Int64 => {
                let v: Result<Vec<i64>, _> = fields.iter().map(|f| f.parse::<i64>()).collect();
                Tensor::from_i64(shape.clone(), &v.map_err(|e| err(e.to_string()))?)
            }
        };
        out.push(tensor.map_err(|e| err(e.to_string()))?);
    }
    if header.is_none() {
        return Err(SdkError::Inputs {
            line: 0,
            msg: "missing header".into(),
        });
    }
    if out.is_empty() {
        return Err(SdkError::Inputs {
            line: 0,
            msg: "no input tensors".into(),
        });
    }
    Ok(out)
}

/// Inverse of [`parse_inputs`] for float32 tensors of one shape.
pub fn format_inputs(tensors: &[Tensor]) -> String {
    let mut s = String::new();
    if let Some(first) = tensors.first() {
        let dims: Vec<String> = first.shape().iter().map(usize::to_string).collect();
        s.push_str(&format!(
            "dtype={} shape={}\n",
            first.dtype().as_str(),
            dims.join(",")
        ));
    }
    for t in tensors {
        let vals: Vec<String> = match t.to_i64_vec() {
            Some(v) => v.iter().map(i64::to_string).collect(),
            None => t.to_f32_vec().iter().map(f32::to_string).collect(),
        };
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    s
}

/// Builds and validates a submission from ordered stage files.
pub fn build_submission(
    stage_files: &[PathBuf],
    mode: ExecutionMode,
    inputs_file: &Path,
    codec: Codec,
) -> Result<SubmitPipelineJob, SdkError> {
    if stage_files.is_empty() {
        return Err(SdkError::EmptyStages);
    }
    let mut stages = Vec::new();
    let mut blobs = Vec::new();
    for (k, path) in stage_files.iter().enumerate() {
        let blob = read(path)?;
        let mpath = manifest_path(path);
        let text = String::from_utf8(read(&mpath)?).map_err(|e| SdkError::Manifest {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        let m: StageManifestFile = serde_json::from_str(&text).map_err(|e| SdkError::Manifest {
            path: mpath.clone(),
            msg: e.to_string(),
        })?;
        let checksum = sha256_hex(&blob);
        if let Some(expected) = m.blob_checksum {
            if expected != checksum {
                return Err(SdkError::ChecksumMismatch {
                    stage: k,
                    expected,
                    actual: checksum,
                });
            }
        }
        let artefact_id = match m.artefact_id {
            Some(id) => id,
            None => path
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| format!("stage_{k}")),
        };
        stages.push(PartitionManifest {
            stage_index: k,
            artefact_id,
            blob_checksum: checksum,
            blob_size_bytes: blob.len() as u64,
            memory_footprint_bytes: m.memory_footprint_bytes,
            input_shape: m.input_shape,
            output_shape: m.output_shape,
            eager_broadcast: k == 0,
        });
        blobs.push(blob);
    }

    let text = String::from_utf8(read(inputs_file)?).map_err(|e| SdkError::Inputs {
        line: 0,
        msg: e.to_string(),
    })?;
    let inputs = parse_inputs(&text)?;
    let expected = &stages[0].input_shape;
    if let Some(bad) = inputs.iter().find(|t| t.shape() != expected.as_slice()) {
        return Err(SdkError::InputShape {
            expected: expected.clone(),
            actual: bad.shape().to_vec(),
        });
    }

    let mut id_src = String::new();
    for s in &stages {
        id_src.push_str(&s.blob_checksum);
    }
    let spec = PipelineSpec {
        pipeline_id: format!("p-{}", &sha256_hex(id_src.as_bytes())[..12]),
        stages,
        execution_mode: mode,
        input_count: inputs.len(),
        edges: None,
    };
    let validated = validate_pipeline_spec(spec)?;
    let spec = PipelineSpec {
        edges: Some(validated.edges()),
        ..validated.into_spec()
    };
    Ok(SubmitPipelineJob {
        spec,
        blobs: blobs.iter().map(|b| BASE64.encode(b)).collect(),
        inputs: inputs.iter().map(|t| encode_payload(t, codec)).collect(),
    })
}

/// Writes a chain of reference affine stages, with manifests, into `dir`.
/// `widths[0]` is the input width; stage `k` maps `widths[k]` to
/// `widths[k + 1]`. Returns the stage file paths in order.
pub fn write_affine_stages(
    dir: &Path,
    seed: u64,
    widths: &[usize],
) -> Result<Vec<PathBuf>, SdkError> {
    if widths.len() < 2 {
        return Err(SdkError::EmptyStages);
    }
    std::fs::create_dir_all(dir)?;
    let s = widths.len() - 1;
    let mut paths = Vec::new();
    for k in 0..s {
        let act = if k + 1 == s {
            Activation::None
        } else {
            Activation::Tanh
        };
        let input_shape = vec![1, widths[k]];
        let output_shape = vec![1, widths[k + 1]];
        let blob = AffineArtefact::new(
            seed.wrapping_add(k as u64),
            &input_shape,
            &output_shape,
            act,
        )
        .to_bytes();
        let path = dir.join(format!("stage_{k}.affine"));
        std::fs::write(&path, &blob)?;
        let m = StageManifestFile {
            artefact_id: None,
            memory_footprint_bytes: (4 * (widths[k] + 1) * widths[k + 1]) as u64,
            input_shape,
            output_shape,
            blob_checksum: Some(sha256_hex(&blob)),
        };
        std::fs::write(
            manifest_path(&path),
            crate::canonical::to_string(&m).expect("manifest serializes"),
        )?;
        paths.push(path);
    }
    Ok(paths)
}

/// Sends a submission and blocks until the job finishes or `timeout` passes.
pub fn submit_and_await(
    sub: SubmitPipelineJob,
    addr: &str,
    timeout: Duration,
) -> Result<JobResult, SdkError> {
    let deadline = Instant::now() + timeout;
    let target = addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| SdkError::ConnectionRefused(addr.to_string()))?;
    let mut stream = TcpStream::connect_timeout(&target, timeout).map_err(|e| match e.kind() {
        std::io::ErrorKind::ConnectionRefused => SdkError::ConnectionRefused(addr.to_string()),
        std::io::ErrorKind::TimedOut => SdkError::Timeout(timeout),
        _ => SdkError::Io(e),
    })?;
    let mut frame = Message::SubmitPipelineJob(sub).to_frame();
    frame.push('\n');
    stream.write_all(frame.as_bytes())?;
    stream.flush()?;

    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        if left.is_zero() {
            return Err(SdkError::Timeout(timeout));
        }
        reader.get_ref().set_read_timeout(Some(left))?;
        line.clear();
        match reader.read_line(&mut line) {
            Ok(0) => return Err(SdkError::Protocol("foreman closed the connection".into())),
            Ok(_) => {}
            Err(e)
                if matches!(
                    e.kind(),
                    std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut
                ) =>
            {
                return Err(SdkError::Timeout(timeout));
            }
            Err(e) => return Err(e.into()),
        }
        let msg =
            Message::from_frame(line.trim_end()).map_err(|e| SdkError::Protocol(e.to_string()))?;
        match msg {
            Message::JobAccepted { job_id, .. } => log::info!("job {job_id} accepted"),
            Message::JobRejected { reason } => return Err(SdkError::JobRejected(reason)),
            Message::JobFailed { reason, .. } => return Err(SdkError::JobFailed(reason)),
            Message::JobResult(r) => return Ok(r),
            other => log::debug!("ignoring {}", other.kind()),
        }
    }
}

/// Human-readable job result.
pub fn render_result(r: &JobResult) -> String {
    let m = &r.metrics;
    let mut s = format!(
        "job {}\npredicted class: {}\nmean logits: {:?}\nmakespan: {} ms\n",
        r.job_id, r.predicted_class, r.mean_logits, m.makespan_ms
    );
    for (w, rss) in &m.peak_rss_bytes {
        s.push_str(&format!("peak rss {w}: {rss} B\n"));
    }
    s.push_str(&format!(
        "compression: {} payloads, {} -> {} bytes, mean saved {:.1}%\n",
        m.compression.payloads,
        m.compression.raw_bytes,
        m.compression.compressed_bytes,
        m.compression.mean_ratio_pct
    ));
    let [t1, t2, t3, t4] = m.tier_hits;
    s.push_str(&format!("load tiers: {t1} / {t2} / {t3} / {t4}\n"));
    s
}
