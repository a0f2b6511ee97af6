use std::collections::VecDeque;

use super::*;
use crate::model::fixtures::{distilbert_like, manifest};
use crate::model::{ExecutionMode, PipelineSpec, TaskState};
use crate::protocol::LoadOrigin;
use crate::transport::{encode_payload, Codec, PayloadRouting, Tensor};

struct Rig {
    foreman: Foreman,
    _dir: tempfile::TempDir,
}

fn rig(workers: &[&str]) -> Rig {
    let dir = tempfile::tempdir().unwrap();
    let store = PayloadStore::open(dir.path()).unwrap();
    let mut foreman = Foreman::new(ForemanConfig::default(), store);
    for w in workers {
        foreman.register_worker(0, w.to_string(), Capabilities::default());
        foreman
            .on_heartbeat(
                0,
                w,
                Heartbeat {
                    telemetry: TelemetrySnapshot::default(),
                    resident: None,
                    cached: vec![],
                },
            )
            .unwrap();
    }
    Rig { foreman, _dir: dir }
}

fn submission(spec: PipelineSpec) -> SubmitPipelineJob {
    let blobs = (0..spec.stages.len())
        .map(|k| BASE64.encode(format!("cell{k}")))
        .collect();
    let inputs = (0..spec.input_count)
        .map(|i| {
            encode_payload(
                &Tensor::from_i64(vec![1, 8], &[i as i64; 8]).unwrap(),
                Codec::Zlib,
            )
        })
        .collect();
    SubmitPipelineJob {
        spec,
        blobs,
        inputs,
    }
}

fn envelope_for(shape: &[usize], fill: f32) -> PayloadRouting {
    let n: usize = shape.iter().product();
    let t = Tensor::from_f32(shape.to_vec(), &vec![fill; n]).unwrap();
    PayloadRouting::Inline(encode_payload(&t, Codec::None))
}

fn loaded(artefact: &str) -> Message {
    Message::ModelLoaded(ModelLoaded {
        artefact_id: artefact.into(),
        source: LoadOrigin::Network,
        load_duration_ms: 0,
        tracked_rss_bytes: 100,
    })
}

fn result_for(f: &Foreman, job: JobId, task: TaskId) -> Message {
    let rec = f.job(job).unwrap();
    let stage = rec.graph.task(task).unwrap().stage_index;
    let shape = rec.graph.stage_output_shape(stage).to_vec();
    Message::TaskResult(TaskResult {
        job_id: job,
        task_id: task,
        output: envelope_for(&shape, task as f32),
        raw_bytes: 0,
        compressed_bytes: 0,
    })
}

/// Answers every instruction immediately, one round at a time, until the
/// client hears back. Returns the client's messages.
fn drive(f: &mut Foreman, first: Vec<Outbound>) -> Vec<Message> {
    let mut queue: VecDeque<Outbound> = first.into();
    let mut client = Vec::new();
    let mut rounds = 0;
    while !queue.is_empty() {
        rounds += 1;
        assert!(rounds < 10_000, "no progress");
        let batch: Vec<Outbound> = queue.drain(..).collect();
        let mut replies = Vec::new();
        for o in batch {
            match (o.to, o.msg) {
                (Peer::Client(_), m) => client.push(m),
                (Peer::Worker(w), Message::LoadModel(l)) => {
                    replies.push((w, loaded(&l.artefact_id)))
                }
                (Peer::Worker(w), Message::UnloadModel { artefact_id }) => {
                    replies.push((w, Message::ModelUnloaded { artefact_id }))
                }
                (Peer::Worker(w), Message::TaskAssign(a)) => {
                    replies.push((w, result_for(f, a.job_id, a.task_id)))
                }
                (_, m) => panic!("unexpected {m:?}"),
            }
        }
        for (w, m) in replies {
            queue.extend(f.apply(1, Peer::Worker(w), m));
        }
        queue.extend(f.schedule(1));
    }
    client
}

#[test]
fn submit_broadcasts_stage_zero_to_every_idle_worker() {
    let mut r = rig(&["w1", "w2"]);
    let out = r.foreman.handle(
        0,
        Peer::Client(7),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 4))),
    );
    assert!(matches!(out[0].msg, Message::JobAccepted { job_id: 1, .. }));
    let loads: Vec<_> = out
        .iter()
        .filter_map(|o| match &o.msg {
            Message::LoadModel(l) => Some((o.to.clone(), l.artefact_id.clone())),
            _ => None,
        })
        .collect();
    assert_eq!(
        loads,
        vec![
            (Peer::Worker("w1".into()), "cell_a".to_string()),
            (Peer::Worker("w2".into()), "cell_a".to_string()),
        ]
    );
    // Nothing is dispatched before the loads are acknowledged.
    assert!(!out.iter().any(|o| matches!(o.msg, Message::TaskAssign(_))));
    assert_eq!(r.foreman.job(1).unwrap().tier_hits, [0, 0, 2, 0]);
}

#[test]
fn downstream_loads_wait_for_first_upstream_completion() {
    let mut r = rig(&["w1", "w2"]);
    let f = &mut r.foreman;
    f.handle(
        0,
        Peer::Client(1),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 3))),
    );
    let mut out = f.apply(1, Peer::Worker("w1".into()), loaded("cell_a"));
    out.extend(f.apply(1, Peer::Worker("w2".into()), loaded("cell_a")));
    out.extend(f.schedule(1));
    let assigns: Vec<TaskId> = out
        .iter()
        .filter_map(|o| match &o.msg {
            Message::TaskAssign(a) => Some(a.task_id),
            _ => None,
        })
        .collect();
    assert_eq!(assigns, vec![0, 1]);
    assert!(f.job(1).unwrap().jit_dispatched.is_empty());

    let res = result_for(f, 1, 0);
    f.apply(2, Peer::Worker("w1".into()), res);
    assert!(f.job(1).unwrap().jit_dispatched.contains(&1));
    let out = f.schedule(2);
    // Stage-0 work remains for w1, so the stage-1 load waits.
    assert!(out
        .iter()
        .any(|o| matches!(&o.msg, Message::TaskAssign(a) if a.task_id == 2)));
    assert!(!out.iter().any(|o| matches!(o.msg, Message::LoadModel(_))));

    let res = result_for(f, 1, 1);
    f.apply(3, Peer::Worker("w2".into()), res);
    let out = f.schedule(3);
    // w2 is idle and w1 still holds cell_a, so w2 is repurposed for stage 1.
    assert!(out.iter().any(|o| o.to == Peer::Worker("w2".into())
        && matches!(&o.msg, Message::UnloadModel { artefact_id } if artefact_id == "cell_a")));
    assert!(out.iter().any(|o| o.to == Peer::Worker("w2".into())
        && matches!(&o.msg, Message::LoadModel(l) if l.artefact_id == "cell_b")));
    assert!(!f.job(1).unwrap().pending_load_instructions.contains_key(&1));
}

#[test]
fn streaming_job_runs_to_completion() {
    let mut r = rig(&["w1", "w2", "w3"]);
    let out = r.foreman.handle(
        0,
        Peer::Client(3),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 5))),
    );
    let client = drive(&mut r.foreman, out);
    let Some(Message::JobResult(res)) = client.last() else {
        panic!("{client:?}")
    };
    // Sink outputs are filled with the task id: 10..=14.
    assert_eq!(res.mean_logits, vec![12.0, 12.0]);
    assert_eq!(res.predicted_class, 0);
    let job = r.foreman.job(1).unwrap();
    assert_eq!(job.status, JobStatus::Complete);
    assert!(job
        .graph
        .tasks()
        .iter()
        .all(|t| t.state == TaskState::Complete));
    job.graph.check_invariants().unwrap();
}

#[test]
fn barrier_job_runs_to_completion() {
    let mut r = rig(&["w1", "w2"]);
    let out = r.foreman.handle(
        0,
        Peer::Client(3),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Barrier, 3))),
    );
    let client = drive(&mut r.foreman, out);
    assert!(
        matches!(client.last(), Some(Message::JobResult(_))),
        "{client:?}"
    );
}

#[test]
fn single_worker_cycles_through_every_stage() {
    let mut r = rig(&["solo"]);
    let out = r.foreman.handle(
        0,
        Peer::Client(3),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 3))),
    );
    let client = drive(&mut r.foreman, out);
    assert!(
        matches!(client.last(), Some(Message::JobResult(_))),
        "{client:?}"
    );
}

#[test]
fn checksum_mismatch_is_rejected() {
    let mut r = rig(&["w1"]);
    let mut sub = submission(distilbert_like(ExecutionMode::Streaming, 2));
    sub.blobs[1] = BASE64.encode("tampered");
    let out = r
        .foreman
        .handle(0, Peer::Client(9), Message::SubmitPipelineJob(sub));
    assert_eq!(out.len(), 1);
    assert!(matches!(&out[0].msg, Message::JobRejected { reason } if reason.contains("stage 1")));
    assert!(r.foreman.job(1).is_none());
}

#[test]
fn input_shape_must_match_stage_zero() {
    let mut r = rig(&["w1"]);
    let mut sub = submission(distilbert_like(ExecutionMode::Streaming, 1));
    sub.inputs[0] = encode_payload(&Tensor::from_i64(vec![1, 4], &[0; 4]).unwrap(), Codec::None);
    let out = r
        .foreman
        .handle(0, Peer::Client(9), Message::SubmitPipelineJob(sub));
    assert!(matches!(&out[0].msg, Message::JobRejected { .. }));
}

#[test]
fn invalid_spec_is_rejected() {
    let mut r = rig(&["w1"]);
    let mut spec = distilbert_like(ExecutionMode::Streaming, 1);
    spec.stages[1] = manifest(1, &[1, 8, 15], &[1, 8, 16]);
    let out = r.foreman.handle(
        0,
        Peer::Client(9),
        Message::SubmitPipelineJob(submission(spec)),
    );
    assert!(matches!(&out[0].msg, Message::JobRejected { .. }));
}

#[test]
fn result_from_wrong_worker_is_ignored() {
    let mut r = rig(&["w1", "w2"]);
    let f = &mut r.foreman;
    f.handle(
        0,
        Peer::Client(1),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 2))),
    );
    f.apply(1, Peer::Worker("w1".into()), loaded("cell_a"));
    f.schedule(1);
    assert_eq!(f.worker_task("w1"), Some((1, 0)));
    let res = result_for(f, 1, 0);
    let Message::TaskResult(tr) = res else {
        unreachable!()
    };
    assert_eq!(
        f.on_task_complete(2, "w2", tr.clone()),
        Err(ForemanError::WrongWorker {
            task: 0,
            worker: "w2".into()
        })
    );
    assert!(f.on_task_complete(2, "w1", tr).is_ok());
}

#[test]
fn lost_worker_task_is_requeued_and_partition_reloaded() {
    let mut r = rig(&["w1", "w2"]);
    let f = &mut r.foreman;
    f.handle(
        0,
        Peer::Client(1),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 2))),
    );
    // Only w1 acknowledges; w2's stage-0 load is still in flight.
    f.apply(1, Peer::Worker("w1".into()), loaded("cell_a"));
    f.schedule(1);
    f.apply(
        1,
        Peer::Worker("w2".into()),
        Message::ModelLoadFailed {
            artefact_id: "cell_a".into(),
            reason: "oom".into(),
        },
    );
    assert_eq!(f.worker_task("w1"), Some((1, 0)));

    let out = f.on_worker_disconnect(5, "w1");
    let job = f.job(1).unwrap();
    assert_eq!(job.graph.task(0).unwrap().state, TaskState::Pending);
    assert_eq!(job.graph.task(0).unwrap().attempt_count, 1);
    assert_eq!(job.recovery_events.len(), 1);
    assert_eq!(job.recovery_events[0].reload_on.as_deref(), Some("w2"));
    assert!(out.iter().any(|o| o.to == Peer::Worker("w2".into())
        && matches!(&o.msg, Message::LoadModel(l) if l.artefact_id == "cell_a")));
    assert_eq!(f.worker("w1").unwrap().failure_count, 1);

    let client = drive(f, out);
    assert!(
        matches!(client.last(), Some(Message::JobResult(_))),
        "{client:?}"
    );
}

#[test]
fn losing_every_worker_fails_the_job() {
    let mut r = rig(&["w1"]);
    let f = &mut r.foreman;
    f.handle(
        0,
        Peer::Client(4),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 1))),
    );
    let out = f.on_worker_disconnect(3, "w1");
    assert_eq!(out.len(), 1);
    assert_eq!(out[0].to, Peer::Client(4));
    assert!(matches!(out[0].msg, Message::JobFailed { job_id: 1, .. }));
    assert_eq!(f.job(1).unwrap().status, JobStatus::Failed);
}

#[test]
fn silent_worker_goes_stale_after_three_intervals() {
    let mut r = rig(&["w1", "w2"]);
    let f = &mut r.foreman;
    let hb = Heartbeat {
        telemetry: TelemetrySnapshot::default(),
        resident: None,
        cached: vec![],
    };
    f.on_heartbeat(60_000, "w2", hb.clone()).unwrap();
    f.tick(89_999);
    assert!(f.worker("w1").unwrap().connected);
    f.tick(90_000);
    assert!(!f.worker("w1").unwrap().connected);
    assert!(f.worker("w2").unwrap().connected);

    // A heartbeat brings it back and resynchronises residency.
    f.on_heartbeat(
        95_000,
        "w1",
        Heartbeat {
            resident: Some("cell_a".into()),
            ..hb
        },
    )
    .unwrap();
    let w1 = f.worker("w1").unwrap();
    assert!(w1.connected);
    assert_eq!(w1.resident_partition.as_deref(), Some("cell_a"));
}

#[test]
fn heartbeat_does_not_override_acknowledged_residency() {
    let mut r = rig(&["w1"]);
    let f = &mut r.foreman;
    f.apply(1, Peer::Worker("w1".into()), loaded("cell_b"));
    f.on_heartbeat(
        2,
        "w1",
        Heartbeat {
            telemetry: TelemetrySnapshot::default(),
            resident: None,
            cached: vec!["cell_b".into()],
        },
    )
    .unwrap();
    assert_eq!(
        f.worker("w1").unwrap().resident_partition.as_deref(),
        Some("cell_b")
    );
}

#[test]
fn resident_worker_gets_tier_one_noop() {
    let mut r = rig(&[]);
    let f = &mut r.foreman;
    f.register_worker(0, "w1".into(), Capabilities::default());
    f.on_heartbeat(
        0,
        "w1",
        Heartbeat {
            telemetry: TelemetrySnapshot::default(),
            resident: Some("cell_a".into()),
            cached: vec![],
        },
    )
    .unwrap();
    let out = f.handle(
        0,
        Peer::Client(1),
        Message::SubmitPipelineJob(submission(distilbert_like(ExecutionMode::Streaming, 1))),
    );
    assert!(!out.iter().any(|o| matches!(o.msg, Message::LoadModel(_))));
    assert!(out.iter().any(|o| matches!(o.msg, Message::TaskAssign(_))));
    assert_eq!(f.job(1).unwrap().tier_hits[0], 1);
}
