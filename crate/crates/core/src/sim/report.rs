use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::foreman::RecoveryEvent;
use crate::model::{ExecutionMode, WorkerId};
use crate::protocol::CompressionStats;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerReport {
    pub worker_id: WorkerId,
    pub peak_rss_bytes: u64,
    /// Largest single footprint among the partitions the worker loaded.
    pub max_shard_footprint_bytes: u64,
    pub tasks: u64,
    pub loads: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencySummary {
    pub stage: usize,
    pub count: usize,
    pub min_ms: u64,
    pub median_ms: u64,
    pub mean_ms: f64,
    pub max_ms: u64,
}

impl LatencySummary {
    pub fn from_samples(stage: usize, samples: &[u64]) -> Self {
        let mut s = samples.to_vec();
        s.sort_unstable();
        let count = s.len();
        LatencySummary {
            stage,
            count,
            min_ms: s.first().copied().unwrap_or(0),
            median_ms: if count == 0 { 0 } else { s[(count - 1) / 2] },
            mean_ms: if count == 0 {
                0.0
            } else {
                s.iter().sum::<u64>() as f64 / count as f64
            },
            max_ms: s.last().copied().unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeReport {
    pub mode: ExecutionMode,
    pub makespan_ms: u64,
    pub workers: Vec<WorkerReport>,
    /// Load plans per tier, index 0 = tier 1.
    pub tier_hits: [u64; 4],
    pub total_loads: u64,
    pub compression: CompressionStats,
    pub stage_latency: Vec<LatencySummary>,
    pub recovery_events: Vec<RecoveryEvent>,
    pub mean_logits: Vec<f64>,
    pub predicted_class: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub seed: u64,
    pub runs: Vec<ModeReport>,
}

impl MetricsReport {
    pub fn run(&self, mode: ExecutionMode) -> Option<&ModeReport> {
        self.runs.iter().find(|r| r.mode == mode)
    }

    /// `100 * (1 - streaming / barrier)`, when both modes ran.
    pub fn speedup_pct(&self) -> Option<f64> {
        let s = self.run(ExecutionMode::Streaming)?.makespan_ms as f64;
        let b = self.run(ExecutionMode::Barrier)?.makespan_ms as f64;
        (b > 0.0).then(|| 100.0 * (1.0 - s / b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    Text,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" => Ok(ReportFormat::Text),
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => crate::canonical::to_string(report).expect("report serializes"),
        ReportFormat::Csv => render_csv(report),
        ReportFormat::Text => render_text(report),
    }
}

const CSV_HEADER: [&str; 12] = [
    "mode",
    "worker_id",
    "makespan_ms",
    "peak_rss_bytes",
    "max_shard_footprint_bytes",
    "tasks",
    "loads",
    "tier1",
    "tier2",
    "tier3",
    "tier4",
    "mean_compression_pct",
];

fn render_csv(report: &MetricsReport) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(CSV_HEADER).expect("in-memory write");
    for run in &report.runs {
        for wr in &run.workers {
            let mut row = vec![
                run.mode.to_string(),
                wr.worker_id.clone(),
                run.makespan_ms.to_string(),
                wr.peak_rss_bytes.to_string(),
                wr.max_shard_footprint_bytes.to_string(),
                wr.tasks.to_string(),
                wr.loads.to_string(),
            ];
            row.extend(run.tier_hits.iter().map(u64::to_string));
            row.push(format!("{:.3}", run.compression.mean_ratio_pct));
            w.write_record(&row).expect("in-memory write");
        }
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
}

fn render_text(report: &MetricsReport) -> String {
    let mut s = String::new();
    writeln!(s, "seed: {}", report.seed).unwrap();
    for run in &report.runs {
        writeln!(s, "[{}]", run.mode).unwrap();
        writeln!(s, "  makespan: {} ms", run.makespan_ms).unwrap();
        writeln!(
            s,
            "  prediction: class {} logits {:?}",
            run.predicted_class, run.mean_logits
        )
        .unwrap();
        let [t1, t2, t3, t4] = run.tier_hits;
        writeln!(
            s,
            "  loads: {} (tier1 {t1}, tier2 {t2}, tier3 {t3}, tier4 {t4})",
            run.total_loads
        )
        .unwrap();
        writeln!(
            s,
            "  compression: {} payloads, {} -> {} bytes, mean saved {:.1}%",
            run.compression.payloads,
            run.compression.raw_bytes,
            run.compression.compressed_bytes,
            run.compression.mean_ratio_pct
        )
        .unwrap();
        for w in &run.workers {
            writeln!(
                s,
                "  worker {}: peak rss {} B (largest shard {} B), {} tasks, {} loads",
                w.worker_id, w.peak_rss_bytes, w.max_shard_footprint_bytes, w.tasks, w.loads
            )
            .unwrap();
        }
        for l in &run.stage_latency {
            writeln!(
                s,
                "  stage {} latency: n={} min {} / median {} / mean {:.1} / max {} ms",
                l.stage, l.count, l.min_ms, l.median_ms, l.mean_ms, l.max_ms
            )
            .unwrap();
        }
        for r in &run.recovery_events {
            writeln!(
                s,
                "  recovery at {} ms: lost {}, task {} requeued, reload on {}",
                r.at_ms,
                r.lost_worker,
                r.task,
                r.reload_on.as_deref().unwrap_or("-")
            )
            .unwrap();
        }
    }
    if let Some(p) = report.speedup_pct() {
        writeln!(s, "streaming/barrier speedup: {p:.1}%").unwrap();
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(mode: ExecutionMode, makespan_ms: u64, workers: usize) -> ModeReport {
        ModeReport {
            mode,
            makespan_ms,
            workers: (0..workers)
                .map(|i| WorkerReport {
                    worker_id: format!("w{i}"),
                    peak_rss_bytes: 10,
                    max_shard_footprint_bytes: 10,
                    tasks: 1,
                    loads: 1,
                })
                .collect(),
            tier_hits: [0, 0, 3, 0],
            total_loads: 3,
            compression: CompressionStats::default(),
            stage_latency: vec![LatencySummary::from_samples(0, &[5, 1, 3])],
            recovery_events: Vec::new(),
            mean_logits: vec![0.5, -0.5],
            predicted_class: 0,
        }
    }

    fn report() -> MetricsReport {
        MetricsReport {
            seed: 1,
            runs: vec![
                run(ExecutionMode::Streaming, 600, 3),
                run(ExecutionMode::Barrier, 1000, 3),
            ],
        }
    }

    #[test]
    fn speedup_line() {
        let text = render_report(&report(), ReportFormat::Text);
        assert!(text.contains("streaming/barrier speedup: 40.0%"), "{text}");
    }

    #[test]
    fn csv_has_row_per_mode_and_worker() {
        let csv = render_report(&report(), ReportFormat::Csv);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 1 + 6);
        assert!(lines[0].starts_with("mode,worker_id,makespan_ms"));
        assert!(lines[4].starts_with("barrier,w0,1000,"));
    }

    #[test]
    fn json_round_trips() {
        let json = render_report(&report(), ReportFormat::Json);
        let back: MetricsReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, report());
    }

    #[test]
    fn latency_summary() {
        let l = LatencySummary::from_samples(2, &[5, 1, 3, 9]);
        assert_eq!((l.min_ms, l.median_ms, l.max_ms, l.count), (1, 3, 9, 4));
        assert_eq!(l.mean_ms, 4.5);
    }
}
