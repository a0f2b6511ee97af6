use proptest::prelude::*;
use shardflow::model::{ExecutionMode, TelemetrySnapshot};
use shardflow::scheduler::RankingStrategy;
use shardflow::sim::{makespan_oracle, oracle_prediction, run_mode, FleetConfig};

fn telemetry(i: u64) -> TelemetrySnapshot {
    TelemetrySnapshot {
        cpu_load: (i % 7) as f64 / 7.0,
        ram_free_bytes: 1_000_000 + 37_000 * (i % 11),
        battery_fraction: 0.2 + 0.07 * (i % 9) as f64,
        rtt_ms: 5.0 + (i % 13) as f64,
        temperature_c: 30.0 + (i % 5) as f64,
        timestamp: 0,
    }
}

prop_compose! {
    fn fleet()(
        workers in 1usize..=5,
        stages in 1usize..=3,
        inputs in 1usize..=6,
        compute in prop::collection::vec(prop::collection::vec(0u64..200, 3), 5),
        loads in prop::collection::vec((0u64..150, 0u64..40), 5),
        preload in prop::collection::vec((0usize..5, prop::collection::vec(any::<bool>(), 3)), 5),
        entropy in any::<bool>(),
        tel in prop::collection::vec(0u64..1000, 5),
    ) -> FleetConfig {
        let mut cfg = FleetConfig::uniform(workers, stages, inputs, 0);
        cfg.strategy = if entropy { RankingStrategy::EntropyWeightedSum } else { RankingStrategy::Fifo };
        for (i, w) in cfg.workers.iter_mut().enumerate() {
            w.compute_ms = compute[i][..stages].to_vec();
            w.cold_load_ms = loads[i].0;
            w.warm_load_ms = loads[i].1;
            w.preload_resident = (preload[i].0 < stages).then_some(preload[i].0);
            w.preload_cached = (0..stages).filter(|&k| preload[i].1[k]).collect();
            w.telemetry = vec![telemetry(tel[i])];
        }
        cfg
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn harness_agrees_with_oracle(cfg in fleet()) {
        for mode in [ExecutionMode::Streaming, ExecutionMode::Barrier] {
            let run = run_mode(&cfg, mode).unwrap();
            let p = oracle_prediction(&cfg, mode).unwrap();
            prop_assert_eq!(run.report.makespan_ms, p.makespan_ms, "{} {}", mode, cfg.to_json());
            prop_assert_eq!(run.report.tier_hits, p.tier_hits);
        }
    }
}

// Streaming is not always faster. With one replica per downstream stage the
// greedy load step can hand stage 2 to the slow idle worker early, which
// barrier mode avoids by waiting. Pinned so a policy change that alters it is
// noticed.
#[test]
fn greedy_anomaly_example() {
    let mut cfg = FleetConfig::uniform(3, 3, 4, 0);
    cfg.strategy = RankingStrategy::Fifo;
    for (w, c) in cfg
        .workers
        .iter_mut()
        .zip([[140, 20, 20], [210, 30, 30], [140, 20, 20]])
    {
        w.compute_ms = c.to_vec();
        w.cold_load_ms = 101;
    }
    let s = makespan_oracle(&cfg, ExecutionMode::Streaming).unwrap();
    let b = makespan_oracle(&cfg, ExecutionMode::Barrier).unwrap();
    assert_eq!((s, b), (583, 582));
    assert_eq!(
        run_mode(&cfg, ExecutionMode::Streaming)
            .unwrap()
            .report
            .makespan_ms,
        s
    );
}
