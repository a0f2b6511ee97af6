use std::collections::BTreeMap;

mod support;

use proptest::prelude::*;
use shardflow::graph::materialize_tasks;
use shardflow::mcdm::{entropy_weights, CriteriaMatrix, Orientation};
use shardflow::model::{
    validate_pipeline_spec, ExecutionMode, PartitionManifest, PipelineSpec, TaskState,
    WorkerDescriptor,
};
use shardflow::scheduler::{compute_tier, gate_workers, ResidencyTier};
use shardflow::transport::{
    decode_payload, encode_payload, resolve_payload, route_payload, PayloadRouting, PayloadStore,
};
use support::gen::{codec, order, raw_matrix, reference_weights, tensor};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn decode_inverts_encode(t in tensor(), c in codec()) {
        prop_assert_eq!(decode_payload(&encode_payload(&t, c)).unwrap(), t);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn resolve_inverts_route(t in tensor(), c in codec(), tau in prop_oneof![Just(1u64), Just(1024), Just(1 << 20)]) {
        let dir = tempfile::tempdir().unwrap();
        let store = PayloadStore::open(dir.path()).unwrap();
        let e = encode_payload(&t, c);
        let size = e.canonical_bytes().len() as u64;
        let r = route_payload(e.clone(), tau, &store).unwrap();
        prop_assert_eq!(r.is_inline(), size <= tau);
        prop_assert_eq!(resolve_payload(&r, &store).unwrap(), e);
    }

    #[test]
    fn threshold_equal_to_size_stays_inline(t in tensor(), c in codec()) {
        let dir = tempfile::tempdir().unwrap();
        let store = PayloadStore::open(dir.path()).unwrap();
        let e = encode_payload(&t, c);
        let size = e.canonical_bytes().len() as u64;
        prop_assert!(route_payload(e.clone(), size, &store).unwrap().is_inline());
        prop_assert!(!route_payload(e, size - 1, &store).unwrap().is_inline());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn entropy_weights_sum_to_one_and_ignore_constants((mut raw, k) in raw_matrix(), konst in 0.0f64..1000.0) {
        for r in raw.iter_mut() {
            r[k] = konst;
        }
        let orient = vec![Orientation::Benefit; raw[0].len()];
        let m = CriteriaMatrix::normalized(&raw, &orient).unwrap();
        let w = entropy_weights(&m).unwrap();
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        let varying = (0..raw[0].len()).any(|j| raw.iter().any(|r| r[j] != raw[0][j]));
        if varying {
            prop_assert!(w[k] <= 1e-9, "constant column weight {}", w[k]);
        }
        let normed: Vec<Vec<f64>> = (0..m.rows()).map(|i| (0..m.cols()).map(|j| m.get(i, j)).collect()).collect();
        for (a, b) in w.iter().zip(reference_weights(&normed)) {
            prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn ranking_ignores_positive_column_scaling(
        (raw, k) in raw_matrix(),
        factor in 0.001f64..1000.0,
        cost in prop::collection::vec(any::<bool>(), 6),
    ) {
        let orient: Vec<Orientation> = (0..raw[0].len())
            .map(|j| if cost[j] { Orientation::Cost } else { Orientation::Benefit })
            .collect();
        let scores = |raw: &[Vec<f64>]| {
            let m = CriteriaMatrix::normalized(raw, &orient).unwrap();
            m.scores(&entropy_weights(&m).unwrap())
        };
        let a = scores(&raw);
        let scaled: Vec<Vec<f64>> = raw
            .iter()
            .map(|r| r.iter().enumerate().map(|(j, &v)| if j == k { v * factor } else { v }).collect())
            .collect();
        let b = scores(&scaled);
        // Pairs separated by more than rounding noise keep their order.
        for i in 0..a.len() {
            for j in 0..a.len() {
                if a[i] - a[j] > 1e-9 {
                    prop_assert!(b[i] > b[j], "pair ({}, {}) flipped: {:?} vs {:?}", i, j, a, b);
                }
            }
        }
        let separated = (0..a.len()).all(|i| (0..a.len()).all(|j| i == j || (a[i] - a[j]).abs() > 1e-9));
        if separated {
            prop_assert_eq!(order(&a), order(&b));
        }
    }
}

use support::tiers::{check_all_small_fleets, descriptor, states, TARGET};

#[test]
fn tier_selection_matches_table_for_every_small_fleet() {
    check_all_small_fleets().unwrap();
}

proptest! {
    #[test]
    fn gating_is_exactly_connected_tier_one(spec in prop::collection::vec(0usize..10, 0..6)) {
        let st = states();
        let fleet: Vec<WorkerDescriptor> = spec.iter().enumerate().map(|(i, &s)| descriptor(i, st[s])).collect();
        let refs: Vec<&WorkerDescriptor> = fleet.iter().collect();
        let gated: Vec<&str> = gate_workers(TARGET, &refs).iter().map(|w| w.worker_id.as_str()).collect();
        let want: Vec<&str> = fleet
            .iter()
            .filter(|w| w.connected && compute_tier(TARGET, w) == ResidencyTier::Resident)
            .map(|w| w.worker_id.as_str())
            .collect();
        prop_assert_eq!(gated, want);
    }
}

fn pipeline(n: usize, s: usize, mode: ExecutionMode) -> PipelineSpec {
    PipelineSpec {
        pipeline_id: "p".into(),
        stages: (0..s)
            .map(|k| PartitionManifest {
                stage_index: k,
                artefact_id: format!("cell_{k}"),
                blob_checksum: "a".repeat(64),
                blob_size_bytes: 1,
                memory_footprint_bytes: 1,
                input_shape: vec![1, 2],
                output_shape: vec![1, 2],
                eager_broadcast: k == 0,
            })
            .collect(),
        execution_mode: mode,
        input_count: n,
        edges: None,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    // Any order of completing whatever is pending ends in the same wiring.
    #[test]
    fn completion_order_does_not_matter(
        n in 1usize..6,
        s in 1usize..4,
        barrier in any::<bool>(),
        picks in prop::collection::vec(any::<prop::sample::Index>(), 30),
    ) {
        let mode = if barrier { ExecutionMode::Barrier } else { ExecutionMode::Streaming };
        let mut g = materialize_tasks(&validate_pipeline_spec(pipeline(n, s, mode)).unwrap());
        let mut step = 0;
        while !g.is_complete() {
            let pending: Vec<usize> = g.pending_tasks().iter().map(|t| t.task_id).collect();
            prop_assert!(!pending.is_empty());
            let id = pending[picks[step % picks.len()].index(pending.len())];
            step += 1;
            g.dispatch(id, "w".into()).unwrap();
            g.complete_task(id, PayloadRouting::StoreRef(format!("out{id}")), &[1, 2]).unwrap();
            g.check_invariants().map_err(TestCaseError::fail)?;
        }
        prop_assert_eq!(step, n * s);
        let mut inputs = BTreeMap::new();
        for t in g.tasks() {
            prop_assert_eq!(t.state, TaskState::Complete);
            inputs.insert(t.task_id, t.input_payload.clone());
        }
        for t in g.tasks().iter().filter(|t| t.stage_index > 0) {
            let upstream = (t.stage_index - 1) * n + t.input_index;
            prop_assert_eq!(&inputs[&t.task_id], &Some(PayloadRouting::StoreRef(format!("out{upstream}"))));
        }
        let sinks: Vec<_> = g.sink_outputs().into_iter().map(|o| o.cloned()).collect();
        let want: Vec<_> = (0..n).map(|i| Some(PayloadRouting::StoreRef(format!("out{}", (s - 1) * n + i)))).collect();
        prop_assert_eq!(sinks, want);
    }
}
