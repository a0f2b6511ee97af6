//! Survivor scoring used when a worker drops out mid-job.

use crate::mcdm::{entropy_weights, CriteriaMatrix, Orientation};
use crate::model::WorkerDescriptor;
use crate::scheduler::compute_tier;

const RECOVERY_ORIENTATION: [Orientation; 4] = [Orientation::Benefit; 4];
const TIER_BONUS: f64 = 0.25;

/// A survivor and whether it reported a GPU.
#[derive(Debug, Clone, Copy)]
pub struct Survivor<'a> {
    pub desc: &'a WorkerDescriptor,
    pub gpu_available: bool,
}

/// Successes over attempts; a worker with no history counts as reliable.
pub fn success_rate(w: &WorkerDescriptor) -> f64 {
    let total = w.success_count + w.failure_count;
    if total == 0 {
        1.0
    } else {
        w.success_count as f64 / total as f64
    }
}

/// Entropy-weighted sum over (success rate, free RAM, battery, GPU) after
/// min-max normalisation, plus `(5 - tier) * 0.25` for the target partition.
pub fn recovery_scores(target: &str, survivors: &[Survivor<'_>]) -> Vec<f64> {
    let raw: Vec<Vec<f64>> = survivors
        .iter()
        .map(|s| {
            vec![
                success_rate(s.desc),
                s.desc.last_heartbeat.ram_free_bytes as f64,
                s.desc.last_heartbeat.battery_fraction,
                if s.gpu_available { 1.0 } else { 0.0 },
            ]
        })
        .collect();
    let base = if survivors.len() >= 2 {
        let m = CriteriaMatrix::normalized(&raw, &RECOVERY_ORIENTATION).expect("finite criteria");
        let w = entropy_weights(&m).expect("at least two rows");
        m.scores(&w)
    } else {
        vec![0.0; survivors.len()]
    };
    survivors
        .iter()
        .zip(base)
        .map(|(s, b)| b + (5 - compute_tier(target, s.desc).number()) as f64 * TIER_BONUS)
        .collect()
}

/// Index of the best survivor; ties go to the lowest worker id.
pub fn best_survivor(target: &str, survivors: &[Survivor<'_>]) -> Option<usize> {
    let scores = recovery_scores(target, survivors);
    (0..survivors.len()).min_by(|&a, &b| {
        scores[b].total_cmp(&scores[a]).then_with(|| {
            survivors[a]
                .desc
                .worker_id
                .cmp(&survivors[b].desc.worker_id)
        })
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cached_survivor_beats_idle_peer_with_equal_health() {
        let a = WorkerDescriptor::new("a");
        let b = WorkerDescriptor::new("b")
            .with_resident("cell_a")
            .with_cached("cell_b");
        let s = [
            Survivor {
                desc: &a,
                gpu_available: false,
            },
            Survivor {
                desc: &b,
                gpu_available: false,
            },
        ];
        // Equal health criteria -> uniform weights over all-0.5 columns = 0.5 base.
        let scores = recovery_scores("cell_b", &s);
        assert_eq!(scores, vec![0.5 + 0.5, 0.5 + 0.75]);
        assert_eq!(best_survivor("cell_b", &s), Some(1));
    }

    #[test]
    fn reliability_counts() {
        let mut flaky = WorkerDescriptor::new("a");
        flaky.failure_count = 3;
        flaky.success_count = 1;
        let steady = WorkerDescriptor::new("b");
        assert_eq!(success_rate(&flaky), 0.25);
        let s = [
            Survivor {
                desc: &flaky,
                gpu_available: false,
            },
            Survivor {
                desc: &steady,
                gpu_available: false,
            },
        ];
        assert_eq!(best_survivor("x", &s), Some(1));
    }

    #[test]
    fn lone_survivor() {
        let a = WorkerDescriptor::new("a");
        let s = [Survivor {
            desc: &a,
            gpu_available: true,
        }];
        assert_eq!(recovery_scores("x", &s), vec![0.5]);
        assert_eq!(best_survivor("x", &[]), None);
    }
}
