//! Exhaustive check of load-target selection against the residency tier table.

use shardflow::model::WorkerDescriptor;
use shardflow::scheduler::{compute_tier, select_load_target, RankingStrategy, ResidencyTier};

pub const TARGET: &str = "cell_b";

/// Per-worker residency states: (connected, resident, target cached).
pub fn states() -> Vec<(bool, Option<&'static str>, bool)> {
    let mut v = Vec::new();
    for connected in [true, false] {
        for resident in [None, Some(TARGET), Some("cell_a")] {
            for cached in [false, true] {
                if resident == Some(TARGET) && !cached {
                    continue;
                }
                v.push((connected, resident, cached));
            }
        }
    }
    v
}

pub fn descriptor(
    i: usize,
    (connected, resident, cached): (bool, Option<&str>, bool),
) -> WorkerDescriptor {
    let mut w = WorkerDescriptor::new(format!("w{i}"));
    w.connected = connected;
    w.resident_partition = resident.map(str::to_string);
    if let Some(r) = resident {
        w.disk_cache.insert(r.to_string());
    }
    if cached {
        w.disk_cache.insert(TARGET.to_string());
    }
    w
}

/// Residency tier straight from the table.
fn table_tier(resident: Option<&str>, cached: bool) -> u8 {
    match resident {
        Some(r) if r == TARGET => 1,
        _ if cached => 2,
        None => 3,
        Some(_) => 4,
    }
}

/// Every fleet of one to four workers over the residency states; returns the
/// number of fleets checked or the first disagreement.
pub fn check_all_small_fleets() -> Result<usize, String> {
    let st = states();
    let mut checked = 0;
    for n in 1..=4usize {
        let mut idx = vec![0usize; n];
        loop {
            let spec: Vec<_> = idx.iter().map(|&i| st[i]).collect();
            let fleet: Vec<WorkerDescriptor> = spec
                .iter()
                .enumerate()
                .map(|(i, &s)| descriptor(i, s))
                .collect();
            let refs: Vec<&WorkerDescriptor> = fleet.iter().collect();
            for (w, &(_, resident, cached)) in fleet.iter().zip(&spec) {
                let got = compute_tier(TARGET, w).number();
                if got != table_tier(resident, cached) {
                    return Err(format!("{spec:?}: `{}` tier {got}", w.worker_id));
                }
            }
            let expected = spec
                .iter()
                .enumerate()
                .filter(|(_, s)| s.0)
                .min_by_key(|(i, s)| (table_tier(s.1, s.2), *i));
            match (
                select_load_target(TARGET, &refs, RankingStrategy::Fifo),
                expected,
            ) {
                (Ok(plan), Some((i, s))) => {
                    let other = s.1.filter(|r| *r != TARGET).map(str::to_string);
                    if plan.worker_id != format!("w{i}")
                        || plan.tier.number() != table_tier(s.1, s.2)
                        || plan.unload_first != other
                        || plan.is_noop() != (plan.tier == ResidencyTier::Resident)
                    {
                        return Err(format!("{spec:?}: got {plan:?}, want w{i}"));
                    }
                }
                (Err(_), None) => {}
                (got, want) => return Err(format!("{spec:?}: got {got:?}, want {want:?}")),
            }
            checked += 1;
            let mut pos = 0;
            while pos < n {
                idx[pos] += 1;
                if idx[pos] < st.len() {
                    break;
                }
                idx[pos] = 0;
                pos += 1;
            }
            if pos == n {
                break;
            }
        }
    }
    let s = st.len();
    if checked != s + s * s + s * s * s + s * s * s * s {
        return Err(format!("enumerated {checked} fleets"));
    }
    Ok(checked)
}
