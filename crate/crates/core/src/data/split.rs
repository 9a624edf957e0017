use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DataError, TrafficRecord};

/// Stratified train/test partition.
///
/// Strata are `(task_id, label)` pairs. The train set gets `round(ratio · N)`
/// records in total, allotted per stratum by largest remainder, and every
/// stratum keeps at least one record on each side. Both outputs preserve
/// input order.
pub fn split_dataset(
    records: &[TrafficRecord],
    ratio: f64,
    seed: u64,
) -> Result<(Vec<TrafficRecord>, Vec<TrafficRecord>), DataError> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(DataError::Split(format!("ratio {ratio} outside (0, 1)")));
    }
    let mut strata: BTreeMap<(&str, &str), Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        strata
            .entry((r.task_id.as_str(), r.label.as_str()))
            .or_default()
            .push(i);
    }
    for ((task, label), members) in &strata {
        if members.len() < 2 {
            return Err(DataError::Split(format!(
                "class `{label}` of task `{task}` has {} sample(s); need at least 2",
                members.len()
            )));
        }
    }

    let mut quota: Vec<usize> = Vec::with_capacity(strata.len());
    let mut remainders: Vec<(f64, usize)> = Vec::new();
    for (k, members) in strata.values().enumerate() {
        let exact = ratio * members.len() as f64;
        let base = (exact.floor() as usize).clamp(1, members.len() - 1);
        quota.push(base);
        if base + 1 <= members.len() - 1 {
            remainders.push((exact - base as f64, k));
        }
    }
    let target = (ratio * records.len() as f64).round() as usize;
    let mut assigned: usize = quota.iter().sum();
    remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, k) in &remainders {
        if assigned >= target {
            break;
        }
        quota[k] += 1;
        assigned += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; records.len()];
    for (members, &n_train) in strata.values().zip(&quota) {
        let mut shuffled = members.clone();
        shuffled.shuffle(&mut rng);
        for &i in &shuffled[..n_train] {
            in_train[i] = true;
        }
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (r, &t) in records.iter().zip(&in_train) {
        if t {
            train.push(r.clone());
        } else {
            test.push(r.clone());
        }
    }
    Ok((train, test))
}
