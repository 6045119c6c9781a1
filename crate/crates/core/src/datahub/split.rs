use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::manifest::{Manifest, Split};
use crate::error::{Error, Result};

pub const DEFAULT_RATIOS: [f64; 3] = [0.6, 0.2, 0.2];

/// Integer allocation of `m` items by largest remainder. Ties in the
/// fractional part go to the earlier bucket.
pub fn largest_remainder(m: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * m as f64);
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = m - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Per-class (train, val, test) sizes.
pub fn class_allocation(m: usize, ratios: [f64; 3]) -> [usize; 3] {
    match m {
        0 => [0, 0, 0],
        1 => [1, 0, 0],
        2 => [1, 0, 1],
        _ => largest_remainder(m, ratios),
    }
}

/// Assigns train/val/test per class: each class is shuffled with a seeded
/// generator and cut by [`class_allocation`]. Record order is preserved.
pub fn stratified_split(manifest: &Manifest, ratios: [f64; 3], seed: u64) -> Result<Manifest> {
    if manifest.is_empty() {
        return Err(Error::Contract("cannot split an empty manifest".into()));
    }
    if ratios.iter().any(|r| r.is_nan() || *r < 0.0) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut by_class: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_class.entry(r.class_name.as_str()).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = vec![Split::Train; manifest.len()];
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        let [train, val, _] = class_allocation(members.len(), ratios);
        for (pos, &idx) in members.iter().enumerate() {
            assigned[idx] = if pos < train {
                Split::Train
            } else if pos < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }

    let mut out = manifest.clone();
    for (record, split) in out.records.iter_mut().zip(assigned) {
        record.split = Some(split);
    }
    Ok(out)
}
