//! Patient-level split and fold assignment.
//!
//! Patients are ordered by `fnv1a64(patient_id) XOR seed` (ties broken
//! by id), the train/val/test splits are consecutive prefixes of that
//! order, and folds are positions modulo `n_folds`, which balances fold
//! sizes over the train+val prefix to within one patient. The hash is
//! fixed so assignments reproduce across runs and platforms.

use super::{DataError, Result, Split};

/// 64-bit FNV-1a over raw bytes.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    /// Split per patient, indexed like the input id list.
    pub split: Vec<Split>,
    /// Fold per patient, indexed like the input id list.
    pub fold: Vec<u8>,
    /// Patient indices in hashed order: train prefix, then val, then test.
    pub hashed_order: Vec<usize>,
}

/// Assign splits and folds at patient granularity. `ratios` are the
/// train/val fractions of the patient list (test takes the remainder,
/// and the third ratio is validated against it).
pub fn make_splits(
    patient_ids: &[String],
    ratios: (f64, f64, f64),
    n_folds: usize,
    seed: u64,
) -> Result<SplitAssignment> {
    let n = patient_ids.len();
    if n_folds == 0 {
        return Err(DataError::InvalidConfig(
            "fold count must be positive".into(),
        ));
    }
    if n < n_folds {
        return Err(DataError::TooFewPatients {
            needed: n_folds,
            got: n,
        });
    }
    let (rt, rv, rs) = ratios;
    if rt < 0.0 || rv < 0.0 || rs < 0.0 || rt + rv + rs > 1.0 + 1e-9 {
        return Err(DataError::InvalidConfig(format!(
            "split ratios must be non-negative and sum to at most 1, got {ratios:?}"
        )));
    }
    {
        let mut sorted: Vec<&String> = patient_ids.iter().collect();
        sorted.sort();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::InvalidConfig("duplicate patient ids".into()));
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (fnv1a64(patient_ids[i].as_bytes()) ^ seed, &patient_ids[i]));

    let n_train = (rt * n as f64).round() as usize;
    let n_val = (rv * n as f64).round() as usize;
    if n_train + n_val > n {
        return Err(DataError::InvalidConfig(format!(
            "train+val ratios cover {} of {} patients",
            n_train + n_val,
            n
        )));
    }

    let mut split = vec![Split::Test; n];
    let mut fold = vec![0u8; n];
    for (pos, &idx) in order.iter().enumerate() {
        split[idx] = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        fold[idx] = (pos % n_folds) as u8;
    }
    Ok(SplitAssignment {
        split,
        fold,
        hashed_order: order,
    })
}
