//! Two-sided Wilcoxon signed-rank test for paired per-case scores.
//!
//! Zero differences are dropped before ranking. Ranks are carried as
//! doubled values so tied mid-ranks stay integers, which lets the small-n
//! path enumerate the exact null distribution with integer counts instead
//! of approximating it.

use super::{MetricsError, Result};

/// How the p-value was computed: exact enumeration of the signed-rank
/// null for small effective n, normal approximation with tie correction
/// otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TestMethod {
    ExactEnumeration,
    NormalApproximation,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairedTestResult {
    pub p_value: f64,
    /// min(W+, W−), the conventional reported statistic.
    pub statistic: f64,
    /// Pairs remaining after zero differences are dropped.
    pub n_effective: usize,
    /// True when every difference was zero; p is 1.0 and no ranking ran.
    pub all_zero: bool,
    pub method: TestMethod,
}

/// Largest effective n enumerated exactly. Above this the doubled-rank sum
/// n(n+1) makes enumeration needlessly wide and the normal approximation
/// is accurate.
const EXACT_LIMIT: usize = 25;

const MIN_PAIRS: usize = 6;

/// Doubled mid-ranks of `values` sorted ascending: tied groups share
/// first_rank + last_rank (1-based), exactly twice the conventional
/// mid-rank.
fn doubled_ranks(sorted: &[f64]) -> Vec<u64> {
    let n = sorted.len();
    let mut out = vec![0u64; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && sorted[j + 1] == sorted[i] {
            j += 1;
        }
        let doubled = (i as u64 + 1) + (j as u64 + 1);
        for slot in out.iter_mut().take(j + 1).skip(i) {
            *slot = doubled;
        }
        i = j + 1;
    }
    out
}

/// Counts of each achievable doubled W+ over all 2^n sign assignments.
/// Index = doubled statistic, value = number of assignments reaching it.
fn exact_null_counts(ranks: &[u64]) -> Vec<u64> {
    let total: u64 = ranks.iter().sum();
    let mut counts = vec![0u64; total as usize + 1];
    counts[0] = 1;
    for &r in ranks {
        let r = r as usize;
        for w in (r..counts.len()).rev() {
            counts[w] += counts[w - r];
        }
    }
    counts
}

/// Abramowitz-Stegun 7.1.26 rational approximation, |error| < 1.5e-7.
fn erf(x: f64) -> f64 {
    let sign = if x < 0.0 { -1.0 } else { 1.0 };
    let x = x.abs();
    let t = 1.0 / (1.0 + 0.3275911 * x);
    let poly = t
        * (0.254829592
            + t * (-0.284496736 + t * (1.421413741 + t * (-1.453152027 + t * 1.061405429))));
    sign * (1.0 - poly * (-x * x).exp())
}

fn normal_cdf(z: f64) -> f64 {
    0.5 * (1.0 + erf(z / std::f64::consts::SQRT_2))
}

/// Two-sided Wilcoxon signed-rank test on paired samples. Needs at least
/// six pairs; fewer cannot reach p < 0.05 two-sided. All-zero differences
/// are reported with p = 1.0 and the `all_zero` flag rather than an error.
pub fn paired_test(a: &[f64], b: &[f64]) -> Result<PairedTestResult> {
    if a.len() != b.len() {
        return Err(MetricsError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < MIN_PAIRS {
        return Err(MetricsError::TooFewPairs {
            min: MIN_PAIRS,
            got: a.len(),
        });
    }
    let diffs: Vec<f64> = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .filter(|d| *d != 0.0)
        .collect();
    let n = diffs.len();
    if n == 0 {
        return Ok(PairedTestResult {
            p_value: 1.0,
            statistic: 0.0,
            n_effective: 0,
            all_zero: true,
            method: TestMethod::ExactEnumeration,
        });
    }

    let mut abs_sorted: Vec<f64> = diffs.iter().map(|d| d.abs()).collect();
    abs_sorted.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let ranks = doubled_ranks(&abs_sorted);

    // Doubled rank of each difference, looked up by |d| in the sorted order.
    let rank_of = |d: f64| -> u64 {
        let idx = abs_sorted.partition_point(|v| *v < d.abs());
        ranks[idx]
    };
    let w_plus_doubled: u64 = diffs
        .iter()
        .filter(|d| **d > 0.0)
        .map(|d| rank_of(*d))
        .sum();
    let total_doubled: u64 = ranks.iter().sum();
    let w_minus_doubled = total_doubled - w_plus_doubled;
    let statistic = w_plus_doubled.min(w_minus_doubled) as f64 / 2.0;

    if n <= EXACT_LIMIT {
        let counts = exact_null_counts(&ranks);
        let denom = 2f64.powi(n as i32);
        let lo: u64 = counts[..=w_plus_doubled as usize].iter().sum();
        let hi: u64 = counts[w_plus_doubled as usize..].iter().sum();
        let p = (2.0 * (lo.min(hi) as f64) / denom).min(1.0);
        return Ok(PairedTestResult {
            p_value: p,
            statistic,
            n_effective: n,
            all_zero: false,
            method: TestMethod::ExactEnumeration,
        });
    }

    let nf = n as f64;
    let w_plus = w_plus_doubled as f64 / 2.0;
    let mean = nf * (nf + 1.0) / 4.0;
    // Tie correction: subtract (t^3 - t)/48 per tied group of size t.
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && abs_sorted[j + 1] == abs_sorted[i] {
            j += 1;
        }
        let t = (j - i + 1) as f64;
        tie_term += (t * t * t - t) / 48.0;
        i = j + 1;
    }
    let var = nf * (nf + 1.0) * (2.0 * nf + 1.0) / 24.0 - tie_term;
    let p = if var <= 0.0 {
        1.0
    } else {
        let z = (w_plus - mean) / var.sqrt();
        (2.0 * (1.0 - normal_cdf(z.abs()))).min(1.0)
    };
    Ok(PairedTestResult {
        p_value: p,
        statistic,
        n_effective: n,
        all_zero: false,
        method: TestMethod::NormalApproximation,
    })
}
