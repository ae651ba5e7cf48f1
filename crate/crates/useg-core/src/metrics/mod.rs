//! Overlap and boundary metrics, per-case aggregation, and paired
//! significance testing for segmentation evaluation.

pub mod hausdorff;
pub mod loss;
pub mod wilcoxon;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hausdorff::{hausdorff95, Hd95};
pub use loss::dice_ce_loss;
pub use wilcoxon::{paired_test, PairedTestResult, TestMethod};

pub const DICE_HISTOGRAM_BINS: usize = 20;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("mask shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("target contains values other than 0 and 1")]
    NonBinaryTarget,
    #[error("paired samples have different lengths: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("paired test needs at least {min} pairs, got {got}")]
    TooFewPairs { min: usize, got: usize },
    #[error("cannot aggregate an empty case list")]
    EmptyCaseList,
    #[error(transparent)]
    Tensor(#[from] crate::tensor::TensorError),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Strictly binary H×W mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Self {
        assert_eq!(bits.len(), h * w, "mask data does not match {h}x{w}");
        BinaryMask { h, w, bits }
    }

    /// Threshold a probability map; strictly greater, so an exact tie at
    /// the threshold stays background.
    pub fn from_probabilities(h: usize, w: usize, probs: &[f64], threshold: f64) -> Self {
        assert_eq!(probs.len(), h * w, "probability map does not match {h}x{w}");
        BinaryMask {
            h,
            w,
            bits: probs.iter().map(|&p| p > threshold).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.w + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.w + c] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }
}

fn check_shapes(pred: &BinaryMask, gt: &BinaryMask) -> Result<()> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(MetricsError::ShapeMismatch(pred.h, pred.w, gt.h, gt.w));
    }
    Ok(())
}

/// Pixel-wise confusion counts; foreground is the positive class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fneg: usize,
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    check_shapes(pred, gt)?;
    let mut c = ConfusionCounts {
        tp: 0,
        fp: 0,
        tn: 0,
        fneg: 0,
    };
    for (&p, &g) in pred.bits.iter().zip(gt.bits.iter()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fneg += 1,
        }
    }
    Ok(c)
}

/// 2|P∩G| / (|P|+|G|); both masks empty scores 1.0.
pub fn dice_score(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let denom = 2 * c.tp + c.fp + c.fneg;
    Ok(if denom == 0 {
        1.0
    } else {
        2.0 * c.tp as f64 / denom as f64
    })
}

/// |P∩G| / |P∪G|; both masks empty scores 1.0.
pub fn jaccard(pred: &BinaryMask, gt: &BinaryMask) -> Result<f64> {
    let c = confusion(pred, gt)?;
    let union = c.tp + c.fp + c.fneg;
    Ok(if union == 0 {
        1.0
    } else {
        c.tp as f64 / union as f64
    })
}

/// (sensitivity, specificity); a component whose denominator is zero
/// (ground truth lacking foreground, or lacking background) is `None`.
pub fn sensitivity_specificity(
    pred: &BinaryMask,
    gt: &BinaryMask,
) -> Result<(Option<f64>, Option<f64>)> {
    let c = confusion(pred, gt)?;
    let sens = (c.tp + c.fneg > 0).then(|| c.tp as f64 / (c.tp + c.fneg) as f64);
    let spec = (c.tn + c.fp > 0).then(|| c.tn as f64 / (c.tn + c.fp) as f64);
    Ok((sens, spec))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PerCaseMetrics {
    pub case_id: String,
    pub dice: f64,
    pub jaccard: f64,
    pub hd95: f64,
    pub hd95_defined: bool,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
}

/// All per-case metrics for one prediction/ground-truth pair.
pub fn evaluate_pair(case_id: &str, pred: &BinaryMask, gt: &BinaryMask) -> Result<PerCaseMetrics> {
    let (sensitivity, specificity) = sensitivity_specificity(pred, gt)?;
    let hd = hausdorff95(pred, gt)?;
    Ok(PerCaseMetrics {
        case_id: case_id.to_string(),
        dice: dice_score(pred, gt)?,
        jaccard: jaccard(pred, gt)?,
        hd95: hd.value,
        hd95_defined: hd.defined,
        sensitivity,
        specificity,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and population standard deviation (divisor n).
pub fn mean_std(values: &[f64]) -> MeanStd {
    if values.is_empty() {
        return MeanStd {
            mean: 0.0,
            std: 0.0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    MeanStd {
        mean,
        std: var.sqrt(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hd95Summary {
    pub mean: f64,
    pub std: f64,
    pub undefined_count: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub dice: MeanStd,
    pub jaccard: MeanStd,
    pub hd95: Hd95Summary,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub model: String,
    pub split: String,
    pub n: usize,
    pub metrics: MetricsSummary,
    pub dice_histogram: Vec<u32>,
    /// Name of the JSONL sidecar carrying one PerCaseMetrics per line.
    pub per_case: String,
}

impl MetricsReport {
    /// One row per metric, Table-style.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,mean,std\n");
        let rows = [
            ("dice", self.metrics.dice),
            ("jaccard", self.metrics.jaccard),
            (
                "hd95",
                MeanStd {
                    mean: self.metrics.hd95.mean,
                    std: self.metrics.hd95.std,
                },
            ),
            ("sensitivity", self.metrics.sensitivity),
            ("specificity", self.metrics.specificity),
        ];
        for (name, ms) in rows {
            s.push_str(&format!("{name},{:.6},{:.6}\n", ms.mean, ms.std));
        }
        s
    }
}

/// Aggregate per-case records into a report. Means use population std;
/// HD95 penalty values for undefined cases are included in the mean and
/// counted separately; sensitivity/specificity average their defined
/// cases only.
pub fn aggregate_report(
    model: &str,
    split: &str,
    cases: &[PerCaseMetrics],
) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(MetricsError::EmptyCaseList);
    }
    let dice: Vec<f64> = cases.iter().map(|c| c.dice).collect();
    let jac: Vec<f64> = cases.iter().map(|c| c.jaccard).collect();
    let hd: Vec<f64> = cases.iter().map(|c| c.hd95).collect();
    let sens: Vec<f64> = cases.iter().filter_map(|c| c.sensitivity).collect();
    let spec: Vec<f64> = cases.iter().filter_map(|c| c.specificity).collect();
    let hd_ms = mean_std(&hd);

    let mut histogram = vec![0u32; DICE_HISTOGRAM_BINS];
    for &d in &dice {
        let bin = ((d * DICE_HISTOGRAM_BINS as f64) as usize).min(DICE_HISTOGRAM_BINS - 1);
        histogram[bin] += 1;
    }

    Ok(MetricsReport {
        model: model.to_string(),
        split: split.to_string(),
        n: cases.len(),
        metrics: MetricsSummary {
            dice: mean_std(&dice),
            jaccard: mean_std(&jac),
            hd95: Hd95Summary {
                mean: hd_ms.mean,
                std: hd_ms.std,
                undefined_count: cases.iter().filter(|c| !c.hd95_defined).count(),
            },
            sensitivity: mean_std(&sens),
            specificity: mean_std(&spec),
        },
        dice_histogram: histogram,
        per_case: "per_case.jsonl".to_string(),
    })
}
