//! Split evaluation: run the model over every case in a split and write
//! the aggregate report (JSON and CSV) plus a per-case JSONL sidecar.

use std::fmt::Write as _;
use std::path::Path;

use crate::data::{Sample, Split};
use crate::metrics::{aggregate_report, evaluate_pair, MetricsReport, PerCaseMetrics};
use crate::tensor::Elem;

use super::model::{images_tensor, Model};
use super::{HarnessError, Result};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_CSV: &str = "report.csv";
pub const PER_CASE_FILE: &str = "per_case.jsonl";

/// Aggregate report plus the per-case records behind it.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub cases: Vec<PerCaseMetrics>,
}

/// Segments every sample of `split` and scores it against ground truth.
/// Cases keep dataset order; `label` names the model in the report.
pub fn evaluate_model<T: Elem>(
    model: &Model<T>,
    samples: &[Sample],
    split: Split,
    label: &str,
    batch_size: usize,
) -> Result<Evaluation> {
    if batch_size == 0 {
        return Err(HarnessError::Config("batch_size must be >= 1".into()));
    }
    let chosen: Vec<&Sample> = samples.iter().filter(|s| s.split == split).collect();
    if chosen.is_empty() {
        return Err(HarnessError::SplitEmpty(split.as_str().to_string()));
    }

    let mut cases = Vec::with_capacity(chosen.len());
    for chunk in chosen.chunks(batch_size) {
        let images = images_tensor::<T>(chunk, model.config.image_size)?;
        let captions: Vec<&str> = chunk.iter().map(|s| s.caption.as_str()).collect();
        let seg = model.segment(&images, &captions)?;
        for (sample, pred) in chunk.iter().zip(&seg.masks) {
            cases.push(evaluate_pair(&sample.sample_id, pred, &sample.mask)?);
        }
    }

    let report = aggregate_report(label, split.as_str(), &cases)?;
    Ok(Evaluation { report, cases })
}

/// Writes `report.json`, `report.csv`, and `per_case.jsonl` into `dir`.
pub fn write_evaluation(ev: &Evaluation, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut json = serde_json::to_string_pretty(&ev.report)?;
    json.push('\n');
    std::fs::write(dir.join(REPORT_JSON), json)?;
    std::fs::write(dir.join(REPORT_CSV), ev.report.to_csv())?;

    let mut lines = String::new();
    for case in &ev.cases {
        writeln!(lines, "{}", serde_json::to_string(case)?).expect("string write");
    }
    std::fs::write(dir.join(PER_CASE_FILE), lines)?;
    Ok(())
}

/// Reads a per-case JSONL sidecar back into records.
pub fn load_per_case(path: &Path) -> Result<Vec<PerCaseMetrics>> {
    let body = std::fs::read_to_string(path)?;
    let mut cases = Vec::new();
    for line in body.lines() {
        if line.trim().is_empty() {
            continue;
        }
        cases.push(serde_json::from_str(line)?);
    }
    Ok(cases)
}
