//! Paired model comparison over matched per-case records: mean deltas
//! for every metric and a Wilcoxon signed-rank test on Dice.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::metrics::{aggregate_report, paired_test, PerCaseMetrics, TestMethod};

use super::{HarnessError, Result};

/// One metric's mean under each model and the difference `b - a`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricDelta {
    pub metric: String,
    pub mean_a: f64,
    pub mean_b: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model_a: String,
    pub model_b: String,
    /// Matched case count.
    pub n: usize,
    pub deltas: Vec<MetricDelta>,
    /// Two-sided Wilcoxon signed-rank p for the paired Dice values.
    pub dice_p_value: f64,
    pub dice_statistic: f64,
    /// `exact` below the enumeration cutoff, `normal` above it.
    pub method: String,
    /// True when every Dice pair tied; p is 1.0 by convention.
    pub all_zero: bool,
}

impl ComparisonReport {
    /// Fixed-width table for terminal output.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "{} vs {} over {} cases",
            self.model_a, self.model_b, self.n
        )
        .expect("string write");
        writeln!(
            s,
            "{:<14} {:>12} {:>12} {:>12}",
            "metric", self.model_a, self.model_b, "delta"
        )
        .expect("string write");
        for d in &self.deltas {
            writeln!(
                s,
                "{:<14} {:>12.6} {:>12.6} {:>+12.6}",
                d.metric, d.mean_a, d.mean_b, d.delta
            )
            .expect("string write");
        }
        writeln!(
            s,
            "wilcoxon on dice: p = {:.6} (statistic {:.1}, {} test)",
            self.dice_p_value, self.dice_statistic, self.method
        )
        .expect("string write");
        s
    }
}

fn case_ids(cases: &[PerCaseMetrics]) -> BTreeSet<&str> {
    cases.iter().map(|c| c.case_id.as_str()).collect()
}

/// Compares two models' per-case records. Both sides must cover exactly
/// the same case ids; pairing is by id, so record order does not matter.
pub fn compare_cases(
    label_a: &str,
    cases_a: &[PerCaseMetrics],
    label_b: &str,
    cases_b: &[PerCaseMetrics],
) -> Result<ComparisonReport> {
    let ids_a = case_ids(cases_a);
    let ids_b = case_ids(cases_b);
    if ids_a.len() != cases_a.len() || ids_b.len() != cases_b.len() {
        return Err(HarnessError::CaseMismatch(
            "duplicate case ids in per-case records".into(),
        ));
    }
    if ids_a != ids_b {
        let only_a: Vec<&str> = ids_a.difference(&ids_b).copied().collect();
        let only_b: Vec<&str> = ids_b.difference(&ids_a).copied().collect();
        return Err(HarnessError::CaseMismatch(format!(
            "only in {label_a}: [{}]; only in {label_b}: [{}]",
            only_a.join(", "),
            only_b.join(", ")
        )));
    }

    let sort_by_id = |cases: &[PerCaseMetrics]| -> Vec<PerCaseMetrics> {
        let mut v = cases.to_vec();
        v.sort_by(|x, y| x.case_id.cmp(&y.case_id));
        v
    };
    let a = sort_by_id(cases_a);
    let b = sort_by_id(cases_b);

    let summary_a = aggregate_report(label_a, "compare", &a)?.metrics;
    let summary_b = aggregate_report(label_b, "compare", &b)?.metrics;
    let deltas = vec![
        MetricDelta {
            metric: "dice".into(),
            mean_a: summary_a.dice.mean,
            mean_b: summary_b.dice.mean,
            delta: summary_b.dice.mean - summary_a.dice.mean,
        },
        MetricDelta {
            metric: "jaccard".into(),
            mean_a: summary_a.jaccard.mean,
            mean_b: summary_b.jaccard.mean,
            delta: summary_b.jaccard.mean - summary_a.jaccard.mean,
        },
        MetricDelta {
            metric: "hd95".into(),
            mean_a: summary_a.hd95.mean,
            mean_b: summary_b.hd95.mean,
            delta: summary_b.hd95.mean - summary_a.hd95.mean,
        },
        MetricDelta {
            metric: "sensitivity".into(),
            mean_a: summary_a.sensitivity.mean,
            mean_b: summary_b.sensitivity.mean,
            delta: summary_b.sensitivity.mean - summary_a.sensitivity.mean,
        },
        MetricDelta {
            metric: "specificity".into(),
            mean_a: summary_a.specificity.mean,
            mean_b: summary_b.specificity.mean,
            delta: summary_b.specificity.mean - summary_a.specificity.mean,
        },
    ];

    let dice_a: Vec<f64> = a.iter().map(|c| c.dice).collect();
    let dice_b: Vec<f64> = b.iter().map(|c| c.dice).collect();
    let test = paired_test(&dice_a, &dice_b)?;

    Ok(ComparisonReport {
        model_a: label_a.to_string(),
        model_b: label_b.to_string(),
        n: a.len(),
        deltas,
        dice_p_value: test.p_value,
        dice_statistic: test.statistic,
        method: match test.method {
            TestMethod::ExactEnumeration => "exact".to_string(),
            TestMethod::NormalApproximation => "normal".to_string(),
        },
        all_zero: test.all_zero,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn case(id: &str, dice: f64) -> PerCaseMetrics {
        PerCaseMetrics {
            case_id: id.to_string(),
            dice,
            jaccard: dice / (2.0 - dice),
            hd95: 1.0 - dice,
            hd95_defined: true,
            sensitivity: Some(dice),
            specificity: Some(1.0),
        }
    }

    fn cases(dices: &[f64]) -> Vec<PerCaseMetrics> {
        dices
            .iter()
            .enumerate()
            .map(|(i, &d)| case(&format!("case{i:03}"), d))
            .collect()
    }

    #[test]
    fn self_comparison_reports_zero_deltas_and_p_one() {
        let side = cases(&[0.5, 0.7, 0.9, 0.4, 0.6, 0.8]);
        let report = compare_cases("m", &side, "m", &side).unwrap();
        assert!(report.deltas.iter().all(|d| d.delta == 0.0));
        assert_eq!(report.dice_p_value, 1.0);
        assert!(report.all_zero);
        assert_eq!(report.n, 6);
    }

    #[test]
    fn uniform_improvement_is_directional_and_significant() {
        let base = cases(&[0.50, 0.55, 0.60, 0.52, 0.58, 0.54, 0.57, 0.53]);
        let lifted: Vec<PerCaseMetrics> = base
            .iter()
            .map(|c| {
                let mut up = c.clone();
                up.dice += 0.2;
                up.case_id = c.case_id.clone();
                up
            })
            .collect();
        let report = compare_cases("base", &base, "lifted", &lifted).unwrap();
        let dice = &report.deltas[0];
        assert_eq!(dice.metric, "dice");
        assert!((dice.delta - 0.2).abs() < 1e-12);
        assert_eq!(report.dice_p_value, 0.0078125);
        assert_eq!(report.method, "exact");
    }

    #[test]
    fn pairing_is_by_case_id_not_record_order() {
        let side_a = cases(&[0.5, 0.6, 0.7, 0.8, 0.9, 0.4]);
        let mut side_b = side_a.clone();
        side_b.reverse();
        let report = compare_cases("a", &side_a, "b", &side_b).unwrap();
        assert!(report.deltas.iter().all(|d| d.delta == 0.0));
        assert_eq!(report.dice_p_value, 1.0);
    }

    #[test]
    fn mismatched_case_sets_name_the_offenders() {
        let side_a = cases(&[0.5, 0.6, 0.7, 0.8, 0.9, 0.4]);
        let mut side_b = side_a.clone();
        side_b[2].case_id = "rogue".into();
        let err = compare_cases("a", &side_a, "b", &side_b).unwrap_err();
        match err {
            HarnessError::CaseMismatch(msg) => {
                assert!(msg.contains("case002"), "message was: {msg}");
                assert!(msg.contains("rogue"), "message was: {msg}");
            }
            other => panic!("expected CaseMismatch, got {other}"),
        }
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let mut side = cases(&[0.5, 0.6, 0.7, 0.8, 0.9, 0.4]);
        side[1].case_id = side[0].case_id.clone();
        let err = compare_cases("a", &side, "b", &side).unwrap_err();
        assert!(matches!(err, HarnessError::CaseMismatch(_)));
    }

    #[test]
    fn table_rendering_carries_every_metric_row() {
        let side = cases(&[0.5, 0.7, 0.9, 0.4, 0.6, 0.8]);
        let report = compare_cases("a", &side, "b", &side).unwrap();
        let table = report.to_table();
        for metric in ["dice", "jaccard", "hd95", "sensitivity", "specificity"] {
            assert!(table.contains(metric), "missing {metric} in:\n{table}");
        }
        assert!(table.contains("wilcoxon"));
    }
}
