//! Confusion-matrix tallies and the yes/no hallucination score suite.
//!
//! Every score is a ratio in `[0, 1]`. A ratio whose denominator is zero is
//! defined as `0` so degenerate predictors (always "yes") still produce a
//! finite report. Unresolved answers count as wrong for their gold class:
//! an unresolved answer to a gold-yes question behaves like a false negative,
//! and one to a gold-no question like a false positive.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labels::{GoldLabel, Prediction};

/// Maximum distance between a published ratio and the one re-derived from a
/// reconstructed confusion matrix.
pub const RECONSTRUCTION_TOLERANCE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("no records")]
    NoRecords,
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("inconsistent row: {metric} re-derives to {derived:.4}, published {published:.4}")]
    InconsistentRow {
        metric: &'static str,
        published: f64,
        derived: f64,
    },
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("baseline macro F1 is zero; relative improvement is undefined")]
    ZeroBaseline,
    #[error("no sub-task reports to aggregate")]
    NoSubtasks,
}

/// Prediction tallies for one group of trials.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "tn")]
    pub true_neg: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
    pub unresolved_gold_yes: u64,
    pub unresolved_gold_no: u64,
}

impl ConfusionMatrix {
    pub fn new(true_pos: u64, false_pos: u64, true_neg: u64, false_neg: u64) -> Self {
        Self {
            true_pos,
            false_pos,
            true_neg,
            false_neg,
            ..Self::default()
        }
    }

    pub fn with_unresolved(mut self, gold_yes: u64, gold_no: u64) -> Self {
        self.unresolved_gold_yes = gold_yes;
        self.unresolved_gold_no = gold_no;
        self
    }

    pub fn record(&mut self, gold: GoldLabel, prediction: Prediction) {
        match (gold, prediction) {
            (GoldLabel::Yes, Prediction::Yes) => self.true_pos += 1,
            (GoldLabel::Yes, Prediction::No) => self.false_neg += 1,
            (GoldLabel::Yes, Prediction::Unresolved) => self.unresolved_gold_yes += 1,
            (GoldLabel::No, Prediction::Yes) => self.false_pos += 1,
            (GoldLabel::No, Prediction::No) => self.true_neg += 1,
            (GoldLabel::No, Prediction::Unresolved) => self.unresolved_gold_no += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_pos
            + self.false_pos
            + self.true_neg
            + self.false_neg
            + self.unresolved_gold_yes
            + self.unresolved_gold_no
    }

    pub fn unresolved(&self) -> u64 {
        self.unresolved_gold_yes + self.unresolved_gold_no
    }

    pub fn gold_yes(&self) -> u64 {
        self.true_pos + self.false_neg + self.unresolved_gold_yes
    }

    pub fn gold_no(&self) -> u64 {
        self.true_neg + self.false_pos + self.unresolved_gold_no
    }

    /// False negatives including unresolved gold-yes answers.
    pub fn effective_false_neg(&self) -> u64 {
        self.false_neg + self.unresolved_gold_yes
    }

    /// False positives including unresolved gold-no answers.
    pub fn effective_false_pos(&self) -> u64 {
        self.false_pos + self.unresolved_gold_no
    }

    /// The matrix obtained by relabeling every gold and predicted yes as no
    /// and vice versa.
    pub fn swapped(&self) -> Self {
        Self {
            true_pos: self.true_neg,
            false_pos: self.false_neg,
            true_neg: self.true_pos,
            false_neg: self.false_pos,
            unresolved_gold_yes: self.unresolved_gold_no,
            unresolved_gold_no: self.unresolved_gold_yes,
        }
    }
}

impl std::ops::AddAssign for ConfusionMatrix {
    fn add_assign(&mut self, rhs: Self) {
        self.true_pos += rhs.true_pos;
        self.false_pos += rhs.false_pos;
        self.true_neg += rhs.true_neg;
        self.false_neg += rhs.false_neg;
        self.unresolved_gold_yes += rhs.unresolved_gold_yes;
        self.unresolved_gold_no += rhs.unresolved_gold_no;
    }
}

/// The full score suite for one group of trials.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall_yes: f64,
    pub recall_no: f64,
    pub f1_pos: f64,
    pub f1_neg: f64,
    pub macro_f1: f64,
    pub h_recall: f64,
    pub phd_score: f64,
    pub unresolved_rate: f64,
}

impl MetricsReport {
    /// The seven published columns in table order: accuracy, precision,
    /// recall, F1_P, F1_N, macro F1, PhD score.
    pub fn table_columns(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.precision,
            self.recall_yes,
            self.f1_pos,
            self.f1_neg,
            self.macro_f1,
            self.phd_score,
        ]
    }

    pub fn display_columns(&self) -> [DisplayScore; 7] {
        self.table_columns().map(round_display)
    }
}

/// Relative change in macro F1 of a treated run over its baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImprovementDelta {
    pub baseline_macro_f1: f64,
    pub treated_macro_f1: f64,
    pub delta_percent: f64,
}

impl ImprovementDelta {
    pub fn from_macro_f1(baseline: f64, treated: f64) -> Result<Self, MetricsError> {
        if baseline <= 0.0 {
            return Err(MetricsError::ZeroBaseline);
        }
        Ok(Self {
            baseline_macro_f1: baseline,
            treated_macro_f1: treated,
            delta_percent: 100.0 * (treated - baseline) / baseline,
        })
    }
}

fn ratio(numerator: u64, denominator: u64) -> f64 {
    if denominator == 0 {
        0.0
    } else {
        numerator as f64 / denominator as f64
    }
}

/// Harmonic mean of two ratios, `0` when both are zero.
pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    let sum = a + b;
    if sum == 0.0 {
        0.0
    } else {
        2.0 * a * b / sum
    }
}

/// Counts (gold, prediction) pairs into a confusion matrix.
pub fn tally<I>(records: I) -> Result<ConfusionMatrix, MetricsError>
where
    I: IntoIterator<Item = (GoldLabel, Prediction)>,
{
    let mut cm = ConfusionMatrix::default();
    for (gold, prediction) in records {
        cm.record(gold, prediction);
    }
    if cm.total() == 0 {
        return Err(MetricsError::NoRecords);
    }
    Ok(cm)
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::EmptyMatrix);
    }
    let fn_eff = cm.effective_false_neg();
    let fp_eff = cm.effective_false_pos();

    let accuracy = ratio(cm.true_pos + cm.true_neg, total);
    let precision = ratio(cm.true_pos, cm.true_pos + fp_eff);
    let recall_yes = ratio(cm.true_pos, cm.true_pos + fn_eff);
    let precision_no = ratio(cm.true_neg, cm.true_neg + fn_eff);
    let recall_no = ratio(cm.true_neg, cm.true_neg + fp_eff);

    let f1_pos = harmonic_mean(precision, recall_yes);
    let f1_neg = harmonic_mean(precision_no, recall_no);
    let h_recall = harmonic_mean(recall_yes, recall_no);

    Ok(MetricsReport {
        accuracy,
        precision,
        recall_yes,
        recall_no,
        f1_pos,
        f1_neg,
        macro_f1: (f1_pos + f1_neg) / 2.0,
        h_recall,
        phd_score: harmonic_mean(h_recall, accuracy),
        unresolved_rate: ratio(cm.unresolved(), total),
    })
}

/// Rebuilds the confusion matrix behind a published (accuracy, precision,
/// recall) row, given the class sizes it was evaluated on.
pub fn reconstruct_confusion(
    accuracy: f64,
    precision: f64,
    recall: f64,
    n_yes: u64,
    n_no: u64,
) -> Result<ConfusionMatrix, MetricsError> {
    if n_yes == 0 || n_no == 0 {
        return Err(MetricsError::InvalidInput(
            "both class sizes must be positive".into(),
        ));
    }
    for (name, value) in [
        ("accuracy", accuracy),
        ("precision", precision),
        ("recall", recall),
    ] {
        if !(0.0..=1.0).contains(&value) {
            return Err(MetricsError::InvalidInput(format!(
                "{name} {value} outside [0, 1]"
            )));
        }
    }

    let total = n_yes + n_no;
    let tp = (recall * n_yes as f64).round() as u64;
    let fp = if precision > 0.0 {
        (tp as f64 / precision - tp as f64).round() as u64
    } else {
        // Precision 0 leaves fp unconstrained by the precision formula; the
        // accuracy fixes tn instead.
        let correct = (accuracy * total as f64).round() as u64;
        n_no.saturating_sub(correct.saturating_sub(tp))
    };
    if fp > n_no {
        return Err(MetricsError::InconsistentRow {
            metric: "precision",
            published: precision,
            derived: ratio(tp, tp + n_no),
        });
    }
    let cm = ConfusionMatrix::new(tp, fp, n_no - fp, n_yes - tp);

    let checks = [
        ("accuracy", accuracy, ratio(tp + cm.true_neg, total)),
        ("precision", precision, ratio(tp, tp + fp)),
        ("recall", recall, ratio(tp, n_yes)),
    ];
    for (metric, published, derived) in checks {
        if (published - derived).abs() > RECONSTRUCTION_TOLERANCE {
            return Err(MetricsError::InconsistentRow {
                metric,
                published,
                derived,
            });
        }
    }
    Ok(cm)
}

pub fn relative_improvement(
    baseline: &MetricsReport,
    treated: &MetricsReport,
) -> Result<ImprovementDelta, MetricsError> {
    ImprovementDelta::from_macro_f1(baseline.macro_f1, treated.macro_f1)
}

/// Field-wise arithmetic mean over sub-task reports.
///
/// `macro_f1` is taken as the mean of the averaged F1 pair, which equals the
/// mean of the per-task macro F1 values and keeps the identity exact. The PhD
/// score is averaged directly rather than re-derived.
pub fn aggregate_subtasks(
    reports: &BTreeMap<String, MetricsReport>,
) -> Result<MetricsReport, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::NoSubtasks);
    }
    let n = reports.len() as f64;
    let mean = |field: fn(&MetricsReport) -> f64| reports.values().map(field).sum::<f64>() / n;

    let f1_pos = mean(|r| r.f1_pos);
    let f1_neg = mean(|r| r.f1_neg);
    Ok(MetricsReport {
        accuracy: mean(|r| r.accuracy),
        precision: mean(|r| r.precision),
        recall_yes: mean(|r| r.recall_yes),
        recall_no: mean(|r| r.recall_no),
        f1_pos,
        f1_neg,
        macro_f1: (f1_pos + f1_neg) / 2.0,
        h_recall: mean(|r| r.h_recall),
        phd_score: mean(|r| r.phd_score),
        unresolved_rate: mean(|r| r.unresolved_rate),
    })
}

/// A score on the ×100 scale with one decimal, stored as integer tenths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DisplayScore(i64);

impl DisplayScore {
    pub fn from_tenths(tenths: i64) -> Self {
        Self(tenths)
    }

    /// Parses an already-displayed value such as `84.9`.
    pub fn from_display(value: f64) -> Self {
        Self((value * 10.0).round() as i64)
    }

    pub fn tenths(self) -> i64 {
        self.0
    }

    pub fn as_f64(self) -> f64 {
        self.0 as f64 / 10.0
    }

    /// Absolute difference in tenths of a display unit.
    pub fn distance(self, other: DisplayScore) -> i64 {
        (self.0 - other.0).abs()
    }
}

impl fmt::Display for DisplayScore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sign = if self.0 < 0 { "-" } else { "" };
        let abs = self.0.abs();
        write!(f, "{sign}{}.{}", abs / 10, abs % 10)
    }
}

/// Ratio → ×100, rounded half-up to one decimal.
pub fn round_display(value: f64) -> DisplayScore {
    // The epsilon absorbs binary representation error so that decimal ties
    // such as 0.8445 round up.
    DisplayScore((value * 1000.0 + 0.5 + 1e-9).floor() as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use GoldLabel::{No, Yes};

    fn display(report: &MetricsReport) -> Vec<String> {
        report
            .display_columns()
            .iter()
            .map(ToString::to_string)
            .collect()
    }

    #[test]
    fn tally_perfect_pair() {
        let cm = tally([(Yes, Prediction::Yes), (No, Prediction::No)]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(1, 0, 1, 0));
    }

    #[test]
    fn tally_total_confusion() {
        let cm = tally([(Yes, Prediction::No), (No, Prediction::Yes)]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(0, 1, 0, 1));
    }

    #[test]
    fn tally_single_unresolved() {
        let cm = tally([(Yes, Prediction::Unresolved)]).unwrap();
        assert_eq!(cm, ConfusionMatrix::default().with_unresolved(1, 0));
        assert_eq!(cm.total(), 1);
    }

    #[test]
    fn tally_rejects_empty_input() {
        assert_eq!(tally(std::iter::empty()), Err(MetricsError::NoRecords));
    }

    #[test]
    fn gpt4o_original_row() {
        let report = compute_metrics(&ConfusionMatrix::new(40, 5, 45, 10)).unwrap();
        assert_eq!(
            display(&report),
            ["85.0", "88.9", "80.0", "84.2", "85.7", "85.0", "84.9"]
        );
    }

    #[test]
    fn perfect_classifier_scores_100() {
        let report = compute_metrics(&ConfusionMatrix::new(50, 0, 50, 0)).unwrap();
        assert!(display(&report).iter().all(|s| s == "100.0"));
        assert_eq!(round_display(report.h_recall).to_string(), "100.0");
    }

    #[test]
    fn always_yes_predictor() {
        let report = compute_metrics(&ConfusionMatrix::new(50, 50, 0, 0)).unwrap();
        assert_eq!(round_display(report.recall_yes).to_string(), "100.0");
        assert_eq!(round_display(report.precision).to_string(), "50.0");
        assert_eq!(round_display(report.f1_pos).to_string(), "66.7");
        assert_eq!(round_display(report.f1_neg).to_string(), "0.0");
        assert_eq!(round_display(report.macro_f1).to_string(), "33.3");
        assert_eq!(report.h_recall, 0.0);
        assert_eq!(report.phd_score, 0.0);
    }

    #[test]
    fn unresolved_counts_against_gold_class() {
        let cm = ConfusionMatrix::new(10, 0, 10, 0).with_unresolved(5, 5);
        let report = compute_metrics(&cm).unwrap();
        assert_eq!(report.accuracy, 20.0 / 30.0);
        assert_eq!(report.recall_yes, 10.0 / 15.0);
        assert_eq!(report.precision, 10.0 / 15.0);
        assert_eq!(report.unresolved_rate, 10.0 / 30.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert_eq!(
            compute_metrics(&ConfusionMatrix::default()),
            Err(MetricsError::EmptyMatrix)
        );
    }

    #[test]
    fn reconstructs_gpt4o_row() {
        let cm = reconstruct_confusion(0.850, 0.889, 0.800, 50, 50).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(40, 5, 45, 10));
    }

    #[test]
    fn reconstructs_identity() {
        let cm = reconstruct_confusion(1.0, 1.0, 1.0, 50, 50).unwrap();
        assert_eq!(cm, ConfusionMatrix::new(50, 0, 50, 0));
    }

    #[test]
    fn reconstructs_pope_random_original_row() {
        let cm = reconstruct_confusion(0.879, 0.846, 0.925, 1500, 1500).unwrap();
        let report = compute_metrics(&cm).unwrap();
        assert_eq!(round_display(report.f1_pos).to_string(), "88.4");
    }

    #[test]
    fn reconstruction_names_offending_metric() {
        // P and R pin tp=40, fp=5, so tn=45 and accuracy must be 0.85.
        let err = reconstruct_confusion(0.60, 0.889, 0.800, 50, 50).unwrap_err();
        match err {
            MetricsError::InconsistentRow { metric, .. } => assert_eq!(metric, "accuracy"),
            other => panic!("unexpected error {other:?}"),
        }
        assert!(err.to_string().contains("accuracy"));
    }

    #[test]
    fn reconstruction_rejects_impossible_precision() {
        let err = reconstruct_confusion(0.5, 0.1, 1.0, 50, 50).unwrap_err();
        assert!(matches!(
            err,
            MetricsError::InconsistentRow {
                metric: "precision",
                ..
            }
        ));
    }

    fn with_macro(macro_f1: f64) -> MetricsReport {
        let mut r = compute_metrics(&ConfusionMatrix::new(1, 0, 1, 0)).unwrap();
        r.macro_f1 = macro_f1;
        r
    }

    #[test]
    fn relative_improvement_examples() {
        let d = relative_improvement(&with_macro(0.788), &with_macro(0.845)).unwrap();
        assert!((d.delta_percent - 7.22).abs() <= 0.1, "{}", d.delta_percent);
        assert!((d.delta_percent - 7.2335).abs() < 1e-3);

        let d = relative_improvement(&with_macro(0.74), &with_macro(0.838)).unwrap();
        assert!(
            (d.delta_percent - 13.21).abs() <= 0.1,
            "{}",
            d.delta_percent
        );

        let d = relative_improvement(&with_macro(0.6), &with_macro(0.6)).unwrap();
        assert_eq!(d.delta_percent, 0.0);
    }

    #[test]
    fn relative_improvement_rejects_zero_baseline() {
        assert_eq!(
            relative_improvement(&with_macro(0.0), &with_macro(0.5)),
            Err(MetricsError::ZeroBaseline)
        );
    }

    #[test]
    fn aggregate_is_idempotent_on_identical_reports() {
        let report = compute_metrics(&ConfusionMatrix::new(40, 5, 45, 10)).unwrap();
        let map: BTreeMap<_, _> = ["attribute", "counting", "object", "positional", "sentiment"]
            .into_iter()
            .map(|k| (k.to_string(), report))
            .collect();
        let agg = aggregate_subtasks(&map).unwrap();
        for (a, b) in agg.table_columns().iter().zip(report.table_columns()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_takes_arithmetic_mean_of_phd() {
        let mut a = compute_metrics(&ConfusionMatrix::new(1, 0, 1, 0)).unwrap();
        let mut b = a;
        a.phd_score = 0.2;
        b.phd_score = 0.8;
        let map = BTreeMap::from([("a".to_string(), a), ("b".to_string(), b)]);
        assert!((aggregate_subtasks(&map).unwrap().phd_score - 0.5).abs() < 1e-15);
    }

    #[test]
    fn aggregate_rejects_empty_map() {
        assert_eq!(
            aggregate_subtasks(&BTreeMap::new()),
            Err(MetricsError::NoSubtasks)
        );
    }

    #[test]
    fn display_rounding() {
        assert_eq!(round_display(0.849625).to_string(), "85.0");
        assert_eq!(round_display(0.0).to_string(), "0.0");
        assert_eq!(round_display(0.84211).to_string(), "84.2");
        assert_eq!(round_display(0.8445).to_string(), "84.5");
        assert_eq!(round_display(1.0).to_string(), "100.0");
        assert_eq!(DisplayScore::from_display(84.9).tenths(), 849);
    }
}
