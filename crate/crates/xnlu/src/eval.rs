//! Metrics: intent accuracy, entity-level micro F-score over exact span
//! matches, the Overall score (mean of accuracy and F), and a two-tailed
//! two-proportion z-test.
//!
//! The z-test applies to accuracy-style proportions (correct out of total
//! independent trials). F-scores are not proportions of independent trials,
//! so no significance machinery is offered for them.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tagging::{self, TaggingError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty input")]
    EmptyInput,
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("percentage {0} outside [0, 100]")]
    PercentOutOfRange(f64),
    #[error("z-test requires k <= n and n >= 1 (got k1={k1}, n1={n1}, k2={k2}, n2={n2})")]
    BadCounts {
        k1: usize,
        n1: usize,
        k2: usize,
        n2: usize,
    },
    #[error(transparent)]
    Tagging(#[from] TaggingError),
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Raw counts behind a [`MetricsReport`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MetricCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub n_intents_correct: usize,
    pub n_intents_total: usize,
}

/// One evaluation run. Ratios live in [0, 1]; multiply by 100 for
/// table-style percentages (see [`MetricsReport::summary_line`]).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub intent_accuracy: f64,
    pub entity_precision: f64,
    pub entity_recall: f64,
    pub entity_f1: f64,
    pub overall: f64,
    pub counts: MetricCounts,
}

impl MetricsReport {
    pub fn from_counts(counts: MetricCounts) -> MetricsReport {
        let acc = if counts.n_intents_total == 0 {
            0.0
        } else {
            counts.n_intents_correct as f64 / counts.n_intents_total as f64
        };
        let (p, r, f1) = prf(counts.tp, counts.fp, counts.fn_);
        MetricsReport {
            intent_accuracy: acc,
            entity_precision: p,
            entity_recall: r,
            entity_f1: f1,
            overall: (acc + f1) / 2.0,
            counts,
        }
    }

    /// Percentages rounded to one decimal, for human-readable output.
    pub fn summary_line(&self) -> String {
        format!(
            "acc {:.1}  P {:.1}  R {:.1}  F {:.1}  overall {:.1}",
            self.intent_accuracy * 100.0,
            self.entity_precision * 100.0,
            self.entity_recall * 100.0,
            self.entity_f1 * 100.0,
            self.overall * 100.0
        )
    }
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Fraction of exactly matching intent predictions.
pub fn intent_accuracy(pred: &[usize], gold: &[usize]) -> Result<f64> {
    if pred.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    if pred.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: pred.len(),
            right: gold.len(),
        });
    }
    let correct = pred.iter().zip(gold).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / pred.len() as f64)
}

/// Corpus-level (tp, fp, fn) over exact span matches: predicted IO tags pass
/// through B-restoration, both sides through span extraction, and a predicted
/// span counts as a true positive iff (start, end, type) all match.
pub fn entity_counts(
    pred_io_tags: &[Vec<String>],
    gold_bio_tags: &[Vec<String>],
) -> Result<(usize, usize, usize)> {
    if pred_io_tags.len() != gold_bio_tags.len() {
        return Err(EvalError::LengthMismatch {
            left: pred_io_tags.len(),
            right: gold_bio_tags.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (pred, gold) in pred_io_tags.iter().zip(gold_bio_tags) {
        if pred.len() != gold.len() {
            return Err(EvalError::LengthMismatch {
                left: pred.len(),
                right: gold.len(),
            });
        }
        let pred_bio = tagging::restore_b_tags(pred)?;
        let pred_spans: BTreeSet<_> = tagging::extract_spans(&pred_bio)?.into_iter().collect();
        let gold_spans: BTreeSet<_> = tagging::extract_spans(gold)?.into_iter().collect();
        tp += pred_spans.intersection(&gold_spans).count();
        fp += pred_spans.difference(&gold_spans).count();
        fn_ += gold_spans.difference(&pred_spans).count();
    }
    Ok((tp, fp, fn_))
}

/// Micro-averaged (P, R, F) from corpus-level counts — never an average of
/// per-utterance F-scores.
pub fn entity_f_score(
    pred_io_tags: &[Vec<String>],
    gold_bio_tags: &[Vec<String>],
) -> Result<(f64, f64, f64)> {
    let (tp, fp, fn_) = entity_counts(pred_io_tags, gold_bio_tags)?;
    Ok(prf(tp, fp, fn_))
}

/// Overall = arithmetic mean of accuracy and F, both as percentages.
pub fn overall_score(accuracy_pct: f64, f1_pct: f64) -> Result<f64> {
    for v in [accuracy_pct, f1_pct] {
        if !(0.0..=100.0).contains(&v) {
            return Err(EvalError::PercentOutOfRange(v));
        }
    }
    Ok((accuracy_pct + f1_pct) / 2.0)
}

/// Two-proportion z-test output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub z: f64,
    pub p_two_tailed: f64,
    pub pooled_p: f64,
    /// thresholds "0.05" and "0.01"
    pub significant_at: BTreeMap<String, bool>,
    /// true when the pooled proportion is 0 or 1 (zero pooled variance)
    pub undefined: bool,
}

/// Two-tailed z-test for the difference of two proportions with pooled
/// variance: z = (p1 − p2) / sqrt(p̂(1−p̂)(1/n1 + 1/n2)).
pub fn z_test_proportions(k1: usize, n1: usize, k2: usize, n2: usize) -> Result<SignificanceResult> {
    if n1 == 0 || n2 == 0 || k1 > n1 || k2 > n2 {
        return Err(EvalError::BadCounts { k1, n1, k2, n2 });
    }
    let pooled_p = (k1 + k2) as f64 / (n1 + n2) as f64;
    let variance = pooled_p * (1.0 - pooled_p) * (1.0 / n1 as f64 + 1.0 / n2 as f64);
    if variance == 0.0 {
        let mut significant_at = BTreeMap::new();
        significant_at.insert("0.05".to_string(), false);
        significant_at.insert("0.01".to_string(), false);
        return Ok(SignificanceResult {
            z: 0.0,
            p_two_tailed: 1.0,
            pooled_p,
            significant_at,
            undefined: true,
        });
    }
    let z = (k1 as f64 / n1 as f64 - k2 as f64 / n2 as f64) / variance.sqrt();
    let p_two_tailed = (2.0 * (1.0 - std_normal_cdf(z.abs()))).clamp(0.0, 1.0);
    let mut significant_at = BTreeMap::new();
    significant_at.insert("0.05".to_string(), p_two_tailed < 0.05);
    significant_at.insert("0.01".to_string(), p_two_tailed < 0.01);
    Ok(SignificanceResult {
        z,
        p_two_tailed,
        pooled_p,
        significant_at,
        undefined: false,
    })
}

/// Standard normal CDF via erf: Φ(x) = (1 + erf(x/√2)) / 2.
pub fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

/// Error function via the cancellation-free confluent series
/// erf(x) = (2x/√π) e^(−x²) Σ_{n≥0} (2x²)^n / (1·3·⋯·(2n+1)),
/// accurate well past the 1e−7 needed here; saturates for |x| > 6.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x > 6.0 {
        return 1.0; // 1 − erf(6) < 1e−16
    }
    let x2 = x * x;
    let mut term = 1.0;
    let mut sum = 1.0;
    let mut n = 0u32;
    loop {
        n += 1;
        term *= 2.0 * x2 / (2 * n + 1) as f64;
        sum += term;
        if term < 1e-17 * sum || n > 200 {
            break;
        }
    }
    2.0 / std::f64::consts::PI.sqrt() * x * (-x2).exp() * sum
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tags(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn erf_known_values() {
        // reference values to 10+ digits
        assert!((erf(0.0)).abs() < 1e-15);
        assert!((erf(0.5) - 0.5204998778130465).abs() < 1e-10);
        assert!((erf(1.0) - 0.8427007929497149).abs() < 1e-10);
        assert!((erf(2.0) - 0.9953222650189527).abs() < 1e-10);
        assert!((erf(-1.0) + 0.8427007929497149).abs() < 1e-10);
    }

    #[test]
    fn normal_cdf_known_values() {
        assert!((std_normal_cdf(0.0) - 0.5).abs() < 1e-12);
        assert!((std_normal_cdf(1.96) - 0.9750021048517795).abs() < 1e-8);
        assert!((std_normal_cdf(-1.0) - 0.15865525393145707).abs() < 1e-8);
    }

    #[test]
    fn accuracy_basics() {
        assert_eq!(intent_accuracy(&[1, 2], &[1, 2]).unwrap(), 1.0);
        assert_eq!(intent_accuracy(&[0, 0], &[1, 2]).unwrap(), 0.0);
        assert_eq!(intent_accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 0.75);
        assert!(matches!(
            intent_accuracy(&[], &[]),
            Err(EvalError::EmptyInput)
        ));
        assert!(matches!(
            intent_accuracy(&[1], &[1, 2]),
            Err(EvalError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn f_score_identity_is_perfect() {
        let gold = vec![tags(&["B-LOC", "I-LOC", "O", "B-PER"])];
        let pred_io = vec![tags(&["I-LOC", "I-LOC", "O", "I-PER"])];
        let (p, r, f) = entity_f_score(&pred_io, &gold).unwrap();
        assert_eq!((p, r, f), (1.0, 1.0, 1.0));
    }

    #[test]
    fn f_score_hand_case_half() {
        // gold spans (0-1, LOC), (3, PER); pred spans (0-1, LOC), (3, DATE)
        let gold = vec![tags(&["B-LOC", "I-LOC", "O", "B-PER"])];
        let pred_io = vec![tags(&["I-LOC", "I-LOC", "O", "I-DATE"])];
        let (p, r, f) = entity_f_score(&pred_io, &gold).unwrap();
        assert_eq!((p, r, f), (0.5, 0.5, 0.5));
        assert_eq!(entity_counts(&pred_io, &gold).unwrap(), (1, 1, 1));
    }

    #[test]
    fn f_score_all_outside_prediction() {
        let gold = vec![tags(&["B-LOC", "O", "B-PER"])];
        let pred_io = vec![tags(&["O", "O", "O"])];
        let (p, r, f) = entity_f_score(&pred_io, &gold).unwrap();
        assert_eq!((p, r, f), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f_score_boundary_error_is_both_fp_and_fn() {
        let gold = vec![tags(&["B-LOC", "I-LOC", "O"])];
        let pred_io = vec![tags(&["I-LOC", "I-LOC", "I-LOC"])];
        let (tp, fp, fn_) = entity_counts(&pred_io, &gold).unwrap();
        assert_eq!((tp, fp, fn_), (0, 1, 1));
    }

    #[test]
    fn micro_f_uses_summed_counts() {
        // utterance 1: perfect (1 tp); utterance 2: miss (1 fn)
        let gold = vec![tags(&["B-LOC"]), tags(&["B-PER"])];
        let pred_io = vec![tags(&["I-LOC"]), tags(&["O"])];
        let (p, r, f) = entity_f_score(&pred_io, &gold).unwrap();
        assert_eq!(p, 1.0);
        assert_eq!(r, 0.5);
        assert!((f - 2.0 / 3.0).abs() < 1e-12);
        // per-utterance average of F would have been (1.0 + 0.0)/2 = 0.5
        assert!((f - 0.5).abs() > 0.1);
    }

    #[test]
    fn overall_score_table_entries() {
        assert!((overall_score(96.5, 82.1).unwrap() - 89.3).abs() < 0.05);
        assert!((overall_score(91.7, 76.5).unwrap() - 84.1).abs() < 0.05);
        assert_eq!(overall_score(70.0, 70.0).unwrap(), 70.0);
        assert!(overall_score(101.0, 50.0).is_err());
        assert!(overall_score(50.0, -0.1).is_err());
    }

    #[test]
    fn z_test_hand_value() {
        let r = z_test_proportions(800, 1000, 760, 1000).unwrap();
        assert!((r.z - 2.159).abs() < 0.005, "z = {}", r.z);
        assert!((r.p_two_tailed - 0.0308).abs() < 0.002, "p = {}", r.p_two_tailed);
        assert_eq!(r.significant_at["0.05"], true);
        assert_eq!(r.significant_at["0.01"], false);
        assert!(!r.undefined);
    }

    #[test]
    fn z_test_identical_proportions() {
        let r = z_test_proportions(50, 100, 50, 100).unwrap();
        assert_eq!(r.z, 0.0);
        assert!((r.p_two_tailed - 1.0).abs() < 1e-12);
    }

    #[test]
    fn z_test_antisymmetric() {
        let a = z_test_proportions(800, 1000, 760, 1000).unwrap();
        let b = z_test_proportions(760, 1000, 800, 1000).unwrap();
        assert!((a.z + b.z).abs() < 1e-12);
        assert!((a.p_two_tailed - b.p_two_tailed).abs() < 1e-12);
    }

    #[test]
    fn z_test_degenerate_pool_flagged() {
        let r = z_test_proportions(100, 100, 50, 50).unwrap();
        assert!(r.undefined);
        assert_eq!(r.p_two_tailed, 1.0);
        let r0 = z_test_proportions(0, 100, 0, 50).unwrap();
        assert!(r0.undefined);
    }

    #[test]
    fn z_test_rejects_bad_counts() {
        assert!(z_test_proportions(5, 4, 1, 10).is_err());
        assert!(z_test_proportions(1, 0, 1, 10).is_err());
    }

    #[test]
    fn significance_implication_holds_widely() {
        for k1 in (0..=100).step_by(7) {
            let r = z_test_proportions(k1, 100, 40, 100).unwrap();
            if r.significant_at["0.01"] {
                assert!(r.significant_at["0.05"]);
            }
        }
    }

    #[test]
    fn report_from_counts_is_consistent() {
        let counts = MetricCounts {
            tp: 6,
            fp: 2,
            fn_: 4,
            n_intents_correct: 9,
            n_intents_total: 10,
        };
        let rep = MetricsReport::from_counts(counts);
        assert_eq!(rep.intent_accuracy, 0.9);
        assert_eq!(rep.entity_precision, 0.75);
        assert_eq!(rep.entity_recall, 0.6);
        assert!((rep.overall - (0.9 + rep.entity_f1) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn report_json_field_names() {
        let rep = MetricsReport::from_counts(MetricCounts {
            tp: 1,
            fp: 0,
            fn_: 0,
            n_intents_correct: 1,
            n_intents_total: 1,
        });
        let json = serde_json::to_value(&rep).unwrap();
        for key in [
            "intent_accuracy",
            "entity_precision",
            "entity_recall",
            "entity_f1",
            "overall",
            "counts",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        for key in ["tp", "fp", "fn", "n_intents_correct", "n_intents_total"] {
            assert!(json["counts"].get(key).is_some(), "missing counts.{key}");
        }
        let back: MetricsReport = serde_json::from_value(json).unwrap();
        assert_eq!(back, rep);
    }
}
