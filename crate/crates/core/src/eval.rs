//! Metrics, the strategy benchmark, and attention-weight export.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::witness_indices;
use crate::error::{MivcError, Result};
use crate::model::{self, Model, Strategy, TrainConfig};
use crate::par;
use crate::pooling::Bag;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub support: usize,
    pub predicted: usize,
    /// 0 when nothing was predicted as this class.
    pub precision: f64,
    /// 0 when the class has no support.
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub per_class: Vec<ClassMetrics>,
}

/// Accuracy and macro-averaged precision/recall over `classes` classes.
/// Every class enters the macro averages, including ones with no support.
pub fn compute_metrics(predictions: &[usize], labels: &[usize], classes: usize) -> Result<MetricsReport> {
    if predictions.len() != labels.len() {
        return Err(MivcError::Usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(MivcError::Usage("cannot score an empty split".into()));
    }
    if classes == 0 {
        return Err(MivcError::Usage("classes must be >= 1".into()));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= classes) {
        return Err(MivcError::Usage(format!("class {bad} outside [0, {classes})")));
    }
    let mut tp = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        predicted[p] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    let per_class: Vec<ClassMetrics> = (0..classes)
        .map(|c| ClassMetrics {
            class: c,
            support: support[c],
            predicted: predicted[c],
            precision: ratio(tp[c], predicted[c]),
            recall: ratio(tp[c], support[c]),
        })
        .collect();
    let k = classes as f64;
    Ok(MetricsReport {
        n: labels.len(),
        accuracy: ratio(tp.iter().sum(), labels.len()),
        macro_precision: per_class.iter().map(|c| c.precision).sum::<f64>() / k,
        macro_recall: per_class.iter().map(|c| c.recall).sum::<f64>() / k,
        per_class,
    })
}

pub fn labels_of(bags: &[Bag]) -> Result<Vec<usize>> {
    bags.iter()
        .map(|b| b.label.ok_or_else(|| MivcError::Data(format!("bag {:?} has no label", b.id))))
        .collect()
}

pub fn predict_all(model: &Model, bags: &[Bag]) -> Result<Vec<usize>> {
    par::map(bags, |b| model.predict(b)).into_iter().collect()
}

pub fn evaluate(model: &Model, bags: &[Bag]) -> Result<MetricsReport> {
    let labels = labels_of(bags)?;
    compute_metrics(&predict_all(model, bags)?, &labels, model.classes())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub strategy: Strategy,
    pub accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub params: usize,
}

/// Trains one model per strategy from `template` (only the strategy
/// differs, seeds included) and scores each on `eval`. Rows come back in
/// the order of `strategies`.
pub fn run_benchmark(
    strategies: &[Strategy],
    template: &TrainConfig,
    train: &[Bag],
    eval: &[Bag],
) -> Result<Vec<BenchRow>> {
    if strategies.is_empty() {
        return Err(MivcError::Usage("no strategies to benchmark".into()));
    }
    par::map(strategies, |&strategy| -> Result<BenchRow> {
        let config = TrainConfig {
            strategy,
            ..template.clone()
        };
        let outcome = model::train(&config, train)?;
        let metrics = evaluate(&outcome.model, eval)?;
        Ok(BenchRow {
            strategy,
            accuracy: metrics.accuracy,
            macro_precision: metrics.macro_precision,
            macro_recall: metrics.macro_recall,
            initial_loss: outcome.initial_loss,
            final_loss: outcome.history.last().map_or(outcome.initial_loss, |h| h.loss),
            params: model::count_params(&config).total,
        })
    })
    .into_iter()
    .collect()
}

pub fn rows_to_jsonl(rows: &[BenchRow]) -> String {
    rows.iter()
        .map(|r| serde_json::to_string(r).expect("row serialises") + "\n")
        .collect()
}

/// Fixed-width table: strategy, accuracy, macro_precision, macro_recall.
pub fn format_table(rows: &[BenchRow]) -> String {
    let mut out = format!(
        "{:<14} {:>8} {:>15} {:>12}\n",
        "strategy", "accuracy", "macro_precision", "macro_recall"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>8.4} {:>15.4} {:>12.4}",
            r.strategy.as_str(),
            r.accuracy,
            r.macro_precision,
            r.macro_recall
        );
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub bag_id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    pub predicted: usize,
    /// Rounded to 4 decimals.
    pub weights: Vec<f64>,
    /// Taken from the unrounded weights.
    pub argmax: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witnesses: Option<Vec<usize>>,
}

fn round4(x: f64) -> f64 {
    (x * 1e4).round() / 1e4
}

/// Attention weights of an attention-pooling model for every bag.
pub fn export_attention(model: &Model, bags: &[Bag]) -> Result<Vec<AttentionRecord>> {
    if !model.strategy.pooling_kind().is_some_and(|k| k.is_attention()) {
        return Err(MivcError::Usage(format!(
            "attention export needs an attn or gated model, got {}",
            model.strategy
        )));
    }
    par::map(bags, |b| -> Result<AttentionRecord> {
        let fwd = model.forward(b)?;
        let alpha = fwd
            .pooled
            .alpha
            .ok_or_else(|| MivcError::Precondition("attention model produced no weights".into()))?;
        Ok(AttentionRecord {
            bag_id: b.id.clone(),
            label: b.label,
            predicted: fwd.logits.argmax().unwrap_or(0),
            weights: alpha.iter().map(|&a| round4(a)).collect(),
            argmax: alpha.argmax().unwrap_or(0),
            witnesses: witness_indices(b),
        })
    })
    .into_iter()
    .collect()
}

pub fn attention_to_jsonl(records: &[AttentionRecord]) -> String {
    records
        .iter()
        .map(|r| serde_json::to_string(r).expect("record serialises") + "\n")
        .collect()
}

/// Fraction of bags with known witnesses whose attention argmax is one.
/// `None` when no record carries witnesses.
pub fn witness_hit_rate(records: &[AttentionRecord]) -> Option<f64> {
    let scored: Vec<bool> = records
        .iter()
        .filter_map(|r| r.witnesses.as_ref().map(|w| w.contains(&r.argmax)))
        .collect();
    if scored.is_empty() {
        None
    } else {
        Some(scored.iter().filter(|&&h| h).count() as f64 / scored.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn metrics_example() {
        let r = compute_metrics(&[0, 1, 1, 0], &[0, 1, 0, 0], 2).unwrap();
        assert_eq!(r.accuracy, 0.75);
        // class 0: tp 2, predicted 2, support 3; class 1: tp 1, predicted 2, support 1
        assert!((r.macro_precision - 0.75).abs() < 1e-15);
        assert!((r.macro_recall - (2.0 / 3.0 + 1.0) / 2.0).abs() < 1e-15);
    }

    #[test]
    fn zero_support_class_counts_as_zero() {
        let r = compute_metrics(&[0, 0], &[0, 0], 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert!((r.macro_recall - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.macro_precision - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn metric_errors() {
        assert!(matches!(compute_metrics(&[0], &[0, 1], 2), Err(MivcError::Usage(_))));
        assert!(matches!(compute_metrics(&[], &[], 2), Err(MivcError::Usage(_))));
        assert!(matches!(compute_metrics(&[2], &[0], 2), Err(MivcError::Usage(_))));
    }

    #[test]
    fn table_layout() {
        let row = BenchRow {
            strategy: Strategy::Gated,
            accuracy: 0.5,
            macro_precision: 0.25,
            macro_recall: 1.0,
            initial_loss: 1.0,
            final_loss: 0.5,
            params: 3,
        };
        let t = format_table(&[row]);
        let lines: Vec<&str> = t.lines().collect();
        assert_eq!(lines[0].split_whitespace().collect::<Vec<_>>(), ["strategy", "accuracy", "macro_precision", "macro_recall"]);
        assert_eq!(lines[1].split_whitespace().collect::<Vec<_>>(), ["gated", "0.5000", "0.2500", "1.0000"]);
        assert_eq!(lines[0].len(), lines[1].len());
    }

    #[test]
    fn hit_rate() {
        let rec = |argmax, w: Option<Vec<usize>>| AttentionRecord {
            bag_id: "b".into(),
            label: None,
            predicted: 0,
            weights: vec![],
            argmax,
            witnesses: w,
        };
        assert_eq!(witness_hit_rate(&[rec(0, None)]), None);
        let rs = [rec(1, Some(vec![1, 2])), rec(0, Some(vec![2])), rec(0, None)];
        assert_eq!(witness_hit_rate(&rs), Some(0.5));
        assert_eq!(round4(0.123456), 0.1235);
    }
}
