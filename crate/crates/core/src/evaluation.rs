//! Regression metrics, per-subject item tables and the item-contribution analysis.
//!
//! Contributions use the sum of the clamped predicted item scores as the
//! denominator, so the 13 percentages of a subject total 100 whenever any
//! clamped prediction is positive.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clinical::{AdasItem, NUM_ITEMS, NUM_OUTPUTS};
use crate::model::MtlModel;
use crate::training::{predict, Sample, TrainError};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum MetricError {
    #[error("length mismatch: {0} predictions vs {1} targets")]
    LengthMismatch(usize, usize),
    #[error("metric needs at least {0} values")]
    TooShort(usize),
    #[error("correlation undefined: zero variance")]
    ZeroVariance,
    #[error("non-finite input")]
    NonFinite,
    #[error("expected {NUM_ITEMS} item scores, got {0}")]
    WrongLength(usize),
}

fn check(pred: &[f64], truth: &[f64], min_len: usize) -> Result<(), MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.len() < min_len {
        return Err(MetricError::TooShort(min_len));
    }
    if pred.iter().chain(truth).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    Ok(())
}

pub fn mae(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth, 1)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth, 1)?;
    let sum: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t).powi(2)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Sample Pearson correlation, clamped to [-1, 1].
pub fn pearson(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    check(pred, truth, 2)?;
    let n = pred.len() as f64;
    let mp = pred.iter().sum::<f64>() / n;
    let mt = truth.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        let (dp, dt) = (p - mp, t - mt);
        sxy += dp * dt;
        sxx += dp * dp;
        syy += dt * dt;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(MetricError::ZeroVariance);
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Item shares of one subject's clamped predicted item total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contribution {
    /// `None` when every clamped prediction is zero.
    pub percentages: Option<Vec<f64>>,
    pub degenerate: bool,
}

pub fn subscore_contribution(predicted_items: &[f64]) -> Result<Contribution, MetricError> {
    if predicted_items.len() != NUM_ITEMS {
        return Err(MetricError::WrongLength(predicted_items.len()));
    }
    if predicted_items.iter().any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let clamped: Vec<f64> = predicted_items.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = clamped.iter().sum();
    if total == 0.0 {
        return Ok(Contribution {
            percentages: None,
            degenerate: true,
        });
    }
    Ok(Contribution {
        percentages: Some(clamped.iter().map(|c| 100.0 * c / total).collect()),
        degenerate: false,
    })
}

/// Metrics for one output; `pearson_r` is `None` with the reason in `pearson_error`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputMetrics {
    pub output: String,
    pub mae: f64,
    pub rmse: f64,
    pub pearson_r: Option<f64>,
    pub pearson_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRow {
    pub subject_id: String,
    pub true_global: f64,
    pub predicted_global: f64,
    pub true_items: Vec<f64>,
    pub predicted_items: Vec<f64>,
    pub abs_error: Vec<f64>,
    pub contribution: Contribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceEntry {
    pub item: AdasItem,
    pub mean_contribution_pct: f64,
    pub cumulative_share: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    /// Global score first, then Q1..Q13.
    pub outputs: Vec<OutputMetrics>,
    pub subjects: Vec<SubjectRow>,
    /// All 13 items ranked by mean contribution over non-degenerate subjects.
    pub dominance: Vec<DominanceEntry>,
    pub degenerate_subjects: usize,
}

impl EvaluationReport {
    pub fn global(&self) -> &OutputMetrics {
        &self.outputs[0]
    }
}

pub fn output_name(column: usize) -> String {
    match column {
        0 => "global".to_string(),
        c => AdasItem::ALL[c - 1].name().to_string(),
    }
}

/// Ranks items by mean percentage, ties in Q1..Q13 order.
pub fn rank_contributions(percentages: &[Vec<f64>]) -> Vec<DominanceEntry> {
    if percentages.is_empty() {
        return Vec::new();
    }
    let n = percentages.len() as f64;
    let mut means: Vec<(AdasItem, f64)> = AdasItem::ALL
        .iter()
        .map(|&item| (item, percentages.iter().map(|p| p[item.index()]).sum::<f64>() / n))
        .collect();
    means.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cumulative = 0.0;
    means
        .into_iter()
        .map(|(item, mean)| {
            cumulative += mean;
            DominanceEntry {
                item,
                mean_contribution_pct: mean,
                cumulative_share: cumulative,
            }
        })
        .collect()
}

pub fn evaluate_predictions(
    subject_ids: &[String],
    predictions: &[[f64; NUM_OUTPUTS]],
    targets: &[[f64; NUM_OUTPUTS]],
) -> Result<EvaluationReport, MetricError> {
    if predictions.len() != targets.len() || subject_ids.len() != targets.len() {
        return Err(MetricError::LengthMismatch(predictions.len(), targets.len()));
    }
    let mut outputs = Vec::with_capacity(NUM_OUTPUTS);
    for c in 0..NUM_OUTPUTS {
        let p: Vec<f64> = predictions.iter().map(|r| r[c]).collect();
        let t: Vec<f64> = targets.iter().map(|r| r[c]).collect();
        let (pearson_r, pearson_error) = match pearson(&p, &t) {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e.to_string())),
        };
        outputs.push(OutputMetrics {
            output: output_name(c),
            mae: mae(&p, &t)?,
            rmse: rmse(&p, &t)?,
            pearson_r,
            pearson_error,
        });
    }
    let mut subjects = Vec::with_capacity(targets.len());
    for ((id, p), t) in subject_ids.iter().zip(predictions).zip(targets) {
        subjects.push(SubjectRow {
            subject_id: id.clone(),
            true_global: t[0],
            predicted_global: p[0],
            true_items: t[1..].to_vec(),
            predicted_items: p[1..].to_vec(),
            abs_error: p[1..].iter().zip(&t[1..]).map(|(a, b)| (a - b).abs()).collect(),
            contribution: subscore_contribution(&p[1..])?,
        });
    }
    let shares: Vec<Vec<f64>> = subjects
        .iter()
        .filter_map(|s| s.contribution.percentages.clone())
        .collect();
    Ok(EvaluationReport {
        outputs,
        degenerate_subjects: subjects.len() - shares.len(),
        dominance: rank_contributions(&shares),
        subjects,
    })
}

/// Runs the model over `samples` and scores every output.
pub fn evaluate(model: &MtlModel, samples: &[Sample]) -> Result<EvaluationReport, TrainError> {
    let predictions = predict(model, samples)?;
    let ids: Vec<String> = samples.iter().map(|s| s.subject_id.clone()).collect();
    let targets: Vec<[f64; NUM_OUTPUTS]> = samples.iter().map(|s| s.targets.0).collect();
    Ok(evaluate_predictions(&ids, &predictions, &targets)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceSummary {
    pub top: Vec<DominanceEntry>,
    pub cumulative_share: f64,
}

/// The `k` items with the largest mean contribution and their combined share.
pub fn dominance_report(report: &EvaluationReport, k: usize) -> DominanceSummary {
    let top: Vec<DominanceEntry> = report.dominance.iter().take(k).cloned().collect();
    DominanceSummary {
        cumulative_share: top.last().map_or(0.0, |e| e.cumulative_share),
        top,
    }
}

/// `subject_id`, 14 true values, 14 predicted values per row.
pub fn write_predictions_csv<W: Write>(writer: W, report: &EvaluationReport) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["subject_id".to_string()];
    header.extend((0..NUM_OUTPUTS).map(|c| format!("true_{}", output_name(c))));
    header.extend((0..NUM_OUTPUTS).map(|c| format!("pred_{}", output_name(c))));
    w.write_record(&header)?;
    for s in &report.subjects {
        let mut row = vec![s.subject_id.clone(), s.true_global.to_string()];
        row.extend(s.true_items.iter().map(f64::to_string));
        row.push(s.predicted_global.to_string());
        row.extend(s.predicted_items.iter().map(f64::to_string));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_computed_metrics() {
        assert_eq!(mae(&[-2.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(rmse(&[-2.0, 2.0], &[0.0, 0.0]).unwrap(), 2.0);
        assert_eq!(rmse(&[0.0, 2.0], &[0.0, 0.0]).unwrap(), 2f64.sqrt());
        assert_eq!(mae(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
    }

    #[test]
    fn metric_contracts() {
        assert_eq!(mae(&[1.0], &[1.0, 2.0]), Err(MetricError::LengthMismatch(1, 2)));
        assert_eq!(rmse(&[], &[]), Err(MetricError::TooShort(1)));
        assert_eq!(pearson(&[1.0], &[1.0]), Err(MetricError::TooShort(2)));
        assert_eq!(pearson(&[1.0, 1.0], &[1.0, 2.0]), Err(MetricError::ZeroVariance));
        assert_eq!(pearson(&[1.0, 2.0], &[3.0, 3.0]), Err(MetricError::ZeroVariance));
    }

    #[test]
    fn correlation_identities() {
        let x = [0.3, -1.2, 4.0, 2.2, 0.0];
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert_eq!(pearson(&x, &x).unwrap(), 1.0);
        assert_eq!(pearson(&x, &neg).unwrap(), -1.0);
    }

    #[test]
    fn contribution_examples() {
        let mut p = [0.0; 13];
        p[0] = 1.0;
        p[1] = 1.0;
        p[2] = 2.0;
        let c = subscore_contribution(&p).unwrap().percentages.unwrap();
        assert_eq!(&c[..3], &[25.0, 25.0, 50.0]);
        assert!(c[3..].iter().all(|v| *v == 0.0));

        let c = subscore_contribution(&[2.5; 13]).unwrap().percentages.unwrap();
        assert!(c.iter().all(|v| (v - 100.0 / 13.0).abs() < 1e-12));

        let mut p = [-1.0; 13];
        p[7] = 0.4;
        let c = subscore_contribution(&p).unwrap().percentages.unwrap();
        assert_eq!(c[7], 100.0);

        let d = subscore_contribution(&[-0.5; 13]).unwrap();
        assert!(d.degenerate && d.percentages.is_none());
        assert_eq!(subscore_contribution(&[1.0; 12]), Err(MetricError::WrongLength(12)));
    }

    fn report_with_items(items: &[[f64; 13]]) -> EvaluationReport {
        let ids: Vec<String> = (0..items.len()).map(|i| format!("S{i}")).collect();
        let preds: Vec<[f64; 14]> = items
            .iter()
            .map(|it| std::array::from_fn(|c| if c == 0 { it.iter().sum() } else { it[c - 1] }))
            .collect();
        evaluate_predictions(&ids, &preds, &preds).unwrap()
    }

    #[test]
    fn uniform_dominance() {
        let r = report_with_items(&[[1.0; 13], [3.0; 13]]);
        let d3 = dominance_report(&r, 3);
        assert!((d3.cumulative_share - 300.0 / 13.0).abs() < 1e-9);
        let d13 = dominance_report(&r, 13);
        assert!((d13.cumulative_share - 100.0).abs() < 1e-9);
        let shares: Vec<f64> = (1..=13).map(|k| dominance_report(&r, k).cumulative_share).collect();
        assert!(shares.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn perfect_predictor_report() {
        let r = report_with_items(&[[1.0; 13], [2.0; 13], [0.5; 13]]);
        for o in &r.outputs {
            assert_eq!(o.mae, 0.0);
            assert_eq!(o.rmse, 0.0);
            assert_eq!(o.pearson_r, Some(1.0));
        }
        let json = serde_json::to_string(&r).unwrap();
        let back: EvaluationReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert_eq!(serde_json::to_string(&back).unwrap(), json);
    }

    #[test]
    fn undefined_correlation_serializes_as_null() {
        let r = report_with_items(&[[1.0; 13], [1.0; 13]]);
        let v = serde_json::to_value(&r).unwrap();
        assert!(v["outputs"][0]["pearson_r"].is_null());
        assert!(v["outputs"][0]["pearson_error"].is_string());
    }

    #[test]
    fn predictions_csv_has_29_columns() {
        let r = report_with_items(&[[1.0; 13]]);
        let mut buf = Vec::new();
        write_predictions_csv(&mut buf, &r).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        let header = lines.next().unwrap();
        assert_eq!(header.split(',').count(), 29);
        assert!(header.starts_with("subject_id,true_global,true_Q1"));
        assert_eq!(lines.next().unwrap().split(',').count(), 29);
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(v in prop::collection::vec((-50.0f64..50.0, -50.0f64..50.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = v.into_iter().unzip();
            prop_assert!(mae(&p, &t).unwrap() <= rmse(&p, &t).unwrap() * (1.0 + 1e-12));
        }

        #[test]
        fn contributions_are_scale_invariant(
            items in prop::array::uniform13(-3.0f64..10.0),
            c in 0.01f64..100.0,
        ) {
            let a = subscore_contribution(&items).unwrap();
            let scaled: Vec<f64> = items.iter().map(|v| v * c).collect();
            let b = subscore_contribution(&scaled).unwrap();
            prop_assert_eq!(a.degenerate, b.degenerate);
            if let (Some(pa), Some(pb)) = (a.percentages, b.percentages) {
                prop_assert!((pa.iter().sum::<f64>() - 100.0).abs() < 1e-9);
                for (x, y) in pa.iter().zip(&pb) {
                    prop_assert!((x - y).abs() < 1e-9);
                }
            }
        }
    }
}
