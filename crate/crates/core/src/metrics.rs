//! Forecast accuracy metrics and the horizon-structured report.
//!
//! All metrics follow the traffic-benchmark convention: entries whose ground
//! truth is exactly zero are treated as missing and skipped, and MAPE
//! additionally drops entries whose absolute truth falls below a small
//! threshold so near-empty intervals cannot blow up the percentage. The
//! report slices a 12-step forecast at horizons 3, 6 and 12 and pools every
//! step for the average row.

use std::path::Path;

use serde_json::json;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Ground-truth magnitudes below this (vehicles per interval) are excluded
/// from MAPE denominators.
pub const MAPE_THRESHOLD: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricTriple {
    pub mae: f64,
    pub rmse: f64,
    pub mape_percent: f64,
}

/// Per-horizon summary over a stack of forecasts.
#[derive(Debug, Clone)]
pub struct MetricsReport {
    pub h3: MetricTriple,
    pub h6: MetricTriple,
    pub h12: MetricTriple,
    pub average: MetricTriple,
    pub per_step: Vec<MetricTriple>,
    /// Valid (unmasked) entries that fed the average row.
    pub sample_count: usize,
    /// Entries dropped by the zero mask.
    pub masked_count: usize,
}

/// Marks entries with nonzero truth as valid.
pub fn zero_mask(truth: &Tensor) -> Tensor {
    truth.map(|v| if v != 0.0 { 1.0 } else { 0.0 })
}

fn validate(pred: &Tensor, truth: &Tensor, mask: &Tensor) -> Result<()> {
    if pred.shape != truth.shape || pred.shape != mask.shape {
        return Err(CoreError::Shape(format!(
            "metric shapes differ: pred {:?}, truth {:?}, mask {:?}",
            pred.shape, truth.shape, mask.shape
        )));
    }
    Ok(())
}

/// Mean absolute error over entries where mask is nonzero.
pub fn mae(pred: &Tensor, truth: &Tensor, mask: &Tensor) -> Result<f64> {
    validate(pred, truth, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.numel() {
        if mask.data[i] != 0.0 {
            sum += (pred.data[i] - truth.data[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::Data(
            "no valid entries to average; metric undefined".into(),
        ));
    }
    Ok(sum / count as f64)
}

/// Root mean square error over entries where mask is nonzero.
pub fn rmse(pred: &Tensor, truth: &Tensor, mask: &Tensor) -> Result<f64> {
    validate(pred, truth, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.numel() {
        if mask.data[i] != 0.0 {
            let d = pred.data[i] - truth.data[i];
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::Data(
            "no valid entries to average; metric undefined".into(),
        ));
    }
    Ok((sum / count as f64).sqrt())
}

/// Mean absolute percentage error, in percent, over entries where mask is
/// nonzero and |truth| >= threshold.
pub fn mape(pred: &Tensor, truth: &Tensor, mask: &Tensor, threshold: f64) -> Result<f64> {
    validate(pred, truth, mask)?;
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..pred.numel() {
        if mask.data[i] != 0.0 && truth.data[i].abs() >= threshold {
            sum += ((pred.data[i] - truth.data[i]) / truth.data[i]).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(CoreError::Data(
            "no entries above the MAPE threshold; metric undefined".into(),
        ));
    }
    Ok(100.0 * sum / count as f64)
}

fn triple(pred: &Tensor, truth: &Tensor, mask: &Tensor, threshold: f64) -> Result<MetricTriple> {
    Ok(MetricTriple {
        mae: mae(pred, truth, mask)?,
        rmse: rmse(pred, truth, mask)?,
        mape_percent: mape(pred, truth, mask, threshold)?,
    })
}

/// Copy one horizon step out of a [S, H, N, C] stack as [S, N, C].
fn step_slice(x: &Tensor, step: usize) -> Tensor {
    let (s, h, n, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
    let width = n * c;
    let mut out = Tensor::zeros(&[s, n, c]);
    for si in 0..s {
        let src = (si * h + step) * width;
        out.data[si * width..(si + 1) * width]
            .copy_from_slice(&x.data[src..src + width]);
    }
    out
}

/// Build the horizon report from stacked forecasts and truths, both
/// [S, 12, N, C] in denormalized units. Horizons 3/6/12 are counted from 1.
pub fn horizon_report(preds: &Tensor, truths: &Tensor, threshold: f64) -> Result<MetricsReport> {
    if preds.rank() != 4 || preds.shape != truths.shape {
        return Err(CoreError::Shape(format!(
            "horizon report expects matching [S, H, N, C] stacks, got {:?} and {:?}",
            preds.shape, truths.shape
        )));
    }
    let h = preds.dim(1);
    if h != 12 {
        return Err(CoreError::Shape(format!(
            "horizon report is defined for 12-step forecasts, got {h}"
        )));
    }
    let mask = zero_mask(truths);
    let mut per_step = Vec::with_capacity(h);
    for step in 0..h {
        let p = step_slice(preds, step);
        let t = step_slice(truths, step);
        let m = step_slice(&mask, step);
        per_step.push(triple(&p, &t, &m, threshold)?);
    }
    let average = triple(preds, truths, &mask, threshold)?;
    let masked_count = mask.data.iter().filter(|&&m| m == 0.0).count();
    Ok(MetricsReport {
        h3: per_step[2],
        h6: per_step[5],
        h12: per_step[11],
        average,
        per_step,
        sample_count: preds.numel() - masked_count,
        masked_count,
    })
}

fn report_rows(report: &MetricsReport) -> [(&'static str, MetricTriple); 4] {
    [
        ("3", report.h3),
        ("6", report.h6),
        ("12", report.h12),
        ("average", report.average),
    ]
}

/// Table-layout CSV: horizon, mae, rmse, mape_percent.
pub fn write_report_csv(path: &Path, report: &MetricsReport) -> Result<()> {
    let mut lines = String::from("horizon,mae,rmse,mape_percent\n");
    for (label, m) in report_rows(report) {
        lines.push_str(&format!(
            "{label},{:.6},{:.6},{:.6}\n",
            m.mae, m.rmse, m.mape_percent
        ));
    }
    std::fs::write(path, lines).map_err(|e| CoreError::io(path, e))
}

pub fn write_report_json(path: &Path, report: &MetricsReport) -> Result<()> {
    let row = |m: &MetricTriple| {
        json!({ "mae": m.mae, "rmse": m.rmse, "mape_percent": m.mape_percent })
    };
    let value = json!({
        "horizon_3": row(&report.h3),
        "horizon_6": row(&report.h6),
        "horizon_12": row(&report.h12),
        "average": row(&report.average),
        "per_step": report.per_step.iter().map(row).collect::<Vec<_>>(),
        "sample_count": report.sample_count,
        "masked_count": report.masked_count,
    });
    let text = serde_json::to_string_pretty(&value)
        .map_err(|e| CoreError::Data(format!("serializing report: {e}")))?;
    std::fs::write(path, text).map_err(|e| CoreError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn ones_like(t: &Tensor) -> Tensor {
        Tensor::filled(&t.shape, 1.0)
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let truth = Tensor::new(vec![4], vec![10.0, 20.0, 30.0, 40.0]).unwrap();
        let mask = ones_like(&truth);
        assert_eq!(mae(&truth, &truth, &mask).unwrap(), 0.0);
        assert_eq!(rmse(&truth, &truth, &mask).unwrap(), 0.0);
        assert_eq!(mape(&truth, &truth, &mask, MAPE_THRESHOLD).unwrap(), 0.0);
    }

    #[test]
    fn ten_percent_overprediction() {
        let pred = Tensor::new(vec![1], vec![110.0]).unwrap();
        let truth = Tensor::new(vec![1], vec![100.0]).unwrap();
        let mask = ones_like(&truth);
        let p = mape(&pred, &truth, &mask, MAPE_THRESHOLD).unwrap();
        assert!((p - 10.0).abs() < 1e-12);
    }

    #[test]
    fn zero_mask_and_threshold_prune_entries() {
        let pred = Tensor::new(vec![2], vec![1.0, 3.0]).unwrap();
        let truth = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let mask = zero_mask(&truth);
        // The truth=0 entry is masked out everywhere.
        assert_eq!(mae(&pred, &truth, &mask).unwrap(), 2.0);
        // MAPE keeps only the truth=1 entry: |3-1|/1 = 200%.
        let p = mape(&pred, &truth, &mask, MAPE_THRESHOLD).unwrap();
        assert!((p - 200.0).abs() < 1e-12);
    }

    #[test]
    fn all_masked_is_an_error() {
        let truth = Tensor::zeros(&[3]);
        let pred = Tensor::filled(&[3], 5.0);
        let mask = zero_mask(&truth);
        assert!(mae(&pred, &truth, &mask).is_err());
        // Sub-threshold truths leave MAPE undefined even when unmasked.
        let small = Tensor::filled(&[3], 0.5);
        let m2 = zero_mask(&small);
        assert!(mape(&pred, &small, &m2, MAPE_THRESHOLD).is_err());
    }

    fn random_stack(seed: u64, s: usize, n: usize) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let numel = s * 12 * n;
        let truth: Vec<f64> = (0..numel).map(|_| 100.0 + 30.0 * rng.normal()).collect();
        let pred: Vec<f64> = truth.iter().map(|&t| t + 5.0 * rng.normal()).collect();
        (
            Tensor::new(vec![s, 12, n, 1], pred).unwrap(),
            Tensor::new(vec![s, 12, n, 1], truth).unwrap(),
        )
    }

    #[test]
    fn constant_offset_fills_every_mae_cell() {
        let (_, truths) = random_stack(1, 3, 4);
        let preds = truths.map(|v| v + 2.0);
        let r = horizon_report(&preds, &truths, MAPE_THRESHOLD).unwrap();
        for m in [r.h3, r.h6, r.h12, r.average] {
            assert!((m.mae - 2.0).abs() < 1e-9);
            assert!((m.rmse - 2.0).abs() < 1e-9);
        }
        assert_eq!(r.masked_count, 0);
        assert_eq!(r.sample_count, 3 * 12 * 4);
    }

    #[test]
    fn average_pools_all_twelve_steps() {
        let (preds, truths) = random_stack(2, 5, 3);
        let r = horizon_report(&preds, &truths, MAPE_THRESHOLD).unwrap();
        // Equal valid counts per step, so the pooled MAE equals the mean of
        // the per-step MAEs.
        let mean_mae: f64 = r.per_step.iter().map(|m| m.mae).sum::<f64>() / 12.0;
        assert!((r.average.mae - mean_mae).abs() < 1e-9);
        // Pooled RMSE aggregates squared errors, not per-step RMSEs.
        let mean_mse: f64 = r.per_step.iter().map(|m| m.rmse * m.rmse).sum::<f64>() / 12.0;
        assert!((r.average.rmse - mean_mse.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn horizon_rows_index_one_based() {
        let (preds, truths) = random_stack(3, 4, 2);
        let r = horizon_report(&preds, &truths, MAPE_THRESHOLD).unwrap();
        assert_eq!(r.h3, r.per_step[2]);
        assert_eq!(r.h6, r.per_step[5]);
        assert_eq!(r.h12, r.per_step[11]);
    }

    #[test]
    fn rmse_dominates_mae() {
        for seed in 0..5 {
            let (preds, truths) = random_stack(10 + seed, 4, 6);
            let r = horizon_report(&preds, &truths, MAPE_THRESHOLD).unwrap();
            for m in r.per_step.iter().chain([&r.average]) {
                assert!(m.rmse >= m.mae - 1e-12);
            }
        }
    }

    #[test]
    fn node_permutation_leaves_metrics_unchanged() {
        let (preds, truths) = random_stack(20, 3, 5);
        let mut rng = Rng::new(21);
        let perm = rng.permutation(5);
        let permute = |x: &Tensor| {
            let mut out = Tensor::zeros(&x.shape);
            for s in 0..3 {
                for h in 0..12 {
                    for n in 0..5 {
                        out.data[(s * 12 + h) * 5 + n] = x.data[(s * 12 + h) * 5 + perm[n]];
                    }
                }
            }
            out
        };
        let a = horizon_report(&preds, &truths, MAPE_THRESHOLD).unwrap();
        let b = horizon_report(&permute(&preds), &permute(&truths), MAPE_THRESHOLD).unwrap();
        // Summation order changes, so allow rounding-level slack.
        for (x, y) in [
            (a.average.mae, b.average.mae),
            (a.average.rmse, b.average.rmse),
            (a.average.mape_percent, b.average.mape_percent),
            (a.h6.mae, b.h6.mae),
        ] {
            assert!((x - y).abs() < 1e-10, "{x} vs {y}");
        }
    }

    #[test]
    fn wrong_horizon_length_rejected() {
        let x = Tensor::zeros(&[2, 6, 3, 1]);
        assert!(horizon_report(&x, &x, MAPE_THRESHOLD).is_err());
    }

    #[test]
    fn csv_layout_is_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (preds, truths) = random_stack(30, 2, 3);
        let r = horizon_report(&preds, &truths, MAPE_THRESHOLD).unwrap();
        let path = dir.path().join("report.csv");
        write_report_csv(&path, &r).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_report_csv(&path, &r).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        let text = String::from_utf8(first).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "horizon,mae,rmse,mape_percent");
        assert_eq!(lines.len(), 5);
        assert!(lines[1].starts_with("3,"));
        assert!(lines[4].starts_with("average,"));

        let jpath = dir.path().join("report.json");
        write_report_json(&jpath, &r).unwrap();
        let v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&jpath).unwrap()).unwrap();
        assert!((v["average"]["mae"].as_f64().unwrap() - r.average.mae).abs() < 1e-12);
        assert_eq!(v["per_step"].as_array().unwrap().len(), 12);
    }
}
