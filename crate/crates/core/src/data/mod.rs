//! Data pipeline: raw series containers, resampling, cleaning, splits and
//! normalization.
//!
//! A `RawSeries` holds readings on a [T, N, C] grid with NaN marking missing
//! values. The pipeline order is fixed: load, aggregate, clean, split
//! chronologically, fit the normalizer on the training split only, then
//! normalize everything with those statistics. After `clean_nans` no NaN
//! survives anywhere downstream.

pub mod csvio;
pub mod pmxt;
pub mod synth;
pub mod windows;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// A multivariate series on a regular time grid: values[t, n, c].
#[derive(Debug, Clone)]
pub struct RawSeries {
    pub values: Tensor,
    pub interval_minutes: u32,
    pub node_ids: Vec<String>,
}

impl RawSeries {
    pub fn new(values: Tensor, interval_minutes: u32, node_ids: Vec<String>) -> Result<Self> {
        if values.rank() != 3 {
            return Err(CoreError::Shape(format!(
                "series tensor must be [T, N, C], got {:?}",
                values.shape
            )));
        }
        if values.dim(1) != node_ids.len() {
            return Err(CoreError::Data(format!(
                "series has {} nodes but {} node ids",
                values.dim(1),
                node_ids.len()
            )));
        }
        Ok(RawSeries {
            values,
            interval_minutes,
            node_ids,
        })
    }

    pub fn t_len(&self) -> usize {
        self.values.dim(0)
    }

    pub fn n_nodes(&self) -> usize {
        self.values.dim(1)
    }

    pub fn channels(&self) -> usize {
        self.values.dim(2)
    }

    pub fn get(&self, t: usize, n: usize, c: usize) -> f64 {
        let (nn, cc) = (self.n_nodes(), self.channels());
        self.values.data[(t * nn + n) * cc + c]
    }

    pub fn nan_count(&self) -> usize {
        self.values.data.iter().filter(|v| v.is_nan()).count()
    }

    /// Readings per day, derived from the sampling interval.
    pub fn steps_per_day(&self) -> Result<usize> {
        if self.interval_minutes == 0 || 1440 % self.interval_minutes != 0 {
            return Err(CoreError::Data(format!(
                "interval of {} minutes does not divide a day",
                self.interval_minutes
            )));
        }
        Ok((1440 / self.interval_minutes) as usize)
    }
}

/// Report from `clean_nans`.
#[derive(Debug, Clone, Default, Serialize)]
pub struct CleanReport {
    pub interpolated: usize,
    pub carried_forward: usize,
    pub back_filled: usize,
}

/// Mean-pool consecutive groups of `factor` readings, ignoring NaN within a
/// group. A group with no finite reading stays NaN. A trailing remainder
/// shorter than `factor` is dropped with a warning.
pub fn aggregate(raw: &RawSeries, factor: usize) -> Result<RawSeries> {
    if factor == 0 {
        return Err(CoreError::Config("aggregation factor must be >= 1".into()));
    }
    let (t, n, c) = (raw.t_len(), raw.n_nodes(), raw.channels());
    let t_out = t / factor;
    if t % factor != 0 {
        log::warn!(
            "aggregation by {factor} drops {} trailing readings of {t}",
            t % factor
        );
    }
    let mut out = Tensor::zeros(&[t_out, n, c]);
    for to in 0..t_out {
        for nn in 0..n {
            for cc in 0..c {
                let mut sum = 0.0;
                let mut count = 0usize;
                for k in 0..factor {
                    let v = raw.get(to * factor + k, nn, cc);
                    if v.is_finite() {
                        sum += v;
                        count += 1;
                    }
                }
                out.data[(to * n + nn) * c + cc] = if count > 0 {
                    sum / count as f64
                } else {
                    f64::NAN
                };
            }
        }
    }
    RawSeries::new(
        out,
        raw.interval_minutes * factor as u32,
        raw.node_ids.clone(),
    )
}

/// Replace NaN runs in place. Interior runs of at most `max_interp` steps
/// are linearly interpolated between their finite neighbors; longer runs
/// and trailing runs carry the last finite value forward; leading runs are
/// back-filled from the first finite value. A node channel with no finite
/// value at all is an error.
pub fn clean_nans(raw: &mut RawSeries, max_interp: usize) -> Result<CleanReport> {
    let (t, n, c) = (raw.t_len(), raw.n_nodes(), raw.channels());
    let mut report = CleanReport::default();
    for nn in 0..n {
        for cc in 0..c {
            let idx = |tt: usize| (tt * n + nn) * c + cc;
            let first_finite = (0..t).find(|&tt| raw.values.data[idx(tt)].is_finite());
            let Some(first) = first_finite else {
                return Err(CoreError::Data(format!(
                    "node '{}' channel {} has no finite readings",
                    raw.node_ids[nn], cc
                )));
            };
            for tt in 0..first {
                raw.values.data[idx(tt)] = raw.values.data[idx(first)];
                report.back_filled += 1;
            }
            let mut tt = first;
            while tt < t {
                if raw.values.data[idx(tt)].is_finite() {
                    tt += 1;
                    continue;
                }
                let run_start = tt;
                while tt < t && raw.values.data[idx(tt)].is_nan() {
                    tt += 1;
                }
                let run_len = tt - run_start;
                let left = raw.values.data[idx(run_start - 1)];
                if tt < t && run_len <= max_interp {
                    let right = raw.values.data[idx(tt)];
                    for (k, gap_t) in (run_start..tt).enumerate() {
                        let frac = (k + 1) as f64 / (run_len + 1) as f64;
                        raw.values.data[idx(gap_t)] = left + (right - left) * frac;
                        report.interpolated += 1;
                    }
                } else {
                    for gap_t in run_start..tt {
                        raw.values.data[idx(gap_t)] = left;
                        report.carried_forward += 1;
                    }
                }
            }
        }
    }
    Ok(report)
}

/// Chronological split proportions as integer weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
pub struct SplitSpec {
    pub train: u32,
    pub val: u32,
    pub test: u32,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train: 6,
            val: 2,
            test: 2,
        }
    }
}

impl SplitSpec {
    /// Boundary indices (train end, val end) computed with exact integer
    /// arithmetic so no float rounding can move a boundary.
    pub fn boundaries(&self, t_len: usize) -> Result<(usize, usize)> {
        let total = (self.train + self.val + self.test) as u64;
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(CoreError::Config(format!(
                "split weights must all be positive, got {}:{}:{}",
                self.train, self.val, self.test
            )));
        }
        let i1 = (t_len as u64 * self.train as u64 / total) as usize;
        let i2 = (t_len as u64 * (self.train + self.val) as u64 / total) as usize;
        Ok((i1, i2))
    }
}

/// Copy a contiguous time range out of a series.
pub fn slice_time(raw: &RawSeries, t0: usize, t1: usize) -> Result<RawSeries> {
    let (n, c) = (raw.n_nodes(), raw.channels());
    if t1 < t0 || t1 > raw.t_len() {
        return Err(CoreError::Shape(format!(
            "time slice {t0}..{t1} out of range for length {}",
            raw.t_len()
        )));
    }
    let data = raw.values.data[t0 * n * c..t1 * n * c].to_vec();
    RawSeries::new(
        Tensor::new(vec![t1 - t0, n, c], data)?,
        raw.interval_minutes,
        raw.node_ids.clone(),
    )
}

/// Split into train, validation and test segments in time order.
pub fn split_chronological(
    raw: &RawSeries,
    spec: &SplitSpec,
) -> Result<(RawSeries, RawSeries, RawSeries)> {
    let (i1, i2) = spec.boundaries(raw.t_len())?;
    Ok((
        slice_time(raw, 0, i1)?,
        slice_time(raw, i1, i2)?,
        slice_time(raw, i2, raw.t_len())?,
    ))
}

/// Per-channel z-score statistics fitted on the training split.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

pub fn fit_normalizer(train: &RawSeries) -> Result<Normalizer> {
    let c = train.channels();
    let mut mean = vec![0.0; c];
    let mut std = vec![0.0; c];
    for cc in 0..c {
        let mut sum = 0.0;
        let mut count = 0usize;
        for t in 0..train.t_len() {
            for n in 0..train.n_nodes() {
                let v = train.get(t, n, cc);
                if v.is_finite() {
                    sum += v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            return Err(CoreError::Data(format!(
                "channel {cc} has no finite values in the training split"
            )));
        }
        let mu = sum / count as f64;
        let mut sq = 0.0;
        for t in 0..train.t_len() {
            for n in 0..train.n_nodes() {
                let v = train.get(t, n, cc);
                if v.is_finite() {
                    sq += (v - mu) * (v - mu);
                }
            }
        }
        let sigma = (sq / count as f64).sqrt();
        if sigma < 1e-12 {
            return Err(CoreError::Config(format!(
                "channel {cc} is constant in the training split; z-score normalization undefined"
            )));
        }
        mean[cc] = mu;
        std[cc] = sigma;
    }
    Ok(Normalizer { mean, std })
}

impl Normalizer {
    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Apply (x - mean) / std per channel. Works on any [..., C] tensor.
    pub fn normalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, mu, sd| (v - mu) / sd)
    }

    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        self.apply(x, |v, mu, sd| v * sd + mu)
    }

    fn apply(&self, x: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Result<Tensor> {
        let c = self.channels();
        if x.last_dim() != c {
            return Err(CoreError::Shape(format!(
                "normalizer has {} channels but tensor last axis is {}",
                c,
                x.last_dim()
            )));
        }
        let mut out = x.clone();
        for (i, v) in out.data.iter_mut().enumerate() {
            let cc = i % c;
            *v = f(*v, self.mean[cc], self.std[cc]);
        }
        Ok(out)
    }
}

/// Sidecar metadata stored next to a `.pmxt` series file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeriesMeta {
    pub interval_minutes: u32,
    pub node_ids: Vec<String>,
}

fn meta_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("meta.json")
}

pub fn save_series(path: &Path, raw: &RawSeries) -> Result<()> {
    pmxt::write_pmxt(path, &raw.values)?;
    let meta = SeriesMeta {
        interval_minutes: raw.interval_minutes,
        node_ids: raw.node_ids.clone(),
    };
    let json = serde_json::to_string_pretty(&meta)
        .map_err(|e| CoreError::Data(format!("serializing series metadata: {e}")))?;
    std::fs::write(meta_path(path), json).map_err(|e| CoreError::io(meta_path(path), e))
}

/// Load a series from a `.pmxt` tensor (with metadata sidecar) or a CSV.
pub fn load_series(path: &Path) -> Result<RawSeries> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("csv") => csvio::read_csv_series(path),
        Some("pmxt") => {
            let values = pmxt::read_pmxt(path)?;
            if values.rank() != 3 {
                return Err(CoreError::Data(format!(
                    "series tensor in {} must be [T, N, C], got {:?}",
                    path.display(),
                    values.shape
                )));
            }
            let mp = meta_path(path);
            let meta: SeriesMeta = if mp.exists() {
                let text = std::fs::read_to_string(&mp).map_err(|e| CoreError::io(&mp, e))?;
                serde_json::from_str(&text).map_err(|e| CoreError::Data(format!(
                    "parsing series metadata {}: {e}",
                    mp.display()
                )))?
            } else {
                log::warn!(
                    "no metadata sidecar {}; assuming 5-minute interval, synthetic node ids",
                    mp.display()
                );
                SeriesMeta {
                    interval_minutes: 5,
                    node_ids: (0..values.dim(1)).map(|i| format!("node_{i:04}")).collect(),
                }
            };
            RawSeries::new(values, meta.interval_minutes, meta.node_ids)
        }
        _ => Err(CoreError::Config(format!(
            "unsupported series file extension in {}; expected .pmxt or .csv",
            path.display()
        ))),
    }
}
