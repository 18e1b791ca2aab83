//! Sliding-window sampling over a normalized series.
//!
//! A window is anchored at its first forecast step t: the long history
//! covers [t - t_long, t), the short history is its tail [t - t_in, t),
//! and the target covers [t, t + horizon). Anchors advance by `stride`.
//! The sampler only stores anchor indices; tensors are materialized per
//! sample.

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct WindowSpec {
    pub t_in: usize,
    pub horizon: usize,
    pub t_long: usize,
    pub stride: usize,
}

#[derive(Debug, Clone)]
pub struct WindowSample {
    /// [t_in, N, C] immediately before the anchor.
    pub x_short: Tensor,
    /// [t_long, N, C] ending at the anchor; equals x_short when t_long == t_in.
    pub x_long: Tensor,
    /// [horizon, N, C] from the anchor on.
    pub y: Tensor,
    /// Absolute index of the first forecast step within the series.
    pub anchor: usize,
}

#[derive(Debug)]
pub struct WindowSampler<'a> {
    values: &'a Tensor,
    pub spec: WindowSpec,
    pub anchors: Vec<usize>,
}

impl<'a> WindowSampler<'a> {
    pub fn new(values: &'a Tensor, spec: WindowSpec) -> Result<Self> {
        if values.rank() != 3 {
            return Err(CoreError::Shape(format!(
                "window sampler needs a [T, N, C] tensor, got {:?}",
                values.shape
            )));
        }
        if spec.t_in == 0 || spec.horizon == 0 || spec.stride == 0 {
            return Err(CoreError::Config(format!(
                "window spec must have t_in, horizon, stride >= 1, got {spec:?}"
            )));
        }
        if spec.t_long < spec.t_in {
            return Err(CoreError::Config(format!(
                "t_long {} must be at least t_in {}",
                spec.t_long, spec.t_in
            )));
        }
        let t_len = values.dim(0);
        let anchors: Vec<usize> = if t_len >= spec.t_long + spec.horizon {
            (spec.t_long..=t_len - spec.horizon)
                .step_by(spec.stride)
                .collect()
        } else {
            Vec::new()
        };
        if anchors.is_empty() {
            log::warn!(
                "series of length {t_len} too short for t_long {} + horizon {}; no windows",
                spec.t_long,
                spec.horizon
            );
        }
        Ok(WindowSampler {
            values,
            spec,
            anchors,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    fn time_block(&self, t0: usize, t1: usize) -> Tensor {
        let (n, c) = (self.values.dim(1), self.values.dim(2));
        Tensor {
            shape: vec![t1 - t0, n, c],
            data: self.values.data[t0 * n * c..t1 * n * c].to_vec(),
        }
    }

    pub fn sample(&self, i: usize) -> WindowSample {
        let t = self.anchors[i];
        WindowSample {
            x_short: self.time_block(t - self.spec.t_in, t),
            x_long: self.time_block(t - self.spec.t_long, t),
            y: self.time_block(t, t + self.spec.horizon),
            anchor: t,
        }
    }

    /// Deterministic shuffled visit order for one epoch.
    pub fn shuffled_order(&self, rng: &mut Rng) -> Vec<usize> {
        rng.permutation(self.len())
    }
}
