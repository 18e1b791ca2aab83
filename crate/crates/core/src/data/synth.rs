//! Synthetic traffic-like series generator.
//!
//! Each node gets seeded daily and weekly sinusoids on top of a base level,
//! with the daily amplitude damped on weekends and Gaussian reading noise.
//! Coefficients are drawn per node from independent RNG streams, so a
//! dataset is fully determined by (nodes, days, seed, steps_per_day,
//! noise_sigma) and adding nodes never perturbs existing ones.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::RawSeries;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub nodes: usize,
    pub days: usize,
    pub seed: u64,
    pub steps_per_day: usize,
    pub noise_sigma: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            nodes: 8,
            days: 28,
            seed: 0,
            steps_per_day: 96,
            noise_sigma: 2.0,
        }
    }
}

const WEEKEND_DAMP: f64 = 0.7;

pub fn generate(cfg: &SynthConfig) -> Result<RawSeries> {
    if cfg.nodes == 0 {
        return Err(CoreError::Config("synthetic dataset needs nodes >= 1".into()));
    }
    if cfg.days == 0 {
        return Err(CoreError::Config("synthetic dataset needs days >= 1".into()));
    }
    if cfg.steps_per_day == 0 || 1440 % cfg.steps_per_day != 0 {
        return Err(CoreError::Config(format!(
            "steps_per_day must divide 1440 minutes, got {}",
            cfg.steps_per_day
        )));
    }
    if cfg.noise_sigma < 0.0 {
        return Err(CoreError::Config(format!(
            "noise_sigma must be non-negative, got {}",
            cfg.noise_sigma
        )));
    }
    let spd = cfg.steps_per_day;
    let t_len = cfg.days * spd;
    let root = Rng::new(cfg.seed);
    let tau = std::f64::consts::TAU;

    let mut values = Tensor::zeros(&[t_len, cfg.nodes, 1]);
    for n in 0..cfg.nodes {
        let mut coef = root.stream(n as u64 * 2);
        let mut noise = root.stream(n as u64 * 2 + 1);
        let base = coef.uniform(200.0, 500.0);
        let amp_daily = coef.uniform(30.0, 120.0);
        let phase_daily = coef.uniform(0.0, tau);
        let amp_weekly = coef.uniform(10.0, 40.0);
        let phase_weekly = coef.uniform(0.0, tau);
        for t in 0..t_len {
            let day = t / spd;
            let damp = if day % 7 < 5 { 1.0 } else { WEEKEND_DAMP };
            let daily = damp * amp_daily * (tau * (t % spd) as f64 / spd as f64 + phase_daily).sin();
            let weekly =
                amp_weekly * (tau * t as f64 / (7 * spd) as f64 + phase_weekly).sin();
            values.data[t * cfg.nodes + n] =
                base + daily + weekly + cfg.noise_sigma * noise.normal();
        }
    }
    RawSeries::new(
        values,
        (1440 / spd) as u32,
        (0..cfg.nodes).map(|n| format!("synth_{n:04}")).collect(),
    )
}
