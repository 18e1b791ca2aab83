//! Supervised training loop for the forecaster.
//!
//! Training windows are visited in a fresh shuffled order each epoch, one
//! optimizer step per batch, all randomness drawn from counter streams of
//! the run seed. After every epoch the model is scored on the validation
//! split in denormalized units; the best weights are kept aside and
//! restored when patience runs out or the epoch budget ends.

use crate::data::windows::{WindowSampler, WindowSpec};
use crate::data::Normalizer;
use crate::error::{CoreError, Result};
use crate::metrics::{mae, mape, rmse, zero_mask, MAPE_THRESHOLD};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{regression_loss_grad, rows_to_window, window_to_rows, PreMixer};

#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Anchor stride over the training split.
    pub stride: usize,
    /// Anchor stride over the validation split.
    pub val_stride: usize,
    /// Cap on training windows; a fixed subset is drawn once and revisited
    /// every epoch. 0 keeps them all.
    pub max_train_windows: usize,
    /// Stop once the epoch training MAE drops below this; 0 disables.
    pub target_train_mae: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 100,
            batch: 32,
            lr: 0.005,
            patience: 10,
            seed: 0,
            stride: 1,
            val_stride: 1,
            max_train_windows: 0,
            target_train_mae: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss on the normalized scale.
    pub train_mae: f64,
    /// Validation metrics in original units; NaN when there is no
    /// validation split.
    pub val_mae: f64,
    pub val_rmse: f64,
    pub val_mape: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub model: PreMixer,
    pub optim: Adam,
    pub log: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub global_step: u64,
}

/// Materialize a batch of windows: ([B, T, N, C] inputs, [B*N, horizon*C]
/// target rows on the normalized scale).
pub fn stack_windows(sampler: &WindowSampler, idxs: &[usize]) -> Result<(Tensor, Tensor)> {
    if idxs.is_empty() {
        return Err(CoreError::Shape("empty window batch".into()));
    }
    let spec = sampler.spec;
    let first = sampler.sample(idxs[0]);
    let (n, c) = (first.x_short.dim(1), first.x_short.dim(2));
    let b = idxs.len();
    let mut x = Tensor::zeros(&[b, spec.t_in, n, c]);
    let mut y_rows = Tensor::zeros(&[b * n, spec.horizon * c]);
    let x_len = spec.t_in * n * c;
    for (bi, &idx) in idxs.iter().enumerate() {
        let s = sampler.sample(idx);
        x.data[bi * x_len..(bi + 1) * x_len].copy_from_slice(&s.x_short.data);
        let rows = window_to_rows(&s.y)?;
        let width = spec.horizon * c;
        y_rows.data[bi * n * width..(bi + 1) * n * width].copy_from_slice(&rows.data);
    }
    Ok((x, y_rows))
}

/// Run inference over every anchor of a split and return stacked
/// denormalized (forecasts, truths), both [S, horizon, N, C]. `None` when
/// the split is too short for a single window.
pub fn predict_split(
    model: &PreMixer,
    values_norm: &Tensor,
    norm: &Normalizer,
    stride: usize,
    batch: usize,
) -> Result<Option<(Tensor, Tensor)>> {
    let cfg = &model.cfg;
    let spec = WindowSpec {
        t_in: cfg.t_in,
        horizon: cfg.horizon,
        t_long: cfg.t_in,
        stride,
    };
    let sampler = WindowSampler::new(values_norm, spec)?;
    if sampler.is_empty() {
        return Ok(None);
    }
    let (s_total, n, c) = (sampler.len(), values_norm.dim(1), values_norm.dim(2));
    let win = cfg.horizon * n * c;
    let mut preds = Tensor::zeros(&[s_total, cfg.horizon, n, c]);
    let mut truths = Tensor::zeros(&[s_total, cfg.horizon, n, c]);
    let idxs: Vec<usize> = (0..s_total).collect();
    let mut rng = Rng::new(0);
    for chunk in idxs.chunks(batch.max(1)) {
        let (x, _) = stack_windows(&sampler, chunk)?;
        let cache = model.forward_batch(&x, false, &mut rng)?;
        for (bi, &idx) in chunk.iter().enumerate() {
            let rows = Tensor::new(
                vec![n, cfg.horizon * c],
                cache.y_hat.data[bi * n * cfg.horizon * c..(bi + 1) * n * cfg.horizon * c]
                    .to_vec(),
            )?;
            let window = rows_to_window(&rows, cfg.horizon, c)?;
            let denorm = norm.denormalize(&window)?;
            preds.data[idx * win..(idx + 1) * win].copy_from_slice(&denorm.data);
            let truth = norm.denormalize(&sampler.sample(idx).y)?;
            truths.data[idx * win..(idx + 1) * win].copy_from_slice(&truth.data);
        }
    }
    Ok(Some((preds, truths)))
}

#[derive(Debug, Clone, Copy)]
pub struct ValScores {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

/// Pooled metrics over every step of stacked denormalized forecasts.
pub fn score_stacks(preds: &Tensor, truths: &Tensor) -> Result<ValScores> {
    let mask = zero_mask(truths);
    Ok(ValScores {
        mae: mae(preds, truths, &mask)?,
        rmse: rmse(preds, truths, &mask)?,
        mape: mape(preds, truths, &mask, MAPE_THRESHOLD)?,
    })
}

fn snapshot(model: &PreMixer) -> Vec<(String, Tensor)> {
    model
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.clone()))
        .collect()
}

fn restore(model: &mut PreMixer, saved: &[(String, Tensor)]) {
    for p in model.params_mut() {
        if let Some((_, v)) = saved.iter().find(|(n, _)| *n == p.name) {
            p.value = v.clone();
        }
    }
}

fn encoder_fingerprint(model: &PreMixer) -> Vec<Vec<f64>> {
    model.encoder.as_ref().map_or_else(Vec::new, |e| {
        e.params().iter().map(|p| p.value.data.clone()).collect()
    })
}

/// Train `model` on normalized splits. `train_values` and `val_values` are
/// [T, N, C]; validation metrics are computed in original units through
/// `norm`. An empty validation split disables early stopping.
pub fn train_forecaster(
    mut model: PreMixer,
    train_values: &Tensor,
    val_values: &Tensor,
    norm: &Normalizer,
    opts: &TrainOptions,
) -> Result<TrainRun> {
    if opts.epochs == 0 || opts.batch == 0 {
        return Err(CoreError::Config(
            "training needs at least one epoch and a batch size of one".into(),
        ));
    }
    let spec = WindowSpec {
        t_in: model.cfg.t_in,
        horizon: model.cfg.horizon,
        t_long: model.cfg.t_in,
        stride: opts.stride.max(1),
    };
    let sampler = WindowSampler::new(train_values, spec)?;
    if sampler.is_empty() {
        return Err(CoreError::Data(
            "training split is too short for a single window".into(),
        ));
    }
    let n_windows = if opts.max_train_windows > 0 {
        sampler.len().min(opts.max_train_windows)
    } else {
        sampler.len()
    };
    let frozen = encoder_fingerprint(&model);
    let (_, trainable_count, frozen_count) = model.param_counts();
    log::info!(
        "training {} windows ({} per epoch), {} trainable and {} frozen parameters",
        sampler.len(),
        n_windows,
        trainable_count,
        frozen_count
    );

    let mut optim = Adam::new(opts.lr);
    let root = Rng::new(opts.seed);
    // When capped, the window subset is drawn once so later epochs keep
    // revisiting the same windows instead of resampling the split.
    let subset: Option<Vec<usize>> = if n_windows < sampler.len() {
        let mut sub_rng = root.stream(u64::MAX);
        let mut all = sampler.shuffled_order(&mut sub_rng);
        all.truncate(n_windows);
        Some(all)
    } else {
        None
    };
    let mut log = Vec::new();
    let mut best: Option<Vec<(String, Tensor)>> = None;
    let mut best_epoch = 0usize;
    let mut best_val = f64::INFINITY;
    let mut bad_epochs = 0usize;
    let mut global_step = 0u64;

    'epochs: for epoch in 0..opts.epochs {
        let mut epoch_rng = root.stream(1 + epoch as u64);
        let order = match &subset {
            Some(set) => {
                let mut o = set.clone();
                epoch_rng.shuffle(&mut o);
                o
            }
            None => sampler.shuffled_order(&mut epoch_rng),
        };
        let mut loss_sum = 0.0;
        let mut weight = 0usize;
        for chunk in order.chunks(opts.batch) {
            let (x, y_rows) = stack_windows(&sampler, chunk)?;
            let mut step_rng = epoch_rng.stream(global_step);
            let cache = model.forward_batch(&x, true, &mut step_rng)?;
            let (loss, d_yhat) = regression_loss_grad(&cache.y_hat, &y_rows)?;
            model.zero_grads();
            model.backward_batch(&cache, &d_yhat)?;
            optim.step(&mut model.trainable_params_mut())?;
            loss_sum += loss * chunk.len() as f64;
            weight += chunk.len();
            global_step += 1;
        }
        let train_mae = loss_sum / weight as f64;

        if encoder_fingerprint(&model) != frozen {
            return Err(CoreError::Numeric(
                "frozen encoder weights changed during training".into(),
            ));
        }

        let val = predict_split(&model, val_values, norm, opts.val_stride.max(1), opts.batch)?;
        let scores = match &val {
            Some((p, t)) => Some(score_stacks(p, t)?),
            None => None,
        };
        let entry = EpochLog {
            epoch,
            train_mae,
            val_mae: scores.map_or(f64::NAN, |s| s.mae),
            val_rmse: scores.map_or(f64::NAN, |s| s.rmse),
            val_mape: scores.map_or(f64::NAN, |s| s.mape),
        };
        log::info!(
            "epoch {:>3}  train {:.6}  val mae {:.6}  rmse {:.6}  mape {:.3}%",
            entry.epoch,
            entry.train_mae,
            entry.val_mae,
            entry.val_rmse,
            entry.val_mape
        );
        log.push(entry);

        if let Some(s) = scores {
            if s.mae < best_val {
                best_val = s.mae;
                best_epoch = epoch;
                best = Some(snapshot(&model));
                bad_epochs = 0;
            } else {
                bad_epochs += 1;
                if bad_epochs >= opts.patience {
                    log::info!("no improvement for {} epochs, stopping", opts.patience);
                    break 'epochs;
                }
            }
        } else {
            best_epoch = epoch;
        }

        if opts.target_train_mae > 0.0 && train_mae < opts.target_train_mae {
            log::info!("training loss target reached at epoch {epoch}");
            break 'epochs;
        }
    }

    if let Some(saved) = &best {
        restore(&mut model, saved);
    }
    Ok(TrainRun {
        model,
        optim,
        log,
        best_epoch,
        best_val_mae: best_val,
        global_step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::{ForecastConfig, PreMixer, SpatialMode};
    use crate::pretrain::{PiEncoder, PiEncoderConfig};

    fn tiny_cfg(n: usize) -> ForecastConfig {
        ForecastConfig {
            t_in: 4,
            horizon: 2,
            channels: 1,
            n_nodes: n,
            d_model: 3,
            d_pe: 4,
            d_emb: 3,
            d_ctx: 4,
            spatial_layers: 1,
            dropout: 0.1,
            spatial_mode: SpatialMode::Structured,
            aggregation: crate::forecaster::Aggregation::Mean,
            no_pretrain: false,
            no_context: false,
            no_stpe: false,
        }
    }

    fn tiny_model(n: usize, seed: u64) -> PreMixer {
        let cfg = tiny_cfg(n);
        let enc = PiEncoder::new(
            PiEncoderConfig::new(cfg.t_in, cfg.channels, 4, 0.0),
            &mut Rng::new(seed + 100),
        );
        PreMixer::new(cfg, Some(enc), &mut Rng::new(seed)).unwrap()
    }

    fn wave_series(t: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        let mut data = Vec::with_capacity(t * n);
        for tt in 0..t {
            for nn in 0..n {
                let phase = tt as f64 * 0.35 + nn as f64;
                data.push(phase.sin() + 0.05 * rng.normal());
            }
        }
        Tensor::new(vec![t, n, 1], data).unwrap()
    }

    fn unit_norm() -> Normalizer {
        Normalizer {
            mean: vec![0.0],
            std: vec![1.0],
        }
    }

    fn run_opts(epochs: usize, seed: u64) -> TrainOptions {
        TrainOptions {
            epochs,
            batch: 8,
            lr: 0.01,
            patience: 50,
            seed,
            ..TrainOptions::default()
        }
    }

    #[test]
    fn training_reduces_the_loss() {
        let model = tiny_model(3, 1);
        let train = wave_series(120, 3, 2);
        let val = wave_series(40, 3, 3);
        let run =
            train_forecaster(model, &train, &val, &unit_norm(), &run_opts(12, 4)).unwrap();
        let first = run.log.first().unwrap().train_mae;
        let last = run.log.last().unwrap().train_mae;
        assert!(
            last < 0.6 * first,
            "loss should drop substantially: {first} -> {last}"
        );
        assert!(run.log.iter().all(|e| e.val_mae.is_finite()));
    }

    #[test]
    fn identical_seeds_replay_identically() {
        let train = wave_series(80, 2, 5);
        let val = wave_series(40, 2, 6);
        let mk = || tiny_model(2, 7);
        let a = train_forecaster(mk(), &train, &val, &unit_norm(), &run_opts(11, 8)).unwrap();
        let b = train_forecaster(mk(), &train, &val, &unit_norm(), &run_opts(11, 8)).unwrap();
        assert!(a.global_step >= 10);
        assert_eq!(a.global_step, b.global_step);
        for (x, y) in a.log.iter().zip(&b.log) {
            assert_eq!(x.train_mae.to_bits(), y.train_mae.to_bits());
            assert_eq!(x.val_mae.to_bits(), y.val_mae.to_bits());
        }
        for (p, q) in a.model.params().iter().zip(b.model.params().iter()) {
            assert_eq!(p.value.data, q.value.data, "{}", p.name);
        }
    }

    #[test]
    fn different_seeds_diverge() {
        let train = wave_series(80, 2, 5);
        let val = wave_series(40, 2, 6);
        let a = train_forecaster(tiny_model(2, 7), &train, &val, &unit_norm(), &run_opts(3, 8))
            .unwrap();
        let b = train_forecaster(tiny_model(2, 7), &train, &val, &unit_norm(), &run_opts(3, 9))
            .unwrap();
        assert_ne!(
            a.log.last().unwrap().train_mae.to_bits(),
            b.log.last().unwrap().train_mae.to_bits()
        );
    }

    #[test]
    fn encoder_stays_bitwise_frozen() {
        let model = tiny_model(2, 10);
        let before: Vec<Vec<f64>> = model
            .encoder
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .map(|p| p.value.data.clone())
            .collect();
        let train = wave_series(60, 2, 11);
        let val = wave_series(30, 2, 12);
        let run = train_forecaster(model, &train, &val, &unit_norm(), &run_opts(4, 13)).unwrap();
        let after: Vec<Vec<f64>> = run
            .model
            .encoder
            .as_ref()
            .unwrap()
            .params()
            .iter()
            .map(|p| p.value.data.clone())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn patience_stops_training_early() {
        let model = tiny_model(2, 14);
        let train = wave_series(60, 2, 15);
        let val = wave_series(30, 2, 16);
        let opts = TrainOptions {
            epochs: 60,
            batch: 8,
            lr: 0.05,
            patience: 2,
            seed: 17,
            ..TrainOptions::default()
        };
        let run = train_forecaster(model, &train, &val, &unit_norm(), &opts).unwrap();
        assert!(
            run.log.len() < 60,
            "patience 2 should stop well before 60 epochs"
        );
        // The kept weights correspond to the best epoch, which cannot be
        // the stopping epoch.
        assert!(run.best_epoch + 2 <= run.log.last().unwrap().epoch);
        let scored = predict_split(&run.model, &val, &unit_norm(), 1, 8)
            .unwrap()
            .unwrap();
        let s = score_stacks(&scored.0, &scored.1).unwrap();
        let best_logged = run
            .log
            .iter()
            .map(|e| e.val_mae)
            .fold(f64::INFINITY, f64::min);
        assert!((s.mae - best_logged).abs() < 1e-9);
    }

    #[test]
    fn training_loss_target_short_circuits() {
        let model = tiny_model(2, 18);
        let train = wave_series(60, 2, 19);
        let val = wave_series(30, 2, 20);
        let opts = TrainOptions {
            epochs: 50,
            batch: 8,
            lr: 0.02,
            patience: 50,
            seed: 21,
            target_train_mae: 0.45,
            ..TrainOptions::default()
        };
        let run = train_forecaster(model, &train, &val, &unit_norm(), &opts).unwrap();
        assert!(run.log.last().unwrap().train_mae < 0.45);
        assert!(run.log.len() < 50);
    }

    #[test]
    fn window_cap_limits_steps_per_epoch() {
        let model = tiny_model(2, 22);
        let train = wave_series(100, 2, 23);
        let val = wave_series(30, 2, 24);
        let opts = TrainOptions {
            epochs: 2,
            batch: 4,
            lr: 0.01,
            patience: 10,
            seed: 25,
            max_train_windows: 8,
            ..TrainOptions::default()
        };
        let run = train_forecaster(model, &train, &val, &unit_norm(), &opts).unwrap();
        // 8 windows at batch 4 is 2 steps per epoch.
        assert_eq!(run.global_step, 4);
    }

    #[test]
    fn predict_split_stacks_are_aligned_and_denormalized() {
        let model = tiny_model(2, 26);
        let values = wave_series(40, 2, 27);
        let norm = Normalizer {
            mean: vec![10.0],
            std: vec![2.0],
        };
        let (preds, truths) = predict_split(&model, &values, &norm, 3, 8)
            .unwrap()
            .unwrap();
        assert_eq!(preds.shape, truths.shape);
        assert_eq!(preds.dim(1), 2);
        // Truth entries must match the denormalized source series.
        let spec = WindowSpec {
            t_in: 4,
            horizon: 2,
            t_long: 4,
            stride: 3,
        };
        let sampler = WindowSampler::new(&values, spec).unwrap();
        let s0 = sampler.sample(0);
        let expect = norm.denormalize(&s0.y).unwrap();
        assert_eq!(&truths.data[..expect.numel()], &expect.data[..]);
        // Short split yields no stacks.
        let tiny = wave_series(5, 2, 28);
        assert!(predict_split(&model, &tiny, &norm, 1, 8).unwrap().is_none());
    }
}
