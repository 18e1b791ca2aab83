//! End-to-end workflows behind the CLI subcommands.
//!
//! Every command resolves its configuration, performs its work, and leaves
//! a self-describing output directory: the resolved config snapshot, any
//! checkpoints, and CSV logs or reports. Nothing written here embeds a
//! timestamp, so identical configurations produce byte-identical files.

use std::path::{Path, PathBuf};

use serde_json::json;

use crate::config::RunConfig;
use crate::data::synth::{generate, SynthConfig};
use crate::data::{
    clean_nans, fit_normalizer, load_series, save_series, split_chronological, Normalizer,
    RawSeries,
};
use crate::error::{CoreError, Result};
use crate::forecaster::train::{predict_split, score_stacks, train_forecaster, TrainRun};
use crate::forecaster::{load_premixer, save_premixer, PreMixer};
use crate::metrics::{horizon_report, write_report_csv, write_report_json, MetricsReport};
use crate::pretrain::{load_piencoder, save_piencoder, train_piencoder, PiEncoder, PretrainRun};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Longest NaN run repaired by interpolation; longer gaps carry forward.
pub const MAX_INTERP_STEPS: usize = 12;

fn write_text(path: &Path, content: &str) -> Result<()> {
    std::fs::write(path, content).map_err(|e| CoreError::io(path, e))
}

fn prepare_out_dir(cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CoreError::io(&cfg.out_dir, e))?;
    cfg.save(&cfg.out_dir.join("config.json"))
}

fn require_data(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.data.clone().ok_or_else(|| {
        CoreError::Config("no dataset path set; pass --data or add \"data\" to the config".into())
    })
}

/// Load, repair and chronologically split a dataset, then normalize every
/// split with statistics fitted on the training segment only.
pub struct PreparedData {
    pub raw: RawSeries,
    pub normalizer: Normalizer,
    pub train: Tensor,
    pub val: Tensor,
    pub test: Tensor,
}

pub fn prepare_data(cfg: &RunConfig) -> Result<PreparedData> {
    let path = require_data(cfg)?;
    let mut raw = load_series(&path)?;
    let report = clean_nans(&mut raw, MAX_INTERP_STEPS)?;
    if report.interpolated + report.carried_forward + report.back_filled > 0 {
        log::info!(
            "repaired missing values: {} interpolated, {} carried forward, {} back-filled",
            report.interpolated,
            report.carried_forward,
            report.back_filled
        );
    }
    let (train, val, test) = split_chronological(&raw, &cfg.split)?;
    let normalizer = fit_normalizer(&train)?;
    Ok(PreparedData {
        train: normalizer.normalize(&train.values)?,
        val: normalizer.normalize(&val.values)?,
        test: normalizer.normalize(&test.values)?,
        normalizer,
        raw,
    })
}

/// Generate a synthetic dataset into `out_dir`/synthetic.pmxt.
pub fn run_synth(cfg: &RunConfig) -> Result<PathBuf> {
    prepare_out_dir(cfg)?;
    let series = generate(&SynthConfig {
        nodes: cfg.nodes,
        days: cfg.days,
        seed: cfg.seed,
        steps_per_day: cfg.steps_per_day,
        noise_sigma: cfg.noise_sigma,
    })?;
    let path = cfg.out_dir.join("synthetic.pmxt");
    save_series(&path, &series)?;
    log::info!(
        "wrote {} steps x {} nodes x {} channels to {}",
        series.t_len(),
        series.n_nodes(),
        series.channels(),
        path.display()
    );
    Ok(path)
}

fn pretrain_log_csv(run: &PretrainRun) -> String {
    let mut out = String::from("epoch,recon,cl,total\n");
    for e in &run.log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6}\n",
            e.epoch, e.recon, e.contrastive, e.total
        ));
    }
    out
}

/// Pre-train the patch encoder on the training split.
pub fn run_pretrain(cfg: &RunConfig) -> Result<PretrainRun> {
    prepare_out_dir(cfg)?;
    let data = prepare_data(cfg)?;
    let channels = data.raw.channels();
    let ckpt_dir = cfg.out_dir.join("piencoder");
    let resume = if cfg.resume {
        let (model, adam, _, step) = load_piencoder(&ckpt_dir)?;
        let adam = adam.unwrap_or_else(|| crate::optim::Adam::new(cfg.pretrain_lr));
        log::info!("resuming from step {step}");
        Some((model, adam, step))
    } else {
        None
    };
    let run = train_piencoder(
        &data.train,
        cfg.piencoder_config(channels),
        &cfg.pretrain_options(),
        resume,
    )?;
    write_text(&cfg.out_dir.join("pretrain_log.csv"), &pretrain_log_csv(&run))?;
    save_piencoder(&ckpt_dir, &run.model, cfg.seed, run.global_step, Some(&run.optim))?;
    log::info!(
        "encoder has {} parameters; checkpoint at {}",
        run.model.param_count(),
        ckpt_dir.display()
    );
    Ok(run)
}

fn train_log_csv(run: &TrainRun) -> String {
    let mut out = String::from("epoch,train_mae,val_mae,val_rmse,val_mape\n");
    for e in &run.log {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6}\n",
            e.epoch, e.train_mae, e.val_mae, e.val_rmse, e.val_mape
        ));
    }
    out
}

fn load_encoder_for(cfg: &RunConfig) -> Result<Option<PiEncoder>> {
    if cfg.no_pretrain {
        return Ok(None);
    }
    let dir = cfg
        .encoder_dir
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("piencoder"));
    let (model, _, _, _) = load_piencoder(&dir)?;
    Ok(Some(model))
}

fn params_json(model: &PreMixer) -> String {
    let (total, trainable, frozen) = model.param_counts();
    serde_json::to_string_pretty(&json!({
        "total": total,
        "trainable": trainable,
        "frozen_encoder": frozen,
    }))
    .expect("parameter counts serialize")
        + "\n"
}

/// Test-split forecasts for a trained model, stacked and denormalized.
fn test_forecasts(
    model: &PreMixer,
    data: &PreparedData,
    batch: usize,
) -> Result<(Tensor, Tensor)> {
    predict_split(model, &data.test, &data.normalizer, 1, batch)?.ok_or_else(|| {
        CoreError::Data("test split is too short for a single forecast window".into())
    })
}

/// Either the full horizon-structured report or, for non-standard
/// horizons, pooled metrics alone.
pub enum EvalReport {
    Horizon(MetricsReport),
    Pooled { mae: f64, rmse: f64, mape: f64 },
}

impl EvalReport {
    pub fn average_mae(&self) -> f64 {
        match self {
            EvalReport::Horizon(r) => r.average.mae,
            EvalReport::Pooled { mae, .. } => *mae,
        }
    }
}

fn write_metrics(
    out_dir: &Path,
    preds: &Tensor,
    truths: &Tensor,
    horizon: usize,
    threshold: f64,
) -> Result<EvalReport> {
    if horizon == 12 {
        let report = horizon_report(preds, truths, threshold)?;
        write_report_csv(&out_dir.join("metrics.csv"), &report)?;
        write_report_json(&out_dir.join("metrics.json"), &report)?;
        Ok(EvalReport::Horizon(report))
    } else {
        let s = score_stacks(preds, truths)?;
        write_text(
            &out_dir.join("metrics.csv"),
            &format!(
                "horizon,mae,rmse,mape_percent\naverage,{:.6},{:.6},{:.6}\n",
                s.mae, s.rmse, s.mape
            ),
        )?;
        let js = serde_json::to_string_pretty(&json!({
            "average": { "mae": s.mae, "rmse": s.rmse, "mape_percent": s.mape }
        }))
        .expect("metrics serialize");
        write_text(&out_dir.join("metrics.json"), &(js + "\n"))?;
        Ok(EvalReport::Pooled {
            mae: s.mae,
            rmse: s.rmse,
            mape: s.mape,
        })
    }
}

pub struct TrainOutcome {
    pub run: TrainRun,
    pub report: EvalReport,
}

/// Train the forecaster, checkpoint the best weights, and report on the
/// test split.
pub fn run_train(cfg: &RunConfig) -> Result<TrainOutcome> {
    prepare_out_dir(cfg)?;
    let data = prepare_data(cfg)?;
    let (n, c) = (data.raw.n_nodes(), data.raw.channels());
    let encoder = load_encoder_for(cfg)?;
    let fc = cfg.forecast_config(n, c)?;
    let mut init_rng = Rng::new(cfg.seed).stream(0);
    let model = PreMixer::new(fc, encoder, &mut init_rng)?;
    let (total, trainable, frozen) = model.param_counts();
    log::info!("forecaster parameters: {total} total, {trainable} trainable, {frozen} frozen");
    write_text(&cfg.out_dir.join("params.json"), &params_json(&model))?;

    let run = train_forecaster(
        model,
        &data.train,
        &data.val,
        &data.normalizer,
        &cfg.train_options(),
    )?;
    write_text(&cfg.out_dir.join("train_log.csv"), &train_log_csv(&run))?;
    save_premixer(
        &cfg.out_dir.join("forecaster"),
        &run.model,
        cfg.seed,
        run.global_step,
        Some(&run.optim),
    )?;

    let (preds, truths) = test_forecasts(&run.model, &data, cfg.batch)?;
    let report = write_metrics(&cfg.out_dir, &preds, &truths, cfg.horizon, cfg.mape_threshold)?;
    Ok(TrainOutcome { run, report })
}

/// Evaluate a stored forecaster checkpoint on the test split.
pub fn run_eval(cfg: &RunConfig) -> Result<EvalReport> {
    prepare_out_dir(cfg)?;
    let ckpt = cfg
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| cfg.out_dir.join("forecaster"));
    let (model, _, _, _) = load_premixer(&ckpt)?;
    let data = prepare_data(cfg)?;
    let (preds, truths) = test_forecasts(&model, &data, cfg.batch)?;
    write_metrics(&cfg.out_dir, &preds, &truths, model.cfg.horizon, cfg.mape_threshold)
}

/// Train a forecaster on a target dataset around an encoder pre-trained
/// elsewhere. The encoder is patch- and node-independent, so the source
/// and target node counts are free to differ.
pub fn run_transfer(cfg: &RunConfig) -> Result<TrainOutcome> {
    if cfg.no_pretrain {
        return Err(CoreError::Config(
            "transfer reuses a pre-trained encoder; drop the no_pretrain flag".into(),
        ));
    }
    if cfg.encoder_dir.is_none() {
        return Err(CoreError::Config(
            "transfer needs --encoder pointing at the source checkpoint".into(),
        ));
    }
    run_train(cfg)
}
