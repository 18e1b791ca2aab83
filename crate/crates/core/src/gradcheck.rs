//! Central finite-difference gradient checking.
//!
//! `grad_check` perturbs every element of every input tensor by +/- eps,
//! evaluates the scalar loss closure, and compares the resulting central
//! difference against the provided analytic gradient. The error for one
//! tensor is the largest absolute discrepancy divided by the largest
//! gradient magnitude in that tensor (floored to dodge division by zero),
//! so a systematically wrong backward pass shows up as an O(1) error while
//! finite-difference noise on healthy gradients stays many orders below
//! the tolerances used in tests.

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Max relative error between analytic gradients and central differences.
///
/// `f` must be a pure function of `inputs`; it is called 2 * numel times.
pub fn grad_check(
    f: &mut dyn FnMut(&[Tensor]) -> f64,
    inputs: &[Tensor],
    analytic: &[Tensor],
    eps: f64,
) -> Result<f64> {
    if inputs.len() != analytic.len() {
        return Err(CoreError::Shape(format!(
            "grad_check got {} inputs but {} analytic gradients",
            inputs.len(),
            analytic.len()
        )));
    }
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut worst = 0.0f64;
    for ti in 0..inputs.len() {
        if inputs[ti].shape != analytic[ti].shape {
            return Err(CoreError::Shape(format!(
                "grad_check input {} has shape {:?} but analytic gradient {:?}",
                ti, inputs[ti].shape, analytic[ti].shape
            )));
        }
        let mut max_diff = 0.0f64;
        let mut max_fd = 0.0f64;
        for e in 0..inputs[ti].numel() {
            let orig = work[ti].data[e];
            work[ti].data[e] = orig + eps;
            let up = f(&work);
            work[ti].data[e] = orig - eps;
            let down = f(&work);
            work[ti].data[e] = orig;
            let fd = (up - down) / (2.0 * eps);
            if !fd.is_finite() {
                return Err(CoreError::Numeric(format!(
                    "non-finite central difference {fd} for input {ti} element {e}"
                )));
            }
            max_fd = max_fd.max(fd.abs());
            max_diff = max_diff.max((fd - analytic[ti].data[e]).abs());
        }
        let scale = max_fd.max(analytic[ti].max_abs()).max(1e-8);
        worst = worst.max(max_diff / scale);
    }
    Ok(worst)
}

/// Default perturbation used across the engine's checks.
pub const GRAD_CHECK_EPS: f64 = 1e-4;

/// Regression targets safe for finite differencing an absolute-error loss.
///
/// Every target sits 0.3 to 1.0 away from the model output, so an eps
/// perturbation cannot cross the kink of |y_hat - y|. Each column also
/// keeps an uneven sign split; a perfectly balanced column would zero the
/// output bias gradient exactly and leave nothing but rounding noise for
/// the central difference to measure.
pub fn kink_safe_targets(base: &Tensor, rng: &mut crate::rng::Rng) -> Tensor {
    let cols = base.last_dim();
    let rows = base.numel() / cols;
    let mut signs = vec![0.0f64; rows * cols];
    for s in signs.iter_mut() {
        *s = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
    }
    for c in 0..cols {
        let total: f64 = (0..rows).map(|r| signs[r * cols + c]).sum();
        if total == 0.0 {
            let last = (rows - 1) * cols + c;
            signs[last] = -signs[last];
        }
    }
    let mut y = base.clone();
    for (i, v) in y.data.iter_mut().enumerate() {
        *v += signs[i] * (0.3 + 0.7 * rng.next_f64());
    }
    y
}

/// One audited backward pass: the worst relative error seen over all
/// seeds, against the tolerance the suite holds it to.
#[derive(Debug, Clone)]
pub struct SuiteRow {
    pub name: &'static str,
    pub seeds: usize,
    pub max_err: f64,
    pub tolerance: f64,
}

impl SuiteRow {
    pub fn passed(&self) -> bool {
        self.max_err < self.tolerance
    }
}

const SUITE_SEEDS: u64 = 10;

fn randn(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor {
        shape: shape.to_vec(),
        data: (0..n).map(|_| rng.normal()).collect(),
    }
}

fn linear_row() -> Result<f64> {
    use crate::layers::Linear;
    let mut worst = 0.0f64;
    for seed in 0..SUITE_SEEDS {
        let mut rng = crate::rng::Rng::new(1_000 + seed);
        let lin = Linear::new("t", 4, 3, true, &mut rng);
        let x = randn(&[5, 4], &mut rng);
        let wsum = randn(&[5, 3], &mut rng);
        let mut probe = lin.clone();
        let dx = probe.backward(&x, &wsum)?;
        let analytic = vec![
            dx,
            probe.w.grad.clone(),
            probe.b.as_ref().expect("bias").grad.clone(),
        ];
        let inputs = vec![
            x,
            lin.w.value.clone(),
            lin.b.as_ref().expect("bias").value.clone(),
        ];
        let mut f = |ts: &[Tensor]| {
            let mut l = lin.clone();
            l.w.value = ts[1].clone();
            l.b.as_mut().expect("bias").value = ts[2].clone();
            let y = l.forward(&ts[0]).expect("forward");
            y.data.iter().zip(&wsum.data).map(|(a, b)| a * b).sum()
        };
        worst = worst.max(grad_check(&mut f, &inputs, &analytic, GRAD_CHECK_EPS)?);
    }
    Ok(worst)
}

fn layer_norm_row() -> Result<f64> {
    use crate::layers::LayerNorm;
    let mut worst = 0.0f64;
    for seed in 0..SUITE_SEEDS {
        let mut rng = crate::rng::Rng::new(2_000 + seed);
        let ln = LayerNorm::new("t", 6)?;
        let x = randn(&[4, 6], &mut rng).map(|v| v * 2.0);
        let wsum = randn(&[4, 6], &mut rng);
        let mut probe = ln.clone();
        let (_, cache) = probe.forward(&x)?;
        let dx = probe.backward(&cache, &wsum)?;
        let analytic = vec![dx, probe.gamma.grad.clone(), probe.beta.grad.clone()];
        let inputs = vec![x, ln.gamma.value.clone(), ln.beta.value.clone()];
        let mut f = |ts: &[Tensor]| {
            let mut l = ln.clone();
            l.gamma.value = ts[1].clone();
            l.beta.value = ts[2].clone();
            let (y, _) = l.forward(&ts[0]).expect("forward");
            y.data.iter().zip(&wsum.data).map(|(a, b)| a * b).sum()
        };
        worst = worst.max(grad_check(&mut f, &inputs, &analytic, GRAD_CHECK_EPS)?);
    }
    Ok(worst)
}

fn gelu_row() -> Result<f64> {
    use crate::layers::{gelu, gelu_backward};
    let mut worst = 0.0f64;
    for seed in 0..SUITE_SEEDS {
        let mut rng = crate::rng::Rng::new(3_000 + seed);
        let x = randn(&[12], &mut rng).map(|v| v * 2.0);
        let wsum = randn(&[12], &mut rng);
        let analytic = gelu_backward(&x, &wsum)?;
        let mut f = |ts: &[Tensor]| {
            gelu(&ts[0])
                .data
                .iter()
                .zip(&wsum.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        worst = worst.max(grad_check(&mut f, &[x], &[analytic], GRAD_CHECK_EPS)?);
    }
    Ok(worst)
}

fn softmax_row() -> Result<f64> {
    use crate::layers::{softmax_rows, softmax_rows_backward};
    let mut worst = 0.0f64;
    for seed in 0..SUITE_SEEDS {
        let mut rng = crate::rng::Rng::new(4_000 + seed);
        let x = randn(&[3, 5], &mut rng);
        let wsum = randn(&[3, 5], &mut rng);
        let y = softmax_rows(&x);
        let analytic = softmax_rows_backward(&y, &wsum)?;
        let mut f = |ts: &[Tensor]| {
            softmax_rows(&ts[0])
                .data
                .iter()
                .zip(&wsum.data)
                .map(|(a, b)| a * b)
                .sum()
        };
        worst = worst.max(grad_check(&mut f, &[x], &[analytic], GRAD_CHECK_EPS)?);
    }
    Ok(worst)
}

fn piencoder_row() -> Result<f64> {
    use crate::patch::{complementary_masks, patchify};
    use crate::pretrain::{masked_total_grads, masked_total_loss, PiEncoder, PiEncoderConfig};
    let cfg = PiEncoderConfig::new(2, 1, 4, 0.0);
    let mut worst = 0.0f64;
    for seed in 0..SUITE_SEEDS {
        let mut rng = crate::rng::Rng::new(5_000 + seed);
        let model = PiEncoder::new(cfg, &mut rng);
        // Inputs scaled away from zero keep first-layer pre-activations
        // off the ReLU kink under the eps probes.
        let values = randn(&[4, 2, 1], &mut rng).map(|v| v * 1.5);
        let ps = patchify(&values, 2)?;
        let masks = complementary_masks(ps.t_p(), ps.n_nodes(), 0.5, &mut rng)?;

        let mut probe = model.clone();
        masked_total_grads(&ps, &masks, &mut probe, true)?;
        let inputs: Vec<Tensor> = model.params().iter().map(|p| p.value.clone()).collect();
        let analytic: Vec<Tensor> = probe.params().iter().map(|p| p.grad.clone()).collect();
        let mut f = |ts: &[Tensor]| {
            let mut m = model.clone();
            for (pm, t) in m.params_mut().into_iter().zip(ts) {
                pm.value = t.clone();
            }
            masked_total_loss(&ps, &masks, &m, true).expect("loss")
        };
        worst = worst.max(grad_check(&mut f, &inputs, &analytic, GRAD_CHECK_EPS)?);
    }
    Ok(worst)
}

fn premixer_row(mode: crate::forecaster::SpatialMode) -> Result<f64> {
    use crate::forecaster::{
        regression_loss, regression_loss_grad, Aggregation, ForecastConfig, PreMixer,
    };
    use crate::pretrain::{PiEncoder, PiEncoderConfig};
    let cfg = ForecastConfig {
        t_in: 4,
        horizon: 3,
        channels: 1,
        n_nodes: 3,
        d_model: 2,
        d_pe: 4,
        d_emb: 3,
        d_ctx: 4,
        spatial_layers: 2,
        dropout: 0.0,
        spatial_mode: mode,
        aggregation: Aggregation::Mean,
        no_pretrain: false,
        no_context: false,
        no_stpe: false,
    };
    let mut worst = 0.0f64;
    for seed in 0..SUITE_SEEDS {
        let mut rng = crate::rng::Rng::new(6_000 + seed);
        let enc = PiEncoder::new(PiEncoderConfig::new(cfg.t_in, cfg.channels, 5, 0.0), &mut rng);
        let model = PreMixer::new(cfg.clone(), enc.into(), &mut rng)?;
        let x = randn(&[2, cfg.t_in, cfg.n_nodes, cfg.channels], &mut rng);

        let base = model.forward_batch(&x, false, &mut crate::rng::Rng::new(0))?;
        let y = kink_safe_targets(&base.y_hat, &mut rng);

        let mut probe = model.clone();
        let cache = probe.forward_batch(&x, false, &mut crate::rng::Rng::new(0))?;
        let (_, d_yhat) = regression_loss_grad(&cache.y_hat, &y)?;
        probe.backward_batch(&cache, &d_yhat)?;

        let names = probe.trainable_param_names();
        let inputs: Vec<Tensor> = probe
            .params()
            .iter()
            .filter(|p| names.contains(&p.name))
            .map(|p| p.value.clone())
            .collect();
        let analytic: Vec<Tensor> = probe
            .params()
            .iter()
            .filter(|p| names.contains(&p.name))
            .map(|p| p.grad.clone())
            .collect();
        let mut f = |ts: &[Tensor]| {
            let mut m = model.clone();
            for pm in m.params_mut() {
                if let Some(idx) = names.iter().position(|n| *n == pm.name) {
                    pm.value = ts[idx].clone();
                }
            }
            let c = m
                .forward_batch(&x, false, &mut crate::rng::Rng::new(0))
                .expect("forward");
            regression_loss(&c.y_hat, &y).expect("loss")
        };
        worst = worst.max(grad_check(&mut f, &inputs, &analytic, GRAD_CHECK_EPS)?);
    }
    Ok(worst)
}

/// Finite-difference audit of every hand-derived backward pass, from the
/// individual layers up to both full models. Each row reports the worst
/// relative error over ten seeded repetitions.
pub fn run_suite() -> Result<Vec<SuiteRow>> {
    use crate::forecaster::SpatialMode;
    let seeds = SUITE_SEEDS as usize;
    let row = |name, max_err, tolerance| SuiteRow {
        name,
        seeds,
        max_err,
        tolerance,
    };
    Ok(vec![
        row("linear", linear_row()?, 1e-7),
        row("layer_norm", layer_norm_row()?, 1e-6),
        row("gelu", gelu_row()?, 1e-7),
        row("softmax", softmax_row()?, 1e-6),
        row("piencoder_total_loss", piencoder_row()?, 1e-5),
        row(
            "premixer_structured",
            premixer_row(SpatialMode::Structured)?,
            1e-4,
        ),
        row("premixer_basic", premixer_row(SpatialMode::Basic)?, 1e-4),
    ])
}
