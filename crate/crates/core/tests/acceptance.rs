//! Shipping checks: eleven numbered properties the engine must hold before
//! a release, from gradient fidelity through byte-identical reruns. Each
//! check prints a single pass or FAIL line with the measured numbers; run
//! with --nocapture to watch them stream.

use std::collections::HashSet;
use std::panic::AssertUnwindSafe;
use std::sync::Mutex;
use std::time::Instant;

use premixer_core::config::RunConfig;
use premixer_core::data::synth::{generate, SynthConfig};
use premixer_core::data::{fit_normalizer, split_chronological, SplitSpec};
use premixer_core::encodings::build_stpe;
use premixer_core::forecaster::train::{train_forecaster, TrainOptions};
use premixer_core::forecaster::{
    load_premixer, Aggregation, ForecastConfig, PreMixer, StructuredMixer,
};
use premixer_core::gradcheck::run_suite;
use premixer_core::patch::{apply_mask, complementary_masks, patchify};
use premixer_core::pretrain::{
    contrastive_loss, contrastive_probs, load_piencoder, piencoder_forward, recon_loss,
    reconstruct, train_piencoder, PiEncoder, PiEncoderConfig, PretrainOptions,
};
use premixer_core::rng::Rng;
use premixer_core::tensor::Tensor;
use premixer_core::workflows::{run_eval, run_pretrain, run_synth, run_train, run_transfer};

/// The heavier checks carry wall-clock budgets, so they take turns on the
/// machine instead of contending for it.
static GATE: Mutex<()> = Mutex::new(());

fn check<F: FnOnce() -> String>(idx: usize, what: &str, body: F) {
    let _gate = GATE.lock().unwrap_or_else(|e| e.into_inner());
    match std::panic::catch_unwind(AssertUnwindSafe(body)) {
        Ok(detail) => println!("[{idx:>2}/11] pass  {what}  ({detail})"),
        Err(cause) => {
            println!("[{idx:>2}/11] FAIL  {what}");
            std::panic::resume_unwind(cause);
        }
    }
}

fn randn(shape: &[usize], rng: &mut Rng) -> Tensor {
    let count: usize = shape.iter().product();
    let data: Vec<f64> = (0..count).map(|_| rng.normal()).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Gather rows of a [N, W] matrix: row i of the result is row perm[i].
fn permute_rows(x: &Tensor, perm: &[usize]) -> Tensor {
    let w = x.last_dim();
    let mut out = Tensor::zeros(&x.shape);
    for (i, &src) in perm.iter().enumerate() {
        out.data[i * w..(i + 1) * w].copy_from_slice(&x.data[src * w..(src + 1) * w]);
    }
    out
}

/// Gather the node axis of a [T, N, C] window.
fn permute_nodes(window: &Tensor, perm: &[usize]) -> Tensor {
    let (t, n, c) = (window.dim(0), window.dim(1), window.dim(2));
    let mut out = Tensor::zeros(&window.shape);
    for tt in 0..t {
        for (i, &src) in perm.iter().enumerate() {
            let dst = (tt * n + i) * c;
            let from = (tt * n + src) * c;
            out.data[dst..dst + c].copy_from_slice(&window.data[from..from + c]);
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape, b.shape);
    a.data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn bitwise_equal(a: &Tensor, b: &Tensor) -> bool {
    a.shape == b.shape
        && a.data
            .iter()
            .zip(&b.data)
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

#[test]
fn check_01_gradient_fidelity() {
    check(1, "analytic gradients match finite differences", || {
        let t0 = Instant::now();
        let rows = run_suite().expect("gradient suite runs");
        let secs = t0.elapsed().as_secs_f64();
        assert_eq!(rows.len(), 7);
        let mut worst = 0.0f64;
        for row in &rows {
            assert!(row.seeds >= 10, "{} ran only {} seeds", row.name, row.seeds);
            assert!(
                row.passed(),
                "{}: max rel err {:.3e} over its {:.0e} bound",
                row.name,
                row.max_err,
                row.tolerance
            );
            assert!(row.max_err < 1e-4, "{} err {:.3e}", row.name, row.max_err);
            worst = worst.max(row.max_err);
        }
        assert!(secs < 60.0, "suite took {secs:.1}s");
        format!("7 checks x 10 seeds, worst rel err {worst:.2e}, {secs:.2}s")
    });
}

#[test]
fn check_02_masked_loss_collapses_to_one_sum() {
    check(2, "two-term masked reconstruction equals the plain sum", || {
        let mut rng = Rng::new(202);
        let mut worst = 0.0f64;
        for draw in 0..100usize {
            let t_p = 2 + draw % 5;
            let n_nodes = 1 + draw % 4;
            let len = 2 + draw % 3;
            let chans = 1 + draw % 2;
            let ratio = [0.3, 0.5, 0.7][draw % 3];
            let x_long = randn(&[t_p * len, n_nodes, chans], &mut rng);
            let ps = patchify(&x_long, len).unwrap();
            let masks = complementary_masks(t_p, n_nodes, ratio, &mut rng).unwrap();
            let vis2 = masks.visible_two();
            let model = PiEncoder::new(PiEncoderConfig::new(len, chans, 6, 0.0), &mut rng);
            let view1 = apply_mask(&ps, &masks.visible_one).unwrap();
            let view2 = apply_mask(&ps, &vis2).unwrap();
            let e1 = piencoder_forward(&view1, &model, false, &mut rng).unwrap();
            let e2 = piencoder_forward(&view2, &model, false, &mut rng).unwrap();
            let xhat1 = reconstruct(&model, &e1.z2).unwrap();
            let xhat2 = reconstruct(&model, &e2.z2).unwrap();

            // Hand-summed two-term form: each view contributes its own
            // squared error only where that view kept the patch visible.
            let p = ps.patch_dim();
            let mut two_term = 0.0;
            for (vis, xhat) in [(&masks.visible_one, &xhat1), (&vis2, &xhat2)] {
                for row in 0..t_p * n_nodes {
                    if vis.data[row] != 0.0 {
                        for e in row * p..(row + 1) * p {
                            let d = ps.patches.data[e] - xhat.data[e];
                            two_term += d * d;
                        }
                    }
                }
            }
            let collapsed = recon_loss(&ps, &xhat1, &xhat2, &masks).unwrap();
            let rel = (two_term - collapsed).abs() / collapsed.max(1e-300);
            worst = worst.max(rel);
        }
        assert!(worst < 1e-9, "worst relative difference {worst:.3e}");
        format!("100 draws, worst rel diff {worst:.2e}")
    });
}

#[test]
fn check_03_contrastive_probabilities() {
    check(3, "match probabilities behave on small cases", || {
        let mut rng = Rng::new(303);

        // Every anchor's probabilities over the remaining candidates form
        // a distribution.
        let (t_p, n_nodes, d) = (5, 3, 4);
        let z1 = randn(&[t_p, n_nodes, d], &mut rng);
        let z2 = randn(&[t_p, n_nodes, d], &mut rng);
        let mut worst = 0.0f64;
        for node in 0..n_nodes {
            let probs = contrastive_probs(&z1, &z2, node).unwrap();
            for i in 0..2 * t_p {
                let sum: f64 = probs.data[i * 2 * t_p..(i + 1) * 2 * t_p].iter().sum();
                worst = worst.max((sum - 1.0).abs());
            }
        }
        assert!(worst < 1e-9, "row sum off by {worst:.3e}");

        // One patch per view leaves only the partner, so the loss is zero
        // exactly, not approximately.
        let a = randn(&[1, 2, d], &mut rng);
        let b = randn(&[1, 2, d], &mut rng);
        let single = contrastive_loss(&a, &b).unwrap();
        assert_eq!(single, 0.0);

        // Two patches, one node, enumerated by hand from the dot products.
        let u = [[0.3, -0.1], [0.5, 0.2], [-0.4, 0.6], [0.1, -0.7]];
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        let mut hand = 0.0;
        for i in 0..4 {
            let partner = (i + 2) % 4;
            let mut denom = 0.0;
            for j in 0..4 {
                if j != i {
                    denom += dot(u[i], u[j]).exp();
                }
            }
            hand -= (dot(u[i], u[partner]).exp() / denom).ln();
        }
        hand /= 4.0;
        let z1 = Tensor::new(vec![2, 1, 2], vec![u[0][0], u[0][1], u[1][0], u[1][1]]).unwrap();
        let z2 = Tensor::new(vec![2, 1, 2], vec![u[2][0], u[2][1], u[3][0], u[3][1]]).unwrap();
        let got = contrastive_loss(&z1, &z2).unwrap();
        let diff = (got - hand).abs();
        assert!(diff < 1e-9, "hand value {hand} vs {got}");
        format!("row sums off {worst:.2e}, single-patch loss {single}, hand case diff {diff:.2e}")
    });
}

#[test]
fn check_04_patch_and_node_independence() {
    check(4, "embeddings move only with their own patch and node", || {
        let mut rng = Rng::new(404);
        let (t_p, n_nodes, len, d) = (6usize, 4usize, 3usize, 8usize);
        let model = PiEncoder::new(PiEncoderConfig::new(len, 1, d, 0.0), &mut rng);
        let x = randn(&[t_p * len, n_nodes, 1], &mut rng);
        let base = piencoder_forward(&patchify(&x, len).unwrap(), &model, false, &mut rng).unwrap();

        let row_equal = |a: &Tensor, b: &Tensor, row: usize| {
            a.data[row * d..(row + 1) * d]
                .iter()
                .zip(&b.data[row * d..(row + 1) * d])
                .all(|(x, y)| x.to_bits() == y.to_bits())
        };

        // Nudge one timestep of one node; exactly one patch row may move.
        let (hit_t, hit_n) = (2usize, 1usize);
        let mut x_patch = x.clone();
        x_patch.data[((hit_t * len + 1) * n_nodes + hit_n) * 1] += 0.37;
        let bumped =
            piencoder_forward(&patchify(&x_patch, len).unwrap(), &model, false, &mut rng).unwrap();
        for row in 0..t_p * n_nodes {
            let same = row_equal(&base.z1, &bumped.z1, row) && row_equal(&base.z2, &bumped.z2, row);
            if row == hit_t * n_nodes + hit_n {
                assert!(!same, "the perturbed patch left no trace");
            } else {
                assert!(same, "patch row {row} moved with someone else's data");
            }
        }

        // Shift one node's whole series; every other node stays bit-equal.
        let (shift_n, mut x_node) = (3usize, x.clone());
        for t in 0..t_p * len {
            x_node.data[(t * n_nodes + shift_n) * 1] += 0.5;
        }
        let shifted =
            piencoder_forward(&patchify(&x_node, len).unwrap(), &model, false, &mut rng).unwrap();
        for row in 0..t_p * n_nodes {
            let same =
                row_equal(&base.z1, &shifted.z1, row) && row_equal(&base.z2, &shifted.z2, row);
            if row % n_nodes == shift_n {
                assert!(!same, "the shifted node left no trace at row {row}");
            } else {
                assert!(same, "node row {row} moved with a neighbor's data");
            }
        }
        format!("{} patch rows isolated across both probes", t_p * n_nodes)
    });
}

#[test]
fn check_05_positional_encoding_structure() {
    check(5, "positional table is sinusoidal, split and collision-free", || {
        let (t_len, n_nodes, d_pe) = (96usize, 512usize, 16usize);
        let stpe = build_stpe(t_len, n_nodes, d_pe).unwrap();
        let half = d_pe / 2;
        let row = |t: usize, n: usize| {
            &stpe.table.data[(t * n_nodes + n) * d_pe..(t * n_nodes + n + 1) * d_pe]
        };
        let mut worst = 0.0f64;
        let mut seen: HashSet<Vec<u64>> = HashSet::with_capacity(t_len * n_nodes);
        for t in 0..t_len {
            for n in 0..n_nodes {
                let r = row(t, n);
                for pair in 0..d_pe / 4 {
                    let tp = r[2 * pair].powi(2) + r[2 * pair + 1].powi(2);
                    let sp = r[half + 2 * pair].powi(2) + r[half + 2 * pair + 1].powi(2);
                    worst = worst.max((tp - 1.0).abs()).max((sp - 1.0).abs());
                }
                assert_eq!(
                    &r[..half],
                    &row(t, 0)[..half],
                    "temporal half varies with the node at t={t}, n={n}"
                );
                assert_eq!(
                    &r[half..],
                    &row(0, n)[half..],
                    "spatial half varies with time at t={t}, n={n}"
                );
                seen.insert(r.iter().map(|v| v.to_bits()).collect());
            }
        }
        assert!(worst < 1e-9, "unit-norm error {worst:.3e}");
        assert_eq!(seen.len(), t_len * n_nodes, "grid rows collide");
        format!(
            "{} distinct rows on the {t_len}x{n_nodes} grid, norm error {worst:.2e}",
            seen.len()
        )
    });
}

#[test]
fn check_06_permutation_equivariance() {
    check(6, "node permutations commute with mixer and model", || {
        let mut worst_mixer = 0.0f64;
        let mut worst_model = 0.0f64;
        for seed in 0..5u64 {
            // The structured mixer alone on one window of five nodes.
            let mut rng = Rng::new(600 + seed);
            let (n, h, d_ctx) = (5usize, 6usize, 4usize);
            let mixer = StructuredMixer::new("mix", h, d_ctx, Aggregation::Mean, &mut rng);
            let hmat = randn(&[n, h], &mut rng);
            let ctx = randn(&[n, d_ctx], &mut rng);
            let perm = Rng::new(6000 + seed).permutation(n);
            let (y, _) = mixer
                .forward(&hmat, Some(&ctx), 1, 0.0, false, &mut Rng::new(0))
                .unwrap();
            let (y_perm, _) = mixer
                .forward(
                    &permute_rows(&hmat, &perm),
                    Some(&permute_rows(&ctx, &perm)),
                    1,
                    0.0,
                    false,
                    &mut Rng::new(0),
                )
                .unwrap();
            worst_mixer = worst_mixer.max(max_abs_diff(&permute_rows(&y, &perm), &y_perm));

            // The whole forward pass, permuting inputs, positional rows
            // and node embeddings together.
            let mut rng = Rng::new(6600 + seed);
            let mut cfg = ForecastConfig::defaults(n);
            cfg.t_in = 4;
            cfg.horizon = 3;
            cfg.d_model = 3;
            cfg.d_pe = 4;
            cfg.d_emb = 3;
            cfg.d_ctx = 4;
            cfg.spatial_layers = 2;
            cfg.dropout = 0.0;
            let enc = PiEncoder::new(PiEncoderConfig::new(cfg.t_in, 1, 5, 0.0), &mut rng);
            let mut model = PreMixer::new(cfg, Some(enc), &mut rng).unwrap();
            let x = randn(&[4, n, 1], &mut rng);
            let y = model.forward_window(&x, &mut Rng::new(0)).unwrap();
            model.stpe.table = permute_nodes(&model.stpe.table, &perm);
            model.node_emb.value = permute_rows(&model.node_emb.value, &perm);
            let y_perm = model
                .forward_window(&permute_nodes(&x, &perm), &mut Rng::new(0))
                .unwrap();
            worst_model = worst_model.max(max_abs_diff(&permute_nodes(&y, &perm), &y_perm));
        }
        assert!(worst_mixer < 1e-9, "mixer deviation {worst_mixer:.3e}");
        assert!(worst_model < 1e-9, "model deviation {worst_model:.3e}");
        format!("5 instances, mixer dev {worst_mixer:.2e}, model dev {worst_model:.2e}")
    });
}

#[test]
fn check_07_learning_dynamics() {
    check(7, "pre-training learns and the forecaster can overfit", || {
        let raw = generate(&SynthConfig {
            nodes: 8,
            days: 28,
            seed: 7,
            ..SynthConfig::default()
        })
        .unwrap();
        let (train, _, _) = split_chronological(&raw, &SplitSpec::default()).unwrap();
        let norm = fit_normalizer(&train).unwrap();
        let train_n = norm.normalize(&train.values).unwrap();
        let mean = train_n.data.iter().sum::<f64>() / train_n.data.len() as f64;
        let var = train_n.data.iter().map(|v| (v - mean).powi(2)).sum::<f64>()
            / train_n.data.len() as f64;

        // Predicting the mean scores the variance, so beat a tenth of it.
        let target_mse = 0.1 * var;
        let t0 = Instant::now();
        let opts = PretrainOptions {
            epochs: 20,
            batch: 8,
            lr: 1e-3,
            mask_ratio: 0.5,
            stride: 24,
            use_cl: true,
            seed: 7,
            t_long: 672,
            target_recon_mse: Some(target_mse),
        };
        let run = train_piencoder(&train_n, PiEncoderConfig::new(12, 1, 96, 0.0), &opts, None)
            .unwrap();
        let pre_secs = t0.elapsed().as_secs_f64();
        let per_window = (672 / 12 * 8 * 12) as f64;
        let last = run.log.last().unwrap();
        let mse = last.recon / per_window;
        assert!(
            mse < target_mse,
            "recon mse {mse:.4} never beat {target_mse:.4} in {} epochs",
            run.log.len()
        );
        assert!(run.log.len() <= 20);
        assert!(pre_secs < 120.0, "pre-training took {pre_secs:.0}s");

        // A fixed 500-window subset should be memorizable well below the
        // spread of the data itself.
        let sigma = var.sqrt();
        let mut cfg = ForecastConfig::defaults(8);
        cfg.horizon = 3;
        cfg.d_model = 8;
        cfg.spatial_layers = 1;
        cfg.dropout = 0.0;
        cfg.no_pretrain = true;
        cfg.no_context = true;
        let model = PreMixer::new(cfg, None, &mut Rng::new(7)).unwrap();
        let t1 = Instant::now();
        let topts = TrainOptions {
            epochs: 500,
            batch: 32,
            lr: 0.008,
            patience: usize::MAX,
            seed: 7,
            stride: 1,
            val_stride: 1,
            max_train_windows: 500,
            target_train_mae: 0.05 * sigma,
        };
        let no_val = Tensor::zeros(&[4, 8, 1]);
        let fit = train_forecaster(model, &train_n, &no_val, &norm, &topts).unwrap();
        let fit_secs = t1.elapsed().as_secs_f64();
        let final_mae = fit.log.last().unwrap().train_mae;
        assert!(
            final_mae < 0.05 * sigma,
            "train mae {final_mae:.4} never beat {:.4} in {} epochs",
            0.05 * sigma,
            fit.log.len()
        );
        assert!(fit.log.len() <= 500);
        assert!(fit_secs < 300.0, "overfit run took {fit_secs:.0}s");
        format!(
            "recon mse {mse:.3} < {target_mse:.3} after {} epochs ({pre_secs:.0}s); \
             train mae {final_mae:.4} < {:.4} after {} epochs ({fit_secs:.0}s)",
            run.log.len(),
            0.05 * sigma,
            fit.log.len()
        )
    });
}

/// Desk-size run shared by the ablation, transfer and determinism checks.
fn small_cfg(out_dir: std::path::PathBuf, nodes: usize) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.out_dir = out_dir;
    cfg.nodes = nodes;
    cfg.days = 2;
    cfg.seed = 5;
    cfg.t_in = 4;
    cfg.patch_len = 4;
    cfg.horizon = 2;
    cfg.t_long = 24;
    cfg.latent_dim = 8;
    cfg.d_model = 4;
    cfg.d_pe = 4;
    cfg.d_emb = 4;
    cfg.d_ctx = 6;
    cfg.spatial_layers = 1;
    cfg.epochs = 1;
    cfg.batch = 16;
    cfg.stride = 4;
    cfg.val_stride = 4;
    cfg.pretrain_epochs = 1;
    cfg.pretrain_batch = 4;
    cfg.pretrain_stride = 8;
    cfg
}

#[test]
fn check_08_ablation_harness() {
    check(8, "all four ablations run with the right structure", || {
        let dir = tempfile::tempdir().unwrap();
        let mut base = small_cfg(dir.path().join("full"), 50);
        let data = run_synth(&base).unwrap();
        base.data = Some(data);
        run_pretrain(&base).unwrap();
        let full = run_train(&base).unwrap();
        let (full_total, full_trainable, full_frozen) = full.run.model.param_counts();
        assert!(full_frozen > 0);
        let full_names = full.run.model.trainable_param_names();
        assert!(full_names.iter().any(|n| n == "node_emb"));
        assert!(full_names.iter().any(|n| n.contains("gate")));

        // Without pre-training there is no encoder at all, and with it go
        // the projector and the whole context path.
        let mut v = base.clone();
        v.out_dir = dir.path().join("no_pretrain");
        v.no_pretrain = true;
        let got = run_train(&v).unwrap();
        let (_, trainable, frozen) = got.run.model.param_counts();
        assert_eq!(frozen, 0);
        assert!(trainable < full_trainable);
        assert!(got.run.model.encoder.is_none());

        // Without the contrastive term the pre-training log carries zeros
        // in that column and everything downstream still runs.
        let mut v = base.clone();
        v.out_dir = dir.path().join("no_cl");
        v.no_cl = true;
        let pre = run_pretrain(&v).unwrap();
        assert!(pre.log.iter().all(|e| e.contrastive == 0.0));
        run_train(&v).unwrap();

        // Without context the encoder still feeds the projector, but the
        // node embedding, fusion and gate parameters leave the optimizer.
        let mut v = base.clone();
        v.out_dir = dir.path().join("no_context");
        v.encoder_dir = Some(dir.path().join("full/piencoder"));
        v.no_context = true;
        let got = run_train(&v).unwrap();
        let (_, trainable, frozen) = got.run.model.param_counts();
        assert_eq!(frozen, full_frozen);
        assert!(trainable < full_trainable);
        let names = got.run.model.trainable_param_names();
        assert!(names
            .iter()
            .all(|n| n != "node_emb" && !n.contains("fusion") && !n.contains("gate")));
        assert!(names.iter().any(|n| n.starts_with("projector")));

        // Without the spatio-temporal table the spatial half disappears,
        // which narrows the fused context and shrinks the model.
        let mut v = base.clone();
        v.out_dir = dir.path().join("no_stpe");
        v.encoder_dir = Some(dir.path().join("full/piencoder"));
        v.no_stpe = true;
        let got = run_train(&v).unwrap();
        let (total, _, _) = got.run.model.param_counts();
        assert!(total < full_total);
        assert!(got.run.model.cfg.no_stpe);
        let (reloaded, _, _, _) = load_premixer(&v.out_dir.join("forecaster")).unwrap();
        assert!(reloaded.cfg.no_stpe);
        format!(
            "full {full_total} params ({full_trainable} trainable, {full_frozen} frozen); \
             4 variants diverge as expected"
        )
    });
}

#[test]
fn check_09_transfer_to_a_larger_graph() {
    check(9, "a 50-node encoder drives an 80-node forecaster", || {
        let dir = tempfile::tempdir().unwrap();
        let mut src = small_cfg(dir.path().join("source"), 50);
        let data = run_synth(&src).unwrap();
        src.data = Some(data);
        run_pretrain(&src).unwrap();

        let mut tgt = small_cfg(dir.path().join("target"), 80);
        tgt.encoder_dir = Some(src.out_dir.join("piencoder"));
        let data = run_synth(&tgt).unwrap();
        tgt.data = Some(data);
        let outcome = run_transfer(&tgt).unwrap();
        assert_eq!(outcome.run.model.cfg.n_nodes, 80);

        // The reused encoder must come through training bit for bit.
        let (src_enc, _, _, _) = load_piencoder(&src.out_dir.join("piencoder")).unwrap();
        let enc = outcome.run.model.encoder.as_ref().unwrap();
        let mut frozen_count = 0usize;
        for (a, b) in src_enc.params().iter().zip(enc.params()) {
            assert!(
                bitwise_equal(&a.value, &b.value),
                "frozen encoder tensor {} drifted",
                a.name
            );
            frozen_count += a.value.data.len();
        }
        assert!(frozen_count > 0);
        format!("{frozen_count} frozen weights bit-identical after target training")
    });
}

#[test]
fn check_10_protocol_report_layout() {
    check(10, "a four-week 50-node run emits the standard table", || {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = RunConfig::default();
        cfg.out_dir = dir.path().join("run");
        cfg.nodes = 50;
        cfg.days = 28;
        cfg.seed = 1;
        cfg.epochs = 2;
        cfg.pretrain_epochs = 2;
        cfg.pretrain_stride = 24;
        cfg.stride = 16;
        cfg.val_stride = 24;
        let data = run_synth(&cfg).unwrap();
        cfg.data = Some(data);
        run_pretrain(&cfg).unwrap();
        let outcome = run_train(&cfg).unwrap();

        let text = std::fs::read_to_string(cfg.out_dir.join("metrics.csv")).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "horizon,mae,rmse,mape_percent");
        assert_eq!(lines.len(), 5);
        for (row, label) in lines[1..].iter().zip(["3", "6", "12", "average"]) {
            let cols: Vec<&str> = row.split(',').collect();
            assert_eq!(cols[0], label);
            assert_eq!(cols.len(), 4);
            for v in &cols[1..] {
                assert!(v.parse::<f64>().unwrap().is_finite());
            }
        }

        let (total, trainable, frozen) = outcome.run.model.param_counts();
        let params: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(cfg.out_dir.join("params.json")).unwrap())
                .unwrap();
        assert_eq!(params["total"].as_u64().unwrap() as usize, total);
        assert_eq!(params["trainable"].as_u64().unwrap() as usize, trainable);
        assert_eq!(params["frozen_encoder"].as_u64().unwrap() as usize, frozen);
        assert!(frozen > 0);
        assert_eq!(total, trainable + frozen);
        format!(
            "horizon 3/6/12/average rows present; {total} params, {trainable} trainable, \
             {frozen} frozen"
        )
    });
}

#[test]
fn check_11_byte_identical_reruns() {
    check(11, "same seed, same bytes in every artifact", || {
        let dir = tempfile::tempdir().unwrap();
        let run_all = |out: std::path::PathBuf| {
            let mut cfg = small_cfg(out, 3);
            cfg.seed = 11;
            let data = run_synth(&cfg).unwrap();
            cfg.data = Some(data);
            run_pretrain(&cfg).unwrap();
            run_train(&cfg).unwrap();
            run_eval(&cfg).unwrap();
            cfg
        };
        let a = run_all(dir.path().join("a"));
        let b = run_all(dir.path().join("b"));
        let mut compared = 0usize;
        for name in [
            "synthetic.pmxt",
            "pretrain_log.csv",
            "train_log.csv",
            "metrics.csv",
            "metrics.json",
            "params.json",
        ] {
            let fa = std::fs::read(a.out_dir.join(name)).unwrap();
            let fb = std::fs::read(b.out_dir.join(name)).unwrap();
            assert_eq!(fa, fb, "{name} differs between identical-seed runs");
            compared += 1;
        }

        // Transfer twice off the same source encoder.
        let transfer = |out: std::path::PathBuf| {
            let mut cfg = small_cfg(out, 5);
            cfg.seed = 12;
            cfg.encoder_dir = Some(a.out_dir.join("piencoder"));
            let data = run_synth(&cfg).unwrap();
            cfg.data = Some(data);
            run_transfer(&cfg).unwrap();
            cfg
        };
        let ta = transfer(dir.path().join("ta"));
        let tb = transfer(dir.path().join("tb"));
        for name in ["train_log.csv", "metrics.csv", "params.json"] {
            let fa = std::fs::read(ta.out_dir.join(name)).unwrap();
            let fb = std::fs::read(tb.out_dir.join(name)).unwrap();
            assert_eq!(fa, fb, "transfer {name} differs between identical-seed runs");
            compared += 1;
        }

        // The gradient suite reports the same numbers run to run.
        let g1 = run_suite().unwrap();
        let g2 = run_suite().unwrap();
        for (r1, r2) in g1.iter().zip(&g2) {
            assert_eq!(r1.max_err.to_bits(), r2.max_err.to_bits(), "{} drifts", r1.name);
        }
        compared += 1;
        format!("{compared} artifact comparisons byte-identical")
    });
}
