//! PIEncoder pre-training: masked patch autoencoding plus complementary
//! contrastive learning.
//!
//! The encoder is a two-layer ReLU MLP applied to every patch of every node
//! independently, with a bias-free linear reconstruction head. Each step
//! draws complementary masks, runs both masked views through the encoder,
//! reconstructs every patch from the view where it was visible, and
//! contrasts first-layer embeddings across the two views: for each node the
//! 2*T_p embeddings are stacked, and index i is pulled toward its partner
//! (i + T_p) mod 2*T_p against all other indices under a dot-product
//! softmax. The total loss is the sum of both terms.

use serde_json::{json, Map};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::error::{CoreError, Result};
use crate::layers::{dropout, dropout_backward, relu, relu_backward, Linear};
use crate::optim::Adam;
use crate::patch::{apply_mask, complementary_masks, patchify, MaskPair, PatchSet};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_tn, Parameter, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct PiEncoderConfig {
    /// Patch vector width P = patch_len * channels.
    pub patch_dim: usize,
    /// Latent width D of both encoder layers.
    pub latent_dim: usize,
    pub patch_len: usize,
    pub channels: usize,
    pub dropout: f64,
}

impl PiEncoderConfig {
    pub fn new(patch_len: usize, channels: usize, latent_dim: usize, dropout: f64) -> Self {
        PiEncoderConfig {
            patch_dim: patch_len * channels,
            latent_dim,
            patch_len,
            channels,
            dropout,
        }
    }
}

/// Two-layer patch-independent encoder with a reconstruction head.
#[derive(Debug, Clone)]
pub struct PiEncoder {
    pub enc1: Linear,
    pub enc2: Linear,
    /// Bias-free head, x_hat = z2 W with W stored [D, P].
    pub recon_head: Linear,
    pub cfg: PiEncoderConfig,
}

/// Activations cached by a forward pass over flattened patch rows [R, P].
#[derive(Debug)]
pub struct PiActs {
    pub x: Tensor,
    pub a1: Tensor,
    pub z1: Tensor,
    z1_mask: Option<Tensor>,
    pub a2: Tensor,
    pub z2: Tensor,
    z2_mask: Option<Tensor>,
}

impl PiEncoder {
    pub fn new(cfg: PiEncoderConfig, rng: &mut Rng) -> Self {
        PiEncoder {
            enc1: Linear::new("enc1", cfg.patch_dim, cfg.latent_dim, true, rng),
            enc2: Linear::new("enc2", cfg.latent_dim, cfg.latent_dim, true, rng),
            recon_head: Linear::new("recon_head", cfg.latent_dim, cfg.patch_dim, false, rng),
            cfg,
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = self.enc1.params();
        ps.extend(self.enc2.params());
        ps.extend(self.recon_head.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.enc1.params_mut();
        ps.extend(self.enc2.params_mut());
        ps.extend(self.recon_head.params_mut());
        ps
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Forward over flattened patch rows [R, P].
    pub fn forward_rows(&self, x: Tensor, training: bool, rng: &mut Rng) -> Result<PiActs> {
        if x.last_dim() != self.cfg.patch_dim {
            return Err(CoreError::Shape(format!(
                "encoder expects patch dim {}, got {:?}",
                self.cfg.patch_dim, x.shape
            )));
        }
        let a1 = self.enc1.forward(&x)?;
        let r1 = relu(&a1);
        let (z1, z1_mask) = dropout(&r1, self.cfg.dropout, training, rng)?;
        let a2 = self.enc2.forward(&z1)?;
        let r2 = relu(&a2);
        let (z2, z2_mask) = dropout(&r2, self.cfg.dropout, training, rng)?;
        Ok(PiActs {
            x,
            a1,
            z1,
            z1_mask,
            a2,
            z2,
            z2_mask,
        })
    }

    pub fn reconstruct_rows(&self, z2: &Tensor) -> Result<Tensor> {
        self.recon_head.forward(z2)
    }

    /// Accumulate parameter gradients for one view given the loss gradients
    /// flowing into the reconstruction and the first-layer embedding.
    pub fn backward_rows(
        &mut self,
        acts: &PiActs,
        d_xhat: Option<&Tensor>,
        d_z1_extra: Option<&Tensor>,
    ) -> Result<()> {
        let mut dz2: Option<Tensor> = None;
        if let Some(dxh) = d_xhat {
            dz2 = Some(self.recon_head.backward(&acts.z2, dxh)?);
        }
        let mut dz1 = match dz2 {
            Some(d) => {
                let dr2 = dropout_backward(&d, &acts.z2_mask)?;
                let da2 = relu_backward(&acts.a2, &dr2)?;
                self.enc2.backward(&acts.z1, &da2)?
            }
            None => Tensor::zeros(&acts.z1.shape),
        };
        if let Some(extra) = d_z1_extra {
            dz1.add_scaled(extra, 1.0)?;
        }
        let dr1 = dropout_backward(&dz1, &acts.z1_mask)?;
        let da1 = relu_backward(&acts.a1, &dr1)?;
        self.enc1.backward(&acts.x, &da1)?;
        Ok(())
    }
}

/// First- and second-layer embeddings on the patch grid.
#[derive(Debug, Clone)]
pub struct PatchEmbeddings {
    /// [T_p, N, D]
    pub z1: Tensor,
    /// [T_p, N, D]
    pub z2: Tensor,
}

/// Embed one (possibly masked) view of a patch set.
pub fn piencoder_forward(
    view: &PatchSet,
    model: &PiEncoder,
    training: bool,
    rng: &mut Rng,
) -> Result<PatchEmbeddings> {
    let (t_p, n) = (view.t_p(), view.n_nodes());
    let rows = view
        .patches
        .clone()
        .reshape(&[t_p * n, view.patch_dim()])?;
    let acts = model.forward_rows(rows, training, rng)?;
    let d = model.cfg.latent_dim;
    Ok(PatchEmbeddings {
        z1: acts.z1.reshape(&[t_p, n, d])?,
        z2: acts.z2.reshape(&[t_p, n, d])?,
    })
}

/// Apply the reconstruction head to [T_p, N, D] embeddings.
pub fn reconstruct(model: &PiEncoder, z2: &Tensor) -> Result<Tensor> {
    let (t_p, n, d) = (z2.dim(0), z2.dim(1), z2.dim(2));
    let rows = model.reconstruct_rows(&z2.clone().reshape(&[t_p * n, d])?)?;
    rows.reshape(&[t_p, n, model.cfg.patch_dim])
}

/// Reconstruction loss over both views: each patch's reconstruction is read
/// from the view in which the patch was visible, and the two masked error
/// terms add up to the plain sum of squared errors over all patches.
pub fn recon_loss(x: &PatchSet, xhat_v1: &Tensor, xhat_v2: &Tensor, mask: &MaskPair) -> Result<f64> {
    let shape = &x.patches.shape;
    if xhat_v1.shape != *shape || xhat_v2.shape != *shape {
        return Err(CoreError::Shape(format!(
            "reconstruction shapes {:?} / {:?} do not match patches {:?}",
            xhat_v1.shape, xhat_v2.shape, shape
        )));
    }
    let (t_p, n, p) = (x.t_p(), x.n_nodes(), x.patch_dim());
    if mask.visible_one.shape != [t_p, n] {
        return Err(CoreError::Shape(format!(
            "mask shape {:?} does not match patch grid [{t_p}, {n}]",
            mask.visible_one.shape
        )));
    }
    if mask.visible_one.data.iter().any(|&m| m != 0.0 && m != 1.0) {
        return Err(CoreError::Shape(
            "mask entries must be exactly 0 or 1".into(),
        ));
    }
    let mut loss = 0.0;
    for row in 0..t_p * n {
        let src = if mask.visible_one.data[row] != 0.0 {
            xhat_v1
        } else {
            xhat_v2
        };
        for e in row * p..(row + 1) * p {
            let d = x.patches.data[e] - src.data[e];
            loss += d * d;
        }
    }
    Ok(loss)
}

fn stack_views(z1_v1: &Tensor, z1_v2: &Tensor, n: usize, node: usize) -> Tensor {
    let (t_p, d) = (z1_v1.dim(0), z1_v1.dim(2));
    let mut u = Tensor::zeros(&[2 * t_p, d]);
    for i in 0..t_p {
        u.row_mut(i)
            .copy_from_slice(&z1_v1.data[(i * n + node) * d..(i * n + node + 1) * d]);
        u.row_mut(t_p + i)
            .copy_from_slice(&z1_v2.data[(i * n + node) * d..(i * n + node + 1) * d]);
    }
    u
}

/// Large negative logit that knocks the self-similarity diagonal out of
/// the softmax without risking non-finite arithmetic.
const NEG_INF_LOGIT: f64 = -1e30;

/// Pairwise similarity logits for one node's stacked views, with the
/// anchor-to-itself entries knocked out of the running.
fn masked_similarity(u: &Tensor) -> Result<Tensor> {
    let two_tp = u.dim(0);
    let mut sim = matmul(u, &crate::tensor::transpose2d(u)?)?;
    for i in 0..two_tp {
        sim.data[i * two_tp + i] = NEG_INF_LOGIT;
    }
    Ok(sim)
}

/// Match probabilities for one node: row i is the softmax over candidate
/// embeddings for anchor i, the anchor itself excluded. Rows sum to one.
pub fn contrastive_probs(z1_v1: &Tensor, z1_v2: &Tensor, node: usize) -> Result<Tensor> {
    if z1_v1.shape != z1_v2.shape || z1_v1.rank() != 3 {
        return Err(CoreError::Shape(format!(
            "contrastive views must share a [T_p, N, D] shape, got {:?} and {:?}",
            z1_v1.shape, z1_v2.shape
        )));
    }
    if node >= z1_v1.dim(1) {
        return Err(CoreError::Shape(format!(
            "node {node} is out of range for {} nodes",
            z1_v1.dim(1)
        )));
    }
    let u = stack_views(z1_v1, z1_v2, z1_v1.dim(1), node);
    Ok(crate::layers::softmax_rows(&masked_similarity(&u)?))
}

/// Per-node contrastive loss pieces on the stacked [2*T_p, D] embeddings.
/// Returns (sum of -log p over all 2*T_p anchors, d(sum)/dU).
fn contrastive_node(u: &Tensor) -> Result<(f64, Tensor)> {
    let two_tp = u.dim(0);
    let t_p = two_tp / 2;
    let sim = masked_similarity(u)?;
    let probs = crate::layers::softmax_rows(&sim);
    let mut loss = 0.0;
    // dL/d(sim) = probs - onehot(partner), row by row.
    let mut dsim = probs.clone();
    for i in 0..two_tp {
        let partner = (i + t_p) % two_tp;
        let p = probs.data[i * two_tp + partner];
        loss -= p.max(f64::MIN_POSITIVE).ln();
        dsim.data[i * two_tp + partner] -= 1.0;
    }
    // sim = U U^T, so dU = dsim U + dsim^T U.
    let mut du = matmul(&dsim, u)?;
    du.add_scaled(&matmul_tn(&dsim, u)?, 1.0)?;
    Ok((loss, du))
}

/// Forward-only contrastive loss over both masked views.
pub fn contrastive_loss(z1_v1: &Tensor, z1_v2: &Tensor) -> Result<f64> {
    if z1_v1.shape != z1_v2.shape || z1_v1.rank() != 3 {
        return Err(CoreError::Shape(format!(
            "contrastive views must share a [T_p, N, D] shape, got {:?} and {:?}",
            z1_v1.shape, z1_v2.shape
        )));
    }
    let (t_p, n) = (z1_v1.dim(0), z1_v1.dim(1));
    let mut total = 0.0;
    for node in 0..n {
        let u = stack_views(z1_v1, z1_v2, n, node);
        total += contrastive_node(&u)?.0;
    }
    Ok(total / (2 * t_p * n) as f64)
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainLosses {
    pub recon: f64,
    pub contrastive: f64,
    pub total: f64,
}

/// Total pre-training loss for one already-patched window under a given
/// mask pair, no gradients. Dropout stays off so repeated evaluations
/// agree bit for bit.
pub fn masked_total_loss(
    ps: &PatchSet,
    masks: &MaskPair,
    model: &PiEncoder,
    use_cl: bool,
) -> Result<f64> {
    let mut rng = Rng::new(0);
    let v1 = apply_mask(ps, &masks.visible_one)?;
    let v2 = apply_mask(ps, &masks.visible_two())?;
    let e1 = piencoder_forward(&v1, model, false, &mut rng)?;
    let e2 = piencoder_forward(&v2, model, false, &mut rng)?;
    let xhat1 = reconstruct(model, &e1.z2)?;
    let xhat2 = reconstruct(model, &e2.z2)?;
    let mut total = recon_loss(ps, &xhat1, &xhat2, masks)?;
    if use_cl {
        total += contrastive_loss(&e1.z1, &e2.z1)?;
    }
    Ok(total)
}

/// The same loss with gradients accumulated into the model; the
/// single-window core of `pretrain_step` without the optimizer update.
pub fn masked_total_grads(
    ps: &PatchSet,
    masks: &MaskPair,
    model: &mut PiEncoder,
    use_cl: bool,
) -> Result<f64> {
    let (t_p, n, p) = (ps.t_p(), ps.n_nodes(), ps.patch_dim());
    let d = model.cfg.latent_dim;
    let mut rng = Rng::new(0);
    let view1 = apply_mask(ps, &masks.visible_one)?;
    let view2 = apply_mask(ps, &masks.visible_two())?;
    let rows1 = view1.patches.clone().reshape(&[t_p * n, p])?;
    let rows2 = view2.patches.clone().reshape(&[t_p * n, p])?;
    let acts1 = model.forward_rows(rows1, false, &mut rng)?;
    let acts2 = model.forward_rows(rows2, false, &mut rng)?;
    let xhat1 = model.reconstruct_rows(&acts1.z2)?;
    let xhat2 = model.reconstruct_rows(&acts2.z2)?;

    let mut total = 0.0;
    let mut d_xhat1 = Tensor::zeros(&[t_p * n, p]);
    let mut d_xhat2 = Tensor::zeros(&[t_p * n, p]);
    for row in 0..t_p * n {
        let visible_one = masks.visible_one.data[row] != 0.0;
        let (src, dst) = if visible_one {
            (&xhat1, &mut d_xhat1)
        } else {
            (&xhat2, &mut d_xhat2)
        };
        for e in row * p..(row + 1) * p {
            let diff = src.data[e] - ps.patches.data[e];
            total += diff * diff;
            dst.data[e] = 2.0 * diff;
        }
    }

    let mut d_z1_1 = None;
    let mut d_z1_2 = None;
    if use_cl {
        let scale = 1.0 / (2 * t_p * n) as f64;
        let mut dz1_1 = Tensor::zeros(&acts1.z1.shape);
        let mut dz1_2 = Tensor::zeros(&acts1.z1.shape);
        let z1_v1 = acts1.z1.clone().reshape(&[t_p, n, d])?;
        let z1_v2 = acts2.z1.clone().reshape(&[t_p, n, d])?;
        for node in 0..n {
            let u = stack_views(&z1_v1, &z1_v2, n, node);
            let (node_loss, du) = contrastive_node(&u)?;
            total += node_loss * scale;
            for i in 0..t_p {
                let row = (i * n + node) * d;
                for k in 0..d {
                    dz1_1.data[row + k] += scale * du.data[i * d + k];
                    dz1_2.data[row + k] += scale * du.data[(t_p + i) * d + k];
                }
            }
        }
        d_z1_1 = Some(dz1_1);
        d_z1_2 = Some(dz1_2);
    }

    model.backward_rows(&acts1, Some(&d_xhat1), d_z1_1.as_ref())?;
    model.backward_rows(&acts2, Some(&d_xhat2), d_z1_2.as_ref())?;
    Ok(total)
}

/// One optimization step over a batch of long histories [T_long, N, C].
/// Returns batch-mean losses measured before the update.
pub fn pretrain_step(
    batch: &[&Tensor],
    model: &mut PiEncoder,
    optim: &mut Adam,
    mask_ratio: f64,
    use_cl: bool,
    rng: &mut Rng,
) -> Result<PretrainLosses> {
    if batch.is_empty() {
        return Err(CoreError::Config("pretrain step got an empty batch".into()));
    }
    model.zero_grads();
    let b = batch.len();
    let mut recon_sum = 0.0;
    let mut cl_sum = 0.0;
    let mut drop_rng = rng.stream(u64::MAX);
    for x_long in batch {
        let ps = patchify(x_long, model.cfg.patch_len)?;
        let (t_p, n, p) = (ps.t_p(), ps.n_nodes(), ps.patch_dim());
        let d = model.cfg.latent_dim;
        let masks = complementary_masks(t_p, n, mask_ratio, rng)?;
        let view1 = apply_mask(&ps, &masks.visible_one)?;
        let view2 = apply_mask(&ps, &masks.visible_two())?;

        let rows1 = view1.patches.clone().reshape(&[t_p * n, p])?;
        let rows2 = view2.patches.clone().reshape(&[t_p * n, p])?;
        let acts1 = model.forward_rows(rows1, true, &mut drop_rng)?;
        let acts2 = model.forward_rows(rows2, true, &mut drop_rng)?;
        let xhat1 = model.reconstruct_rows(&acts1.z2)?;
        let xhat2 = model.reconstruct_rows(&acts2.z2)?;

        // Reconstruction: gradient flows through the view where each patch
        // was visible; scale 2/b comes from d/dx of the squared error under
        // the batch mean.
        let mut d_xhat1 = Tensor::zeros(&[t_p * n, p]);
        let mut d_xhat2 = Tensor::zeros(&[t_p * n, p]);
        for row in 0..t_p * n {
            let visible_one = masks.visible_one.data[row] != 0.0;
            let (src, dst) = if visible_one {
                (&xhat1, &mut d_xhat1)
            } else {
                (&xhat2, &mut d_xhat2)
            };
            for e in row * p..(row + 1) * p {
                let diff = src.data[e] - ps.patches.data[e];
                recon_sum += diff * diff;
                dst.data[e] = 2.0 * diff / b as f64;
            }
        }

        // Contrastive: stack both views per node, pair i with (i+T_p).
        let mut d_z1_1 = None;
        let mut d_z1_2 = None;
        if use_cl {
            let scale = 1.0 / (2 * t_p * n * b) as f64;
            let mut dz1_1 = Tensor::zeros(&acts1.z1.shape);
            let mut dz1_2 = Tensor::zeros(&acts1.z1.shape);
            let z1_v1 = acts1.z1.clone().reshape(&[t_p, n, d])?;
            let z1_v2 = acts2.z1.clone().reshape(&[t_p, n, d])?;
            for node in 0..n {
                let u = stack_views(&z1_v1, &z1_v2, n, node);
                let (node_loss, du) = contrastive_node(&u)?;
                cl_sum += node_loss / (2 * t_p * n) as f64;
                for i in 0..t_p {
                    let row = (i * n + node) * d;
                    for k in 0..d {
                        dz1_1.data[row + k] += scale * du.data[i * d + k];
                        dz1_2.data[row + k] += scale * du.data[(t_p + i) * d + k];
                    }
                }
            }
            d_z1_1 = Some(dz1_1);
            d_z1_2 = Some(dz1_2);
        }

        model.backward_rows(&acts1, Some(&d_xhat1), d_z1_1.as_ref())?;
        model.backward_rows(&acts2, Some(&d_xhat2), d_z1_2.as_ref())?;
    }

    let losses = PretrainLosses {
        recon: recon_sum / b as f64,
        contrastive: cl_sum / b as f64,
        total: (recon_sum + cl_sum) / b as f64,
    };
    if !losses.total.is_finite() {
        return Err(CoreError::Numeric(format!(
            "pre-training loss diverged: recon {}, contrastive {}",
            losses.recon, losses.contrastive
        )));
    }
    let mut params = model.params_mut();
    optim.step(&mut params)?;
    Ok(losses)
}

#[derive(Debug, Clone)]
pub struct PretrainOptions {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub mask_ratio: f64,
    /// Anchor stride when enumerating long-history windows.
    pub stride: usize,
    pub use_cl: bool,
    pub seed: u64,
    pub t_long: usize,
    /// Stop early once the epoch-mean reconstruction MSE per element falls
    /// to this level, if set.
    pub target_recon_mse: Option<f64>,
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub recon: f64,
    pub contrastive: f64,
    pub total: f64,
}

#[derive(Debug)]
pub struct PretrainRun {
    pub model: PiEncoder,
    pub optim: Adam,
    pub log: Vec<PretrainEpoch>,
    pub global_step: u64,
}

/// Enumerate long-history window start offsets over a [T, N, C] series.
fn long_window_starts(t_len: usize, t_long: usize, stride: usize) -> Vec<usize> {
    if t_len < t_long {
        return Vec::new();
    }
    (0..=t_len - t_long).step_by(stride).collect()
}

/// Pre-train an encoder on a normalized [T, N, C] series.
pub fn train_piencoder(
    values: &Tensor,
    cfg: PiEncoderConfig,
    opts: &PretrainOptions,
    resume: Option<(PiEncoder, Adam, u64)>,
) -> Result<PretrainRun> {
    if values.rank() != 3 {
        return Err(CoreError::Shape(format!(
            "pre-training expects [T, N, C] values, got {:?}",
            values.shape
        )));
    }
    if opts.t_long % cfg.patch_len != 0 {
        return Err(CoreError::Config(format!(
            "history length {} is not a multiple of patch length {}",
            opts.t_long, cfg.patch_len
        )));
    }
    if opts.batch == 0 || opts.stride == 0 {
        return Err(CoreError::Config(
            "pre-training batch and stride must be >= 1".into(),
        ));
    }
    let (t_len, n, c) = (values.dim(0), values.dim(1), values.dim(2));
    let starts = long_window_starts(t_len, opts.t_long, opts.stride);
    if starts.is_empty() {
        return Err(CoreError::Data(format!(
            "series length {t_len} is shorter than the {}-step history; nothing to pre-train on",
            opts.t_long
        )));
    }
    let window_elems = opts.t_long * n * c;
    let per_window_elems = (opts.t_long / cfg.patch_len * n * cfg.patch_dim) as f64;

    let root = Rng::new(opts.seed);
    let (mut model, mut optim, mut global_step) = match resume {
        Some((m, o, step)) => (m, o, step),
        None => {
            let mut init_rng = root.stream(0);
            (PiEncoder::new(cfg, &mut init_rng), Adam::new(opts.lr), 0)
        }
    };

    let mut log = Vec::new();
    for epoch in 0..opts.epochs {
        let mut epoch_rng = root.stream(1 + epoch as u64);
        let mut order: Vec<usize> = (0..starts.len()).collect();
        epoch_rng.shuffle(&mut order);

        let mut recon_acc = 0.0;
        let mut cl_acc = 0.0;
        let mut windows_seen = 0usize;
        for chunk in order.chunks(opts.batch) {
            let tensors: Vec<Tensor> = chunk
                .iter()
                .map(|&wi| {
                    let s = starts[wi] * n * c;
                    Tensor::new(
                        vec![opts.t_long, n, c],
                        values.data[s..s + window_elems].to_vec(),
                    )
                })
                .collect::<Result<_>>()?;
            let refs: Vec<&Tensor> = tensors.iter().collect();
            let mut step_rng = epoch_rng.stream(global_step);
            let losses = pretrain_step(
                &refs,
                &mut model,
                &mut optim,
                opts.mask_ratio,
                opts.use_cl,
                &mut step_rng,
            )?;
            recon_acc += losses.recon * chunk.len() as f64;
            cl_acc += losses.contrastive * chunk.len() as f64;
            windows_seen += chunk.len();
            global_step += 1;
        }
        let recon = recon_acc / windows_seen as f64;
        let contrastive = cl_acc / windows_seen as f64;
        log.push(PretrainEpoch {
            epoch: epoch + 1,
            recon,
            contrastive,
            total: recon + contrastive,
        });
        if let Some(target) = opts.target_recon_mse {
            if recon / per_window_elems <= target {
                break;
            }
        }
    }
    Ok(PretrainRun {
        model,
        optim,
        log,
        global_step,
    })
}

/// Persist an encoder (and optionally its optimizer state for resuming).
pub fn save_piencoder(
    dir: &std::path::Path,
    model: &PiEncoder,
    seed: u64,
    global_step: u64,
    adam: Option<&Adam>,
) -> Result<()> {
    let mut hyper = Map::new();
    hyper.insert("P".into(), json!(model.cfg.patch_dim));
    hyper.insert("D".into(), json!(model.cfg.latent_dim));
    hyper.insert("L".into(), json!(model.cfg.patch_len));
    hyper.insert("C".into(), json!(model.cfg.channels));
    hyper.insert("dropout".into(), json!(model.cfg.dropout));
    save_checkpoint(
        dir,
        "piencoder",
        seed,
        global_step,
        &hyper,
        &model.params(),
        adam,
    )
}

/// Load an encoder checkpoint written by `save_piencoder`.
pub fn load_piencoder(dir: &std::path::Path) -> Result<(PiEncoder, Option<Adam>, u64, u64)> {
    let mut ckpt = load_checkpoint(dir)?;
    if ckpt.kind != "piencoder" {
        return Err(CoreError::Data(format!(
            "expected a piencoder checkpoint, found kind '{}'",
            ckpt.kind
        )));
    }
    let p = ckpt.hyper_u64("P")? as usize;
    let d = ckpt.hyper_u64("D")? as usize;
    let l = ckpt.hyper_u64("L")? as usize;
    let c = ckpt.hyper_u64("C")? as usize;
    if p != l * c {
        return Err(CoreError::Data(format!(
            "inconsistent checkpoint dims: P={p} but L*C={}",
            l * c
        )));
    }
    let dropout = ckpt.hyper_f64("dropout").unwrap_or(0.0);
    let cfg = PiEncoderConfig::new(l, c, d, dropout);
    let mut rng = Rng::new(0);
    let mut model = PiEncoder::new(cfg, &mut rng);
    for param in model.params_mut() {
        let shape = param.value.shape.clone();
        param.value = ckpt.take_param(&param.name, &shape)?;
    }
    let adam = if ckpt.adam_states.is_empty() {
        None
    } else {
        let mut adam = Adam::new(ckpt.adam_lr.unwrap_or(1e-3));
        let states = std::mem::take(&mut ckpt.adam_states);
        for (name, st) in states {
            adam.restore_state(&name, st);
        }
        Some(adam)
    };
    Ok((model, adam, ckpt.seed, ckpt.global_step))
}
