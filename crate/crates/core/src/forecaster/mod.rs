//! The downstream PreMixer predictor.
//!
//! A short input window is concatenated with a fixed positional encoding
//! and embedded per timestep, then folded to one wide vector per node. The
//! same window, flattened to a single patch per node, runs through the
//! frozen pre-trained encoder and a semantic projector adds its second
//! layer representation to the fold. A residual TemporalMixer mixes along
//! the folded time-feature axis, a stack of SpatialMixers mixes across
//! nodes, and a linear head emits all forecast steps at once. Every
//! backward pass is derived by hand against the forward caches.
//!
//! The structured SpatialMixer gates each ordered node pair with a sigmoid
//! score of their fused contexts and sends a shared linear message along
//! the pair. Because the gate logit is an outer sum over per-node scores
//! and the pair projection splits into anchor and neighbor blocks, the
//! whole N x N exchange reduces to two matmuls and a row-sum, which keeps
//! the layer exact while avoiding materializing per-pair messages.

pub mod train;

use serde_json::{json, Map};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::encodings::{
    build_stpe, build_temporal_pe, init_node_embedding, ContextFusion, FusionCache, Stpe,
};
use crate::error::{CoreError, Result};
use crate::layers::{
    dropout, dropout_backward, gelu, gelu_backward, sigmoid_scalar, LayerNorm, Linear, LnCache,
};
use crate::optim::Adam;
use crate::pretrain::{load_piencoder, save_piencoder, PiEncoder};
use crate::rng::Rng;
use crate::tensor::{matmul, matmul_nt, matmul_tn, Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpatialMode {
    Structured,
    Basic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
pub struct ForecastConfig {
    /// Input window length T; must equal the encoder patch length.
    pub t_in: usize,
    pub horizon: usize,
    pub channels: usize,
    pub n_nodes: usize,
    pub d_model: usize,
    pub d_pe: usize,
    pub d_emb: usize,
    pub d_ctx: usize,
    pub spatial_layers: usize,
    pub dropout: f64,
    pub spatial_mode: SpatialMode,
    pub aggregation: Aggregation,
    pub no_pretrain: bool,
    pub no_context: bool,
    pub no_stpe: bool,
}

impl ForecastConfig {
    pub fn defaults(n_nodes: usize) -> Self {
        ForecastConfig {
            t_in: 12,
            horizon: 12,
            channels: 1,
            n_nodes,
            d_model: 32,
            d_pe: 16,
            d_emb: 32,
            d_ctx: 64,
            spatial_layers: 2,
            dropout: 0.1,
            spatial_mode: SpatialMode::Structured,
            aggregation: Aggregation::Mean,
            no_pretrain: false,
            no_context: false,
            no_stpe: false,
        }
    }

    /// Folded hidden width per node.
    pub fn h_width(&self) -> usize {
        self.d_model * self.t_in
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("t_in", self.t_in),
            ("horizon", self.horizon),
            ("channels", self.channels),
            ("n_nodes", self.n_nodes),
            ("d_model", self.d_model),
            ("d_pe", self.d_pe),
            ("d_emb", self.d_emb),
            ("d_ctx", self.d_ctx),
        ] {
            if v == 0 {
                return Err(CoreError::Config(format!("{name} must be >= 1")));
            }
        }
        if self.h_width() < 2 {
            return Err(CoreError::Config(
                "hidden width d_model * t_in must be >= 2 for layer norm".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CoreError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// One spatial mixing layer with pairwise gates from node contexts.
#[derive(Debug, Clone)]
pub struct StructuredMixer {
    /// Self-transform applied before the activation, no bias.
    pub theta: Linear,
    /// Anchor-side half of the pair projection.
    pub pair_self: Linear,
    /// Neighbor-side half of the pair projection.
    pub pair_nbr: Linear,
    /// Scalar gate over concatenated contexts, 2*d_ctx -> 1.
    pub gate: Linear,
    pub aggregation: Aggregation,
}

#[derive(Debug)]
pub struct StructuredCache {
    h_in: Tensor,
    gates: Tensor,
    row_sum: Vec<f64>,
    u: Tensor,
    v: Tensor,
    pre: Tensor,
    drop_mask: Option<Tensor>,
}

impl StructuredMixer {
    pub fn new(name: &str, h: usize, d_ctx: usize, aggregation: Aggregation, rng: &mut Rng) -> Self {
        StructuredMixer {
            theta: Linear::new(&format!("{name}.theta"), h, h, false, rng),
            pair_self: Linear::new(&format!("{name}.pair_self"), h, h, false, rng),
            pair_nbr: Linear::new(&format!("{name}.pair_nbr"), h, h, false, rng),
            gate: Linear::new(&format!("{name}.gate"), 2 * d_ctx, 1, true, rng),
            aggregation,
        }
    }

    fn alpha(&self, n: usize) -> f64 {
        match self.aggregation {
            Aggregation::Sum => 1.0,
            Aggregation::Mean => 1.0 / n as f64,
        }
    }

    /// Gate matrix over ordered node pairs; all ones without context.
    fn gate_matrix(&self, ctx: Option<&Tensor>, n: usize) -> (Tensor, Vec<f64>) {
        match ctx {
            None => (Tensor::filled(&[n, n], 1.0), vec![n as f64; n]),
            Some(c) => {
                let d_ctx = c.last_dim();
                let w = &self.gate.w.value.data;
                let bias = self.gate.b.as_ref().expect("gate bias").value.data[0];
                // Logit over the pair (i, j) splits into anchor and neighbor
                // scores plus the bias, so one pass over nodes suffices.
                let mut anchor = vec![0.0; n];
                let mut nbr = vec![0.0; n];
                for i in 0..n {
                    let row = c.row(i);
                    let mut a = 0.0;
                    let mut b = 0.0;
                    for k in 0..d_ctx {
                        a += row[k] * w[k];
                        b += row[k] * w[d_ctx + k];
                    }
                    anchor[i] = a;
                    nbr[i] = b;
                }
                let mut g = Tensor::zeros(&[n, n]);
                let mut row_sum = vec![0.0; n];
                for i in 0..n {
                    let gr = g.row_mut(i);
                    let mut s = 0.0;
                    for j in 0..n {
                        let v = sigmoid_scalar(anchor[i] + nbr[j] + bias);
                        gr[j] = v;
                        s += v;
                    }
                    row_sum[i] = s;
                }
                (g, row_sum)
            }
        }
    }

    /// h: [B*N, H] stacked window blocks; ctx: [N, d_ctx] shared per batch.
    pub fn forward(
        &self,
        h: &Tensor,
        ctx: Option<&Tensor>,
        batch: usize,
        p_drop: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor, StructuredCache)> {
        let hw = h.last_dim();
        let n = h.dim(0) / batch;
        let (gates, row_sum) = self.gate_matrix(ctx, n);
        let u = self.pair_self.forward(h)?;
        let v = self.pair_nbr.forward(h)?;
        let alpha = self.alpha(n);
        let mut pre = self.theta.forward(h)?;
        for b in 0..batch {
            let base = b * n;
            let v_block =
                Tensor::new(vec![n, hw], v.data[base * hw..(base + n) * hw].to_vec())?;
            let gv = matmul(&gates, &v_block)?;
            for i in 0..n {
                let row = (base + i) * hw;
                let ur = &u.data[row..row + hw];
                let gr = gv.row(i);
                let pr = &mut pre.data[row..row + hw];
                let r = row_sum[i];
                for k in 0..hw {
                    pr[k] += alpha * (r * ur[k] + gr[k]);
                }
            }
        }
        let act = gelu(&pre);
        let (out, drop_mask) = dropout(&act, p_drop, training, rng)?;
        Ok((
            out,
            StructuredCache {
                h_in: h.clone(),
                gates,
                row_sum,
                u,
                v,
                pre,
                drop_mask,
            },
        ))
    }

    /// Returns (dL/dh_in, dL/dctx if gated).
    pub fn backward(
        &mut self,
        cache: &StructuredCache,
        ctx: Option<&Tensor>,
        batch: usize,
        d_out: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        let n = cache.gates.dim(0);
        let hw = cache.h_in.last_dim();
        let alpha = self.alpha(n);
        let d_act = dropout_backward(d_out, &cache.drop_mask)?;
        let d_pre = gelu_backward(&cache.pre, &d_act)?;
        let mut dh = self.theta.backward(&cache.h_in, &d_pre)?;

        let mut du = Tensor::zeros(&[batch * n, hw]);
        let mut dv = Tensor::zeros(&[batch * n, hw]);
        let mut d_gates = Tensor::zeros(&[n, n]);
        let mut d_row_sum = vec![0.0; n];
        for b in 0..batch {
            let base = b * n;
            let dm_block =
                Tensor::new(vec![n, hw], d_pre.data[base * hw..(base + n) * hw].to_vec())?;
            let v_block =
                Tensor::new(vec![n, hw], cache.v.data[base * hw..(base + n) * hw].to_vec())?;
            for i in 0..n {
                let row = (base + i) * hw;
                let dm = dm_block.row(i);
                let ur = &cache.u.data[row..row + hw];
                let dur = &mut du.data[row..row + hw];
                let r = cache.row_sum[i];
                let mut dot = 0.0;
                for k in 0..hw {
                    dur[k] = alpha * r * dm[k];
                    dot += dm[k] * ur[k];
                }
                d_row_sum[i] += alpha * dot;
            }
            let mut dv_block = matmul_tn(&cache.gates, &dm_block)?;
            dv_block.scale(alpha);
            dv.data[base * hw..(base + n) * hw].copy_from_slice(&dv_block.data);
            d_gates.add_scaled(&matmul_nt(&dm_block, &v_block)?, alpha)?;
        }
        for i in 0..n {
            let dr = d_row_sum[i];
            for g in d_gates.row_mut(i) {
                *g += dr;
            }
        }
        dh.add_scaled(&self.pair_self.backward(&cache.h_in, &du)?, 1.0)?;
        dh.add_scaled(&self.pair_nbr.backward(&cache.h_in, &dv)?, 1.0)?;

        let d_ctx_out = match ctx {
            None => None,
            Some(c) => {
                let d_ctx = c.last_dim();
                let d_logit = cache.gates.zip_map(&d_gates, |g, d| d * g * (1.0 - g))?;
                let mut ds = vec![0.0; n];
                let mut dt = vec![0.0; n];
                let mut db = 0.0;
                for i in 0..n {
                    for j in 0..n {
                        let v = d_logit.data[i * n + j];
                        ds[i] += v;
                        dt[j] += v;
                        db += v;
                    }
                }
                let gate_w = &mut self.gate.w.grad.data;
                let mut dc = Tensor::zeros(&[n, d_ctx]);
                for i in 0..n {
                    let crow = c.row(i);
                    let dcr = dc.row_mut(i);
                    for k in 0..d_ctx {
                        gate_w[k] += crow[k] * ds[i];
                        gate_w[d_ctx + k] += crow[k] * dt[i];
                        dcr[k] = ds[i] * self.gate.w.value.data[k]
                            + dt[i] * self.gate.w.value.data[d_ctx + k];
                    }
                }
                self.gate.b.as_mut().expect("gate bias").grad.data[0] += db;
                Some(dc)
            }
        };
        Ok((dh, d_ctx_out))
    }

    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = self.theta.params();
        ps.extend(self.pair_self.params());
        ps.extend(self.pair_nbr.params());
        ps.extend(self.gate.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.theta.params_mut();
        ps.extend(self.pair_self.params_mut());
        ps.extend(self.pair_nbr.params_mut());
        ps.extend(self.gate.params_mut());
        ps
    }
}

/// Plain channel-mixing layer with an N x N weight over nodes.
#[derive(Debug, Clone)]
pub struct BasicMixer {
    pub w_channel: Parameter,
    pub b: Parameter,
}

#[derive(Debug)]
pub struct BasicCache {
    h_in: Tensor,
    pre: Tensor,
    drop_mask: Option<Tensor>,
}

impl BasicMixer {
    pub fn new(name: &str, n: usize, rng: &mut Rng) -> Self {
        let bound = 1.0 / (n as f64).sqrt();
        let data = (0..n * n).map(|_| rng.uniform(-bound, bound)).collect();
        BasicMixer {
            w_channel: Parameter::new(
                format!("{name}.channel"),
                Tensor::new(vec![n, n], data).expect("mixer shape"),
            ),
            b: Parameter::new(format!("{name}.channel_b"), Tensor::zeros(&[n])),
        }
    }

    pub fn forward(
        &self,
        h: &Tensor,
        batch: usize,
        p_drop: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor, BasicCache)> {
        let hw = h.last_dim();
        let n = self.w_channel.value.dim(0);
        if h.dim(0) != batch * n {
            return Err(CoreError::Shape(format!(
                "channel mixer built for {n} nodes but got {} rows over batch {batch}",
                h.dim(0)
            )));
        }
        let mut pre = Tensor::zeros(&h.shape);
        for b in 0..batch {
            let base = b * n;
            let h_block =
                Tensor::new(vec![n, hw], h.data[base * hw..(base + n) * hw].to_vec())?;
            let mixed = matmul(&self.w_channel.value, &h_block)?;
            for i in 0..n {
                let bias = self.b.value.data[i];
                let dst = &mut pre.data[(base + i) * hw..(base + i + 1) * hw];
                for (d, &m) in dst.iter_mut().zip(mixed.row(i)) {
                    *d = m + bias;
                }
            }
        }
        let act = gelu(&pre);
        let (out, drop_mask) = dropout(&act, p_drop, training, rng)?;
        Ok((
            out,
            BasicCache {
                h_in: h.clone(),
                pre,
                drop_mask,
            },
        ))
    }

    pub fn backward(
        &mut self,
        cache: &BasicCache,
        batch: usize,
        d_out: &Tensor,
    ) -> Result<Tensor> {
        let hw = cache.h_in.last_dim();
        let n = self.w_channel.value.dim(0);
        let d_act = dropout_backward(d_out, &cache.drop_mask)?;
        let d_pre = gelu_backward(&cache.pre, &d_act)?;
        let mut dh = Tensor::zeros(&cache.h_in.shape);
        for b in 0..batch {
            let base = b * n;
            let dp_block =
                Tensor::new(vec![n, hw], d_pre.data[base * hw..(base + n) * hw].to_vec())?;
            let h_block = Tensor::new(
                vec![n, hw],
                cache.h_in.data[base * hw..(base + n) * hw].to_vec(),
            )?;
            self.w_channel
                .grad
                .add_scaled(&matmul_nt(&dp_block, &h_block)?, 1.0)?;
            for i in 0..n {
                self.b.grad.data[i] += dp_block.row(i).iter().sum::<f64>();
            }
            let dh_block = matmul_tn(&self.w_channel.value, &dp_block)?;
            dh.data[base * hw..(base + n) * hw].copy_from_slice(&dh_block.data);
        }
        Ok(dh)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        vec![&self.w_channel, &self.b]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.w_channel, &mut self.b]
    }
}

#[derive(Debug, Clone)]
pub enum SpatialLayer {
    Structured(StructuredMixer),
    Basic(BasicMixer),
}

#[derive(Debug)]
pub enum SpatialCache {
    Structured(StructuredCache),
    Basic(BasicCache),
}

impl SpatialLayer {
    fn forward(
        &self,
        h: &Tensor,
        ctx: Option<&Tensor>,
        batch: usize,
        p_drop: f64,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor, SpatialCache)> {
        match self {
            SpatialLayer::Structured(m) => {
                let (out, cache) = m.forward(h, ctx, batch, p_drop, training, rng)?;
                Ok((out, SpatialCache::Structured(cache)))
            }
            SpatialLayer::Basic(m) => {
                let (out, cache) = m.forward(h, batch, p_drop, training, rng)?;
                Ok((out, SpatialCache::Basic(cache)))
            }
        }
    }

    fn backward(
        &mut self,
        cache: &SpatialCache,
        ctx: Option<&Tensor>,
        batch: usize,
        d_out: &Tensor,
    ) -> Result<(Tensor, Option<Tensor>)> {
        match (self, cache) {
            (SpatialLayer::Structured(m), SpatialCache::Structured(c)) => {
                m.backward(c, ctx, batch, d_out)
            }
            (SpatialLayer::Basic(m), SpatialCache::Basic(c)) => {
                Ok((m.backward(c, batch, d_out)?, None))
            }
            _ => Err(CoreError::Shape(
                "spatial cache does not match layer variant".into(),
            )),
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            SpatialLayer::Structured(m) => m.params(),
            SpatialLayer::Basic(m) => m.params(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            SpatialLayer::Structured(m) => m.params_mut(),
            SpatialLayer::Basic(m) => m.params_mut(),
        }
    }
}

/// The full downstream model.
#[derive(Debug, Clone)]
pub struct PreMixer {
    pub cfg: ForecastConfig,
    /// Positional table over [t_in, n_nodes, d_pe]; temporal-only under the
    /// no_stpe ablation. Public so tests can permute or zero it.
    pub stpe: Stpe,
    pub input_mlp: Linear,
    pub projector: Linear,
    pub ln: LayerNorm,
    pub w1: Linear,
    pub w2: Linear,
    pub spatial: Vec<SpatialLayer>,
    pub output: Linear,
    pub node_emb: Parameter,
    pub fusion: ContextFusion,
    /// Frozen pre-trained encoder; absent under no_pretrain.
    pub encoder: Option<PiEncoder>,
}

#[derive(Debug)]
pub struct TemporalCache {
    ln_out: Tensor,
    ln_cache: LnCache,
    pre: Tensor,
    act: Tensor,
    drop_mask: Option<Tensor>,
}

/// Everything the backward pass needs from one batched forward.
#[derive(Debug)]
pub struct ForwardCache {
    pub batch: usize,
    pub ctx: Option<Tensor>,
    fusion_cache: Option<FusionCache>,
    pub z2: Option<Tensor>,
    embed_rows: Tensor,
    embed_pre: Tensor,
    pub h_c: Tensor,
    pub h0: Tensor,
    temporal: TemporalCache,
    spatial: Vec<SpatialCache>,
    h_last: Tensor,
    /// [B*N, horizon*C], normalized scale.
    pub y_hat: Tensor,
}

impl PreMixer {
    pub fn new(
        cfg: ForecastConfig,
        encoder: Option<PiEncoder>,
        rng: &mut Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if cfg.no_pretrain && encoder.is_some() {
            return Err(CoreError::Config(
                "no_pretrain runs take no encoder; drop the checkpoint or the flag".into(),
            ));
        }
        if !cfg.no_pretrain && encoder.is_none() {
            return Err(CoreError::Config(
                "an encoder checkpoint is required unless no_pretrain is set".into(),
            ));
        }
        if let Some(enc) = &encoder {
            if enc.cfg.patch_len != cfg.t_in {
                return Err(CoreError::Config(format!(
                    "encoder patch length {} must equal the input window {}; align L with T",
                    enc.cfg.patch_len, cfg.t_in
                )));
            }
            if enc.cfg.channels > cfg.channels {
                return Err(CoreError::Config(format!(
                    "encoder consumes {} channels but the input provides {}",
                    enc.cfg.channels, cfg.channels
                )));
            }
        }
        let stpe = if cfg.no_stpe {
            build_temporal_pe(cfg.t_in, cfg.n_nodes, cfg.d_pe)?
        } else {
            build_stpe(cfg.t_in, cfg.n_nodes, cfg.d_pe)?
        };
        let h = cfg.h_width();
        let d = encoder.as_ref().map_or(1, |e| e.cfg.latent_dim);
        let d_spatial = if cfg.no_stpe { 0 } else { cfg.d_pe / 2 };
        let mut spatial = Vec::with_capacity(cfg.spatial_layers);
        let input_mlp = Linear::new("input", cfg.channels + cfg.d_pe, cfg.d_model, true, rng);
        let projector = Linear::new("projector", d, h, true, rng);
        let ln = LayerNorm::new("temporal_ln", h)?;
        let w1 = Linear::new("temporal1", h, 2 * h, true, rng);
        let w2 = Linear::new("temporal2", 2 * h, h, true, rng);
        for l in 0..cfg.spatial_layers {
            let name = format!("spatial{l}");
            spatial.push(match cfg.spatial_mode {
                SpatialMode::Structured => SpatialLayer::Structured(StructuredMixer::new(
                    &name,
                    h,
                    cfg.d_ctx,
                    cfg.aggregation,
                    rng,
                )),
                SpatialMode::Basic => SpatialLayer::Basic(BasicMixer::new(&name, cfg.n_nodes, rng)),
            });
        }
        let output = Linear::new("output", h, cfg.horizon * cfg.channels, true, rng);
        let node_emb = init_node_embedding(cfg.n_nodes, cfg.d_emb, rng);
        let fusion = ContextFusion::new(d_spatial, cfg.d_emb, cfg.d_ctx, rng);
        Ok(PreMixer {
            cfg,
            stpe,
            input_mlp,
            projector,
            ln,
            w1,
            w2,
            spatial,
            output,
            node_emb,
            fusion,
            encoder,
        })
    }

    fn uses_context(&self) -> bool {
        self.cfg.spatial_mode == SpatialMode::Structured && !self.cfg.no_context
    }

    /// All structural parameters, frozen encoder excluded.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut ps = self.input_mlp.params();
        ps.extend(self.projector.params());
        ps.push(&self.ln.gamma);
        ps.push(&self.ln.beta);
        ps.extend(self.w1.params());
        ps.extend(self.w2.params());
        for layer in &self.spatial {
            ps.extend(layer.params());
        }
        ps.extend(self.output.params());
        ps.push(&self.node_emb);
        ps.extend(self.fusion.lin.params());
        ps
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut ps = self.input_mlp.params_mut();
        ps.extend(self.projector.params_mut());
        ps.push(&mut self.ln.gamma);
        ps.push(&mut self.ln.beta);
        ps.extend(self.w1.params_mut());
        ps.extend(self.w2.params_mut());
        for layer in &mut self.spatial {
            ps.extend(layer.params_mut());
        }
        ps.extend(self.output.params_mut());
        ps.push(&mut self.node_emb);
        ps.extend(self.fusion.lin.params_mut());
        ps
    }

    fn is_trainable(&self, name: &str) -> bool {
        if self.cfg.no_pretrain && name.starts_with("projector") {
            return false;
        }
        let context_param = name == "node_emb"
            || name.starts_with("fusion")
            || (name.starts_with("spatial") && name.contains(".gate"));
        if context_param && !self.uses_context() {
            return false;
        }
        true
    }

    /// The optimizer's parameter set: structural params minus pathways the
    /// ablation flags disable.
    pub fn trainable_params_mut(&mut self) -> Vec<&mut Parameter> {
        let keep: Vec<bool> = self
            .params()
            .iter()
            .map(|p| self.is_trainable(&p.name))
            .collect();
        self.params_mut()
            .into_iter()
            .zip(keep)
            .filter_map(|(p, k)| k.then_some(p))
            .collect()
    }

    pub fn trainable_param_names(&self) -> Vec<String> {
        self.params()
            .iter()
            .filter(|p| self.is_trainable(&p.name))
            .map(|p| p.name.clone())
            .collect()
    }

    /// (total, trainable, frozen encoder) parameter counts. The total
    /// covers everything the checkpoint carries, frozen encoder included.
    pub fn param_counts(&self) -> (usize, usize, usize) {
        let structural: usize = self.params().iter().map(|p| p.numel()).sum();
        let trainable = self
            .params()
            .iter()
            .filter(|p| self.is_trainable(&p.name))
            .map(|p| p.numel())
            .sum();
        let frozen = self.encoder.as_ref().map_or(0, |e| e.param_count());
        (structural + frozen, trainable, frozen)
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Frozen-encoder second layer representations for a batch,
    /// [B*N, D]. Each node's window is flattened to one patch.
    pub fn encode_context(&self, x: &Tensor) -> Result<Option<Tensor>> {
        let enc = match &self.encoder {
            Some(e) => e,
            None => return Ok(None),
        };
        let (b, t, n, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let enc_c = enc.cfg.channels;
        let p = enc.cfg.patch_dim;
        let mut rows = Tensor::zeros(&[b * n, p]);
        for bb in 0..b {
            for nn in 0..n {
                let dst = rows.row_mut(bb * n + nn);
                for tt in 0..t {
                    let src = ((bb * t + tt) * n + nn) * c;
                    for cc in 0..enc_c {
                        dst[tt * enc_c + cc] = x.data[src + cc];
                    }
                }
            }
        }
        // Inference pass through the frozen weights; dropout stays off and
        // the rng is untouched.
        let mut dead_rng = Rng::new(0);
        let acts = enc.forward_rows(rows, false, &mut dead_rng)?;
        Ok(Some(acts.z2))
    }

    /// Fold per-timestep embeddings [B*T*N, d_model] into [B*N, H].
    fn fold(&self, embed: &Tensor, b: usize) -> Tensor {
        let (t, n, dm) = (self.cfg.t_in, self.cfg.n_nodes, self.cfg.d_model);
        let h = self.cfg.h_width();
        let mut out = Tensor::zeros(&[b * n, h]);
        for bb in 0..b {
            for tt in 0..t {
                for nn in 0..n {
                    let src = ((bb * t + tt) * n + nn) * dm;
                    let dst = (bb * n + nn) * h + tt * dm;
                    out.data[dst..dst + dm].copy_from_slice(&embed.data[src..src + dm]);
                }
            }
        }
        out
    }

    fn unfold(&self, d_h: &Tensor, b: usize) -> Tensor {
        let (t, n, dm) = (self.cfg.t_in, self.cfg.n_nodes, self.cfg.d_model);
        let h = self.cfg.h_width();
        let mut out = Tensor::zeros(&[b * t * n, dm]);
        for bb in 0..b {
            for tt in 0..t {
                for nn in 0..n {
                    let dst = ((bb * t + tt) * n + nn) * dm;
                    let src = (bb * n + nn) * h + tt * dm;
                    out.data[dst..dst + dm].copy_from_slice(&d_h.data[src..src + dm]);
                }
            }
        }
        out
    }

    /// Residual time-feature mixing over folded rows.
    pub fn temporal_forward(
        &self,
        h0: &Tensor,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Tensor, TemporalCache)> {
        let (ln_out, ln_cache) = self.ln.forward(h0)?;
        let pre = self.w1.forward(&ln_out)?;
        let act_raw = gelu(&pre);
        let (act, drop_mask) = dropout(&act_raw, self.cfg.dropout, training, rng)?;
        let mut h1 = self.w2.forward(&act)?;
        h1.add_scaled(h0, 1.0)?;
        Ok((
            h1,
            TemporalCache {
                ln_out,
                ln_cache,
                pre,
                act,
                drop_mask,
            },
        ))
    }

    fn temporal_backward(&mut self, cache: &TemporalCache, d_h1: &Tensor) -> Result<Tensor> {
        let d_act = self.w2.backward(&cache.act, d_h1)?;
        let d_gelu = dropout_backward(&d_act, &cache.drop_mask)?;
        let d_pre = gelu_backward(&cache.pre, &d_gelu)?;
        let d_lnout = self.w1.backward(&cache.ln_out, &d_pre)?;
        let mut d_h0 = self.ln.backward(&cache.ln_cache, &d_lnout)?;
        d_h0.add_scaled(d_h1, 1.0)?;
        Ok(d_h0)
    }

    /// Full forward over a batch of normalized windows x: [B, T, N, C].
    pub fn forward_batch(
        &self,
        x: &Tensor,
        training: bool,
        rng: &mut Rng,
    ) -> Result<ForwardCache> {
        if x.rank() != 4
            || x.dim(1) != self.cfg.t_in
            || x.dim(2) != self.cfg.n_nodes
            || x.dim(3) != self.cfg.channels
        {
            return Err(CoreError::Shape(format!(
                "expected input [B, {}, {}, {}], got {:?}",
                self.cfg.t_in, self.cfg.n_nodes, self.cfg.channels, x.shape
            )));
        }
        let (b, t, n, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let d_pe = self.cfg.d_pe;

        let (ctx, fusion_cache) = if self.uses_context() {
            let spatial = if self.cfg.no_stpe {
                Tensor::zeros(&[n, 0])
            } else {
                self.stpe.spatial_half()
            };
            let (cv, fc) = self.fusion.forward(&self.node_emb.value, &spatial)?;
            (Some(cv), Some(fc))
        } else {
            (None, None)
        };

        let z2 = self.encode_context(x)?;

        let mut embed_rows = Tensor::zeros(&[b * t * n, c + d_pe]);
        for bb in 0..b {
            for tt in 0..t {
                for nn in 0..n {
                    let row = embed_rows.row_mut((bb * t + tt) * n + nn);
                    let src = ((bb * t + tt) * n + nn) * c;
                    row[..c].copy_from_slice(&x.data[src..src + c]);
                    row[c..].copy_from_slice(self.stpe.table.row(tt * n + nn));
                }
            }
        }
        let embed_pre = self.input_mlp.forward(&embed_rows)?;
        let embed_act = gelu(&embed_pre);
        let h_c = self.fold(&embed_act, b);

        let h0 = match &z2 {
            Some(z) => {
                let mut f = self.projector.forward(z)?;
                f.add_scaled(&h_c, 1.0)?;
                f
            }
            None => h_c.clone(),
        };

        let (h1, temporal) = self.temporal_forward(&h0, training, rng)?;

        let mut h = h1;
        let mut spatial_caches = Vec::with_capacity(self.spatial.len());
        for layer in &self.spatial {
            let (next, cache) =
                layer.forward(&h, ctx.as_ref(), b, self.cfg.dropout, training, rng)?;
            spatial_caches.push(cache);
            h = next;
        }

        let y_hat = self.output.forward(&h)?;
        y_hat.assert_finite("forecast")?;
        Ok(ForwardCache {
            batch: b,
            ctx,
            fusion_cache,
            z2,
            embed_rows,
            embed_pre,
            h_c,
            h0,
            temporal,
            spatial: spatial_caches,
            h_last: h,
            y_hat,
        })
    }

    /// Accumulate gradients for d(loss)/d(y_hat rows).
    pub fn backward_batch(&mut self, cache: &ForwardCache, d_yhat: &Tensor) -> Result<()> {
        let b = cache.batch;
        let mut dh = self.output.backward(&cache.h_last, d_yhat)?;

        let mut d_ctx_total: Option<Tensor> = None;
        let n_layers = self.spatial.len();
        for idx in (0..n_layers).rev() {
            let (dh_prev, dctx) = self.spatial[idx].backward(
                &cache.spatial[idx],
                cache.ctx.as_ref(),
                b,
                &dh,
            )?;
            dh = dh_prev;
            if let Some(dc) = dctx {
                match &mut d_ctx_total {
                    Some(acc) => acc.add_scaled(&dc, 1.0)?,
                    None => d_ctx_total = Some(dc),
                }
            }
        }

        let d_h0 = self.temporal_backward(&cache.temporal, &dh)?;

        if let Some(z2) = &cache.z2 {
            self.projector.backward(z2, &d_h0)?;
        }

        let d_embed_act = self.unfold(&d_h0, b);
        let d_embed_pre = gelu_backward(&cache.embed_pre, &d_embed_act)?;
        self.input_mlp.backward(&cache.embed_rows, &d_embed_pre)?;

        if let (Some(dc), Some(fc)) = (&d_ctx_total, &cache.fusion_cache) {
            let d_emb = self.fusion.backward(fc, dc)?;
            self.node_emb.grad.add_scaled(&d_emb, 1.0)?;
        }
        Ok(())
    }

    /// Convenience single-window forward, returning [horizon, N, C] on the
    /// normalized scale.
    pub fn forward_window(&self, x_short: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let (t, n, c) = (x_short.dim(0), x_short.dim(1), x_short.dim(2));
        let x4 = x_short.clone().reshape(&[1, t, n, c])?;
        let cache = self.forward_batch(&x4, false, rng)?;
        rows_to_window(&cache.y_hat, self.cfg.horizon, c)
    }
}

/// Rearrange a [T, N, C] window into per-node target rows [N, T*C].
pub fn window_to_rows(y: &Tensor) -> Result<Tensor> {
    if y.rank() != 3 {
        return Err(CoreError::Shape(format!(
            "expected a [T, N, C] window, got {:?}",
            y.shape
        )));
    }
    let (t, n, c) = (y.dim(0), y.dim(1), y.dim(2));
    let mut rows = Tensor::zeros(&[n, t * c]);
    for tt in 0..t {
        for nn in 0..n {
            let src = (tt * n + nn) * c;
            let dst = nn * t * c + tt * c;
            rows.data[dst..dst + c].copy_from_slice(&y.data[src..src + c]);
        }
    }
    Ok(rows)
}

/// Inverse of `window_to_rows` for a single window.
pub fn rows_to_window(rows: &Tensor, t: usize, c: usize) -> Result<Tensor> {
    let n = rows.dim(0);
    if rows.last_dim() != t * c {
        return Err(CoreError::Shape(format!(
            "rows of width {} cannot reshape to horizon {t} x {c} channels",
            rows.last_dim()
        )));
    }
    let mut out = Tensor::zeros(&[t, n, c]);
    for tt in 0..t {
        for nn in 0..n {
            let dst = (tt * n + nn) * c;
            let src = nn * t * c + tt * c;
            out.data[dst..dst + c].copy_from_slice(&rows.data[src..src + c]);
        }
    }
    Ok(out)
}

/// Mean absolute error over all entries; both sides share one shape.
pub fn regression_loss(y_hat: &Tensor, y: &Tensor) -> Result<f64> {
    if y_hat.shape != y.shape {
        return Err(CoreError::Shape(format!(
            "loss shapes differ: {:?} vs {:?}",
            y_hat.shape, y.shape
        )));
    }
    let numel = y.numel();
    if numel == 0 {
        return Err(CoreError::Shape("loss over an empty tensor".into()));
    }
    let sum: f64 = y_hat
        .data
        .iter()
        .zip(&y.data)
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(sum / numel as f64)
}

/// Loss plus its gradient with respect to `y_hat`.
pub fn regression_loss_grad(y_hat: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let loss = regression_loss(y_hat, y)?;
    let scale = 1.0 / y.numel() as f64;
    let grad = y_hat.zip_map(y, |a, b| {
        if a > b {
            scale
        } else if a < b {
            -scale
        } else {
            0.0
        }
    })?;
    Ok((loss, grad))
}

fn mode_str(mode: SpatialMode) -> &'static str {
    match mode {
        SpatialMode::Structured => "structured",
        SpatialMode::Basic => "basic",
    }
}

fn agg_str(agg: Aggregation) -> &'static str {
    match agg {
        Aggregation::Mean => "mean",
        Aggregation::Sum => "sum",
    }
}

pub fn parse_mode(s: &str) -> Result<SpatialMode> {
    match s {
        "structured" => Ok(SpatialMode::Structured),
        "basic" => Ok(SpatialMode::Basic),
        other => Err(CoreError::Config(format!(
            "unknown spatial mode '{other}'; use structured or basic"
        ))),
    }
}

pub fn parse_aggregation(s: &str) -> Result<Aggregation> {
    match s {
        "mean" => Ok(Aggregation::Mean),
        "sum" => Ok(Aggregation::Sum),
        other => Err(CoreError::Config(format!(
            "unknown aggregation '{other}'; use mean or sum"
        ))),
    }
}

/// Persist the forecaster; the frozen encoder, when present, is written as
/// a nested checkpoint under `piencoder/`.
pub fn save_premixer(
    dir: &std::path::Path,
    model: &PreMixer,
    seed: u64,
    global_step: u64,
    adam: Option<&Adam>,
) -> Result<()> {
    let cfg = &model.cfg;
    let mut hyper = Map::new();
    hyper.insert("t_in".into(), json!(cfg.t_in));
    hyper.insert("horizon".into(), json!(cfg.horizon));
    hyper.insert("channels".into(), json!(cfg.channels));
    hyper.insert("n_nodes".into(), json!(cfg.n_nodes));
    hyper.insert("d_model".into(), json!(cfg.d_model));
    hyper.insert("d_pe".into(), json!(cfg.d_pe));
    hyper.insert("d_emb".into(), json!(cfg.d_emb));
    hyper.insert("d_ctx".into(), json!(cfg.d_ctx));
    hyper.insert("spatial_layers".into(), json!(cfg.spatial_layers));
    hyper.insert("dropout".into(), json!(cfg.dropout));
    hyper.insert("spatial_mode".into(), json!(mode_str(cfg.spatial_mode)));
    hyper.insert("aggregation".into(), json!(agg_str(cfg.aggregation)));
    hyper.insert("no_pretrain".into(), json!(cfg.no_pretrain));
    hyper.insert("no_context".into(), json!(cfg.no_context));
    hyper.insert("no_stpe".into(), json!(cfg.no_stpe));
    hyper.insert("piencoder_linked".into(), json!(model.encoder.is_some()));
    save_checkpoint(dir, "premixer", seed, global_step, &hyper, &model.params(), adam)?;
    if let Some(enc) = &model.encoder {
        save_piencoder(&dir.join("piencoder"), enc, seed, 0, None)?;
    }
    Ok(())
}

pub fn load_premixer(dir: &std::path::Path) -> Result<(PreMixer, Option<Adam>, u64, u64)> {
    let mut ckpt = load_checkpoint(dir)?;
    if ckpt.kind != "premixer" {
        return Err(CoreError::Data(format!(
            "expected a premixer checkpoint, found kind '{}'",
            ckpt.kind
        )));
    }
    let mode = parse_mode(
        ckpt.hyper
            .get("spatial_mode")
            .and_then(|v| v.as_str())
            .unwrap_or("structured"),
    )?;
    let agg = parse_aggregation(
        ckpt.hyper
            .get("aggregation")
            .and_then(|v| v.as_str())
            .unwrap_or("mean"),
    )?;
    let cfg = ForecastConfig {
        t_in: ckpt.hyper_u64("t_in")? as usize,
        horizon: ckpt.hyper_u64("horizon")? as usize,
        channels: ckpt.hyper_u64("channels")? as usize,
        n_nodes: ckpt.hyper_u64("n_nodes")? as usize,
        d_model: ckpt.hyper_u64("d_model")? as usize,
        d_pe: ckpt.hyper_u64("d_pe")? as usize,
        d_emb: ckpt.hyper_u64("d_emb")? as usize,
        d_ctx: ckpt.hyper_u64("d_ctx")? as usize,
        spatial_layers: ckpt.hyper_u64("spatial_layers")? as usize,
        dropout: ckpt.hyper_f64("dropout")?,
        spatial_mode: mode,
        aggregation: agg,
        no_pretrain: ckpt.hyper_bool("no_pretrain"),
        no_context: ckpt.hyper_bool("no_context"),
        no_stpe: ckpt.hyper_bool("no_stpe"),
    };
    let encoder = if ckpt.hyper_bool("piencoder_linked") {
        Some(load_piencoder(&dir.join("piencoder"))?.0)
    } else {
        None
    };
    let mut rng = Rng::new(0);
    let mut model = PreMixer::new(cfg, encoder, &mut rng)?;
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
