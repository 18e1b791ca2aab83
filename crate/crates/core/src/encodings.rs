//! Positional encodings and node context fusion.
//!
//! The spatio-temporal positional encoding splits its width in half: the
//! first half holds interleaved sin/cos features of the time index, the
//! second half the same features of the node index, both on the classic
//! geometric frequency ladder. It is fixed, never trained. Node context
//! fuses the spatial half with a learnable per-node embedding through a
//! small GELU layer; the result conditions the spatial mixing gates.

use crate::error::{CoreError, Result};
use crate::layers::{gelu_backward, Linear};
use crate::rng::Rng;
use crate::tensor::{Parameter, Tensor};

/// Fixed positional table, [T, N, d_pe].
#[derive(Debug, Clone)]
pub struct Stpe {
    pub table: Tensor,
    pub d_pe: usize,
}

fn frequency(pair: usize, d_pe: usize) -> f64 {
    10000f64.powf(-(4.0 * pair as f64) / d_pe as f64)
}

/// Build the spatio-temporal table. `d_pe` must be a positive multiple of 4
/// so both halves hold whole sin/cos pairs.
pub fn build_stpe(t_len: usize, n_nodes: usize, d_pe: usize) -> Result<Stpe> {
    if d_pe == 0 || d_pe % 4 != 0 {
        return Err(CoreError::Config(format!(
            "positional encoding width must be a positive multiple of 4, got {d_pe}"
        )));
    }
    let half = d_pe / 2;
    let pairs = d_pe / 4;
    let mut table = Tensor::zeros(&[t_len, n_nodes, d_pe]);
    for t in 0..t_len {
        for n in 0..n_nodes {
            let row = &mut table.data[(t * n_nodes + n) * d_pe..(t * n_nodes + n + 1) * d_pe];
            for i in 0..pairs {
                let wt = t as f64 * frequency(i, d_pe);
                row[2 * i] = wt.sin();
                row[2 * i + 1] = wt.cos();
                let wn = n as f64 * frequency(i, d_pe);
                row[half + 2 * i] = wn.sin();
                row[half + 2 * i + 1] = wn.cos();
            }
        }
    }
    Ok(Stpe { table, d_pe })
}

/// Temporal-only fallback: the classic sinusoidal encoding of t over the
/// full width, identical for every node.
pub fn build_temporal_pe(t_len: usize, n_nodes: usize, d_pe: usize) -> Result<Stpe> {
    if d_pe == 0 || d_pe % 2 != 0 {
        return Err(CoreError::Config(format!(
            "temporal encoding width must be a positive multiple of 2, got {d_pe}"
        )));
    }
    let pairs = d_pe / 2;
    let mut table = Tensor::zeros(&[t_len, n_nodes, d_pe]);
    for t in 0..t_len {
        for n in 0..n_nodes {
            let row = &mut table.data[(t * n_nodes + n) * d_pe..(t * n_nodes + n + 1) * d_pe];
            for i in 0..pairs {
                let w = t as f64 * 10000f64.powf(-(2.0 * i as f64) / d_pe as f64);
                row[2 * i] = w.sin();
                row[2 * i + 1] = w.cos();
            }
        }
    }
    Ok(Stpe { table, d_pe })
}

impl Stpe {
    pub fn t_len(&self) -> usize {
        self.table.dim(0)
    }

    pub fn n_nodes(&self) -> usize {
        self.table.dim(1)
    }

    /// The node-dependent half as an [N, d_pe/2] matrix. Constant in t by
    /// construction, so it is read at t = 0.
    pub fn spatial_half(&self) -> Tensor {
        let n = self.n_nodes();
        let half = self.d_pe / 2;
        let mut out = Tensor::zeros(&[n, half]);
        for nn in 0..n {
            out.data[nn * half..(nn + 1) * half]
                .copy_from_slice(&self.table.data[nn * self.d_pe + half..(nn + 1) * self.d_pe]);
        }
        out
    }
}

/// Uniformly initialized learnable node embedding, [N, d_emb].
pub fn init_node_embedding(n_nodes: usize, d_emb: usize, rng: &mut Rng) -> Parameter {
    let bound = 1.0 / (d_emb as f64).sqrt();
    let data = (0..n_nodes * d_emb)
        .map(|_| rng.uniform(-bound, bound))
        .collect();
    Parameter::new(
        "node_emb",
        Tensor::new(vec![n_nodes, d_emb], data).expect("embedding shape"),
    )
}

/// Per-node context c = GELU(Linear([spatial encoding || embedding])).
#[derive(Debug, Clone)]
pub struct ContextFusion {
    pub lin: Linear,
    pub d_spatial: usize,
}

#[derive(Debug, Clone)]
pub struct FusionCache {
    pub input: Tensor,
    pub pre: Tensor,
}

impl ContextFusion {
    pub fn new(d_spatial: usize, d_emb: usize, d_ctx: usize, rng: &mut Rng) -> Self {
        ContextFusion {
            lin: Linear::new("fusion", d_spatial + d_emb, d_ctx, true, rng),
            d_spatial,
        }
    }

    pub fn d_ctx(&self) -> usize {
        self.lin.out_dim()
    }

    /// emb: [N, d_emb], spatial: [N, d_spatial] -> ([N, d_ctx], cache).
    pub fn forward(&self, emb: &Tensor, spatial: &Tensor) -> Result<(Tensor, FusionCache)> {
        let n = emb.dim(0);
        if spatial.dim(0) != n || spatial.last_dim() != self.d_spatial {
            return Err(CoreError::Shape(format!(
                "fusion spatial input {:?} does not match [{}, {}]",
                spatial.shape, n, self.d_spatial
            )));
        }
        let d_emb = emb.last_dim();
        let width = self.d_spatial + d_emb;
        let mut input = Tensor::zeros(&[n, width]);
        for nn in 0..n {
            let row = input.row_mut(nn);
            row[..self.d_spatial].copy_from_slice(spatial.row(nn));
            row[self.d_spatial..].copy_from_slice(emb.row(nn));
        }
        let pre = self.lin.forward(&input)?;
        let c = crate::layers::gelu(&pre);
        Ok((c, FusionCache { input, pre }))
    }

    /// Accumulates the layer's gradients and returns dL/dE.
    pub fn backward(&mut self, cache: &FusionCache, dc: &Tensor) -> Result<Tensor> {
        let dpre = gelu_backward(&cache.pre, dc)?;
        let dinput = self.lin.backward(&cache.input, &dpre)?;
        let n = dinput.dim(0);
        let d_emb = dinput.last_dim() - self.d_spatial;
        let mut demb = Tensor::zeros(&[n, d_emb]);
        for nn in 0..n {
            demb.row_mut(nn)
                .copy_from_slice(&dinput.row(nn)[self.d_spatial..]);
        }
        Ok(demb)
    }
}
