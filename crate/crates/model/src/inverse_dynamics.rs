//! Spatiotemporal inverse dynamics model producing one latent action per frame transition.

use candle_core::{DType, Device, Result, Tensor};

use crate::config::ModelConfig;
use crate::nn::{causal_mask, Attention, LayerNorm, Linear, Mlp, StBlock, VarStore, MASKED};

/// Uncompressed, compressed and decompressed latent actions, each (B, T-1, ·).
#[derive(Clone)]
pub struct Latents {
    pub actions: Tensor,
    pub compressed: Tensor,
    pub decompressed: Tensor,
}

/// Mask for queries over `[frame tokens of all T frames ; T-1 queries]`: query t sees every
/// token of frames 0..=t+1 and queries 0..=t.
pub fn query_mask(frames: usize, tokens_per_frame: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let l = frames - 1;
    let cols = frames * tokens_per_frame + l;
    let mut v = vec![MASKED; l * cols];
    for t in 0..l {
        let row = &mut v[t * cols..(t + 1) * cols];
        row[..(t + 2) * tokens_per_frame].fill(0.0);
        let q0 = frames * tokens_per_frame;
        row[q0..q0 + t + 1].fill(0.0);
    }
    Tensor::from_vec(v, (l, cols), device)?.to_dtype(dtype)
}

#[derive(Clone)]
struct QueryBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    attn: Attention,
    ln_m: LayerNorm,
    mlp: Mlp,
}

/// Three-layer MLP. With `near_identity` and equal widths the hidden layers split the input
/// into positive and negative parts so the map starts as the identity plus small noise.
#[derive(Clone)]
pub struct BottleneckMlp {
    layers: [Linear; 3],
}

impl BottleneckMlp {
    pub fn new(vs: &mut VarStore, name: &str, inp: usize, out: usize, hidden: usize, near_identity: bool) -> Result<Self> {
        if near_identity {
            assert!(inp == out && hidden == 2 * inp, "identity init needs equal widths");
            let n = inp;
            let mut w1 = vec![0.0; n * 2 * n];
            let mut w2 = vec![0.0; 4 * n * n];
            let mut w3 = vec![0.0; 2 * n * n];
            for i in 0..n {
                w1[i * 2 * n + i] = 1.0;
                w1[i * 2 * n + n + i] = -1.0;
                w3[i * n + i] = 1.0;
                w3[(n + i) * n + i] = -1.0;
            }
            for i in 0..2 * n {
                w2[i * 2 * n + i] = 1.0;
            }
            let std = 1e-3;
            Ok(BottleneckMlp {
                layers: [
                    Linear::perturbed(vs, &format!("{name}.fc1"), n, 2 * n, w1, std)?,
                    Linear::perturbed(vs, &format!("{name}.fc2"), 2 * n, 2 * n, w2, std)?,
                    Linear::perturbed(vs, &format!("{name}.fc3"), 2 * n, n, w3, std)?,
                ],
            })
        } else {
            Ok(BottleneckMlp {
                layers: [
                    Linear::new(vs, &format!("{name}.fc1"), inp, hidden)?,
                    Linear::new(vs, &format!("{name}.fc2"), hidden, hidden)?,
                    Linear::new(vs, &format!("{name}.fc3"), hidden, out)?,
                ],
            })
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = crate::ops::relu(&self.layers[0].forward(x)?)?;
        let h = crate::ops::relu(&self.layers[1].forward(&h)?)?;
        self.layers[2].forward(&h)
    }
}

pub struct InverseDynamics {
    blocks: Vec<StBlock>,
    query_blocks: Vec<QueryBlock>,
    query: Tensor,
    ln_out: LayerNorm,
    pub compress: BottleneckMlp,
    pub decompress: BottleneckMlp,
    cfg: ModelConfig,
}

impl InverseDynamics {
    pub fn new(vs: &mut VarStore, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.d_model;
        let depth = cfg.idm_layers;
        let out_std = (1.0 / (d * 2 * depth.max(1)) as f64).sqrt();
        let mut blocks = Vec::new();
        let mut query_blocks = Vec::new();
        for i in 0..depth {
            blocks.push(StBlock::new(vs, &format!("idm.block{i}"), d, cfg.heads, cfg.mlp_ratio, depth)?);
            let name = format!("idm.query{i}");
            query_blocks.push(QueryBlock {
                ln_q: LayerNorm::new(vs, &format!("{name}.ln_q"), d)?,
                ln_kv: LayerNorm::new(vs, &format!("{name}.ln_kv"), d)?,
                attn: Attention::new(vs, &format!("{name}.attn"), d, cfg.heads, out_std)?,
                ln_m: LayerNorm::new(vs, &format!("{name}.ln_m"), d)?,
                mlp: Mlp::new(vs, &format!("{name}.mlp"), d, d * cfg.mlp_ratio, d, out_std)?,
            });
        }
        let query = vs.normal("idm.query", &[d], 0.02)?;
        let ln_out = LayerNorm::new(vs, "idm.ln_out", d)?;
        let identity = cfg.latent_dim == d;
        let compress = BottleneckMlp::new(vs, "idm.compress", d, cfg.latent_dim, 2 * d, identity)?;
        let decompress = BottleneckMlp::new(vs, "idm.decompress", cfg.latent_dim, d, 2 * d, identity)?;
        Ok(InverseDynamics { blocks, query_blocks, query, ln_out, compress, decompress, cfg: cfg.clone() })
    }

    /// Uncompressed latent actions from token grids (B, T, N, D). `time_emb` (B, T, D) supplies
    /// the timestamp of each frame; query slot t uses that of frame t+1.
    pub fn actions(&self, grids: &Tensor, time_emb: &Tensor) -> Result<Tensor> {
        let (b, t, n, d) = grids.dims4()?;
        if t < 2 {
            candle_core::bail!("need at least two frames, got {t}");
        }
        let causal = causal_mask(t, grids.device(), grids.dtype())?;
        let qmask = query_mask(t, n, grids.device(), grids.dtype())?;
        let mut x = grids.clone();
        let mut q = time_emb.narrow(1, 1, t - 1)?.broadcast_add(&self.query)?;
        for (block, qb) in self.blocks.iter().zip(&self.query_blocks) {
            x = block.forward(&x, &causal)?;
            let kv = Tensor::cat(&[x.reshape((b, t * n, d))?, q.clone()], 1)?;
            let h = qb.attn.forward(&qb.ln_q.forward(&q)?, &qb.ln_kv.forward(&kv)?, Some(&qmask))?;
            q = (q + h)?;
            q = (&q + qb.mlp.forward(&qb.ln_m.forward(&q)?)?)?;
        }
        self.ln_out.forward(&q)
    }

    pub fn infer(&self, grids: &Tensor, time_emb: &Tensor) -> Result<Latents> {
        let actions = self.actions(grids, time_emb)?;
        let compressed = self.compress.forward(&actions)?;
        let decompressed = self.decompress.forward(&compressed)?;
        Ok(Latents { actions, compressed, decompressed })
    }

    pub fn latent_dim(&self) -> usize {
        self.cfg.latent_dim
    }
}
