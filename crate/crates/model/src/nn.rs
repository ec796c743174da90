//! Parameter store with seeded initialization and the transformer building blocks.

use candle_core::{DType, Device, Result, Tensor, Var, D};

use crate::ops;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand::Rng;

/// Additive mask value for disallowed attention edges; `exp` of it underflows to exactly 0.
pub const MASKED: f32 = -1e9;

/// Named trainable tensors in creation order. Candle's CPU generator cannot be seeded, so all
/// initial values come from a ChaCha stream.
pub struct VarStore {
    entries: Vec<(String, Var)>,
    rng: ChaCha8Rng,
    device: Device,
    dtype: DType,
}

impl VarStore {
    pub fn new(seed: u64, device: &Device) -> Self {
        Self::with_dtype(seed, device, DType::F32)
    }

    pub fn with_dtype(seed: u64, device: &Device, dtype: DType) -> Self {
        VarStore { entries: Vec::new(), rng: ChaCha8Rng::seed_from_u64(seed), device: device.clone(), dtype }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn from_values(&mut self, name: &str, shape: &[usize], values: Vec<f64>) -> Result<Tensor> {
        assert!(self.get(name).is_none(), "duplicate parameter {name}");
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(out)
    }

    /// Gaussian initialization via Box-Muller on the store's stream.
    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.normal_around(name, shape, vec![0.0; n], std)
    }

    /// `mean` plus elementwise Gaussian noise.
    pub fn normal_around(&mut self, name: &str, shape: &[usize], mean: Vec<f64>, std: f64) -> Result<Tensor> {
        let values = mean
            .into_iter()
            .map(|m| {
                let u1: f64 = self.rng.random::<f64>().max(f64::MIN_POSITIVE);
                let u2: f64 = self.rng.random();
                m + std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
            })
            .collect();
        self.from_values(name, shape, values)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        self.from_values(name, shape, vec![value; n])
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.entries.iter().filter(|(n, _)| n.starts_with(prefix)).cloned().collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }
}

/// Row-major `x W + b` applied over the last dimension.
#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(vs: &mut VarStore, name: &str, inp: usize, out: usize) -> Result<Self> {
        Self::with_std(vs, name, inp, out, (1.0 / inp as f64).sqrt())
    }

    pub fn with_std(vs: &mut VarStore, name: &str, inp: usize, out: usize, std: f64) -> Result<Self> {
        let weight = if std == 0.0 {
            vs.constant(&format!("{name}.weight"), &[inp, out], 0.0)?
        } else {
            vs.normal(&format!("{name}.weight"), &[inp, out], std)?
        };
        let bias = vs.constant(&format!("{name}.bias"), &[out], 0.0)?;
        Ok(Linear { weight, bias })
    }

    /// Weight matrix `weight` (row-major `inp x out`) plus Gaussian noise of `std`.
    pub fn perturbed(vs: &mut VarStore, name: &str, inp: usize, out: usize, weight: Vec<f64>, std: f64) -> Result<Self> {
        let weight = vs.normal_around(&format!("{name}.weight"), &[inp, out], weight, std)?;
        let bias = vs.constant(&format!("{name}.bias"), &[out], 0.0)?;
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let inp = dims[dims.len() - 1];
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, inp))?.matmul(&self.weight)?;
        let y = ops::bias_add(&y, &self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-scalar") = self.weight.dim(1)?;
        y.reshape(out_dims)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
}

impl LayerNorm {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize) -> Result<Self> {
        Ok(LayerNorm { gain: vs.constant(&format!("{name}.gain"), &[dim], 1.0)?, bias: vs.constant(&format!("{name}.bias"), &[dim], 0.0)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        ops::layer_norm(x, &self.gain, &self.bias, 1e-5)
    }
}

#[derive(Clone)]
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize, hidden: usize, out: usize, out_std: f64) -> Result<Self> {
        Ok(Mlp {
            fc1: Linear::new(vs, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::with_std(vs, &format!("{name}.fc2"), hidden, out, out_std)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&ops::relu(&self.fc1.forward(x)?)?)
    }
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    ops::softmax(x, None, 1.0)
}

/// Multi-head attention. Queries and keys/values may come from different token sets.
#[derive(Clone)]
pub struct Attention {
    q: Linear,
    kv: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize, heads: usize, out_std: f64) -> Result<Self> {
        Ok(Attention {
            q: Linear::new(vs, &format!("{name}.q"), dim, dim)?,
            kv: Linear::new(vs, &format!("{name}.kv"), dim, 2 * dim)?,
            out: Linear::with_std(vs, &format!("{name}.out"), dim, dim, out_std)?,
            heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        x.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()
    }

    /// `xq`: (B, Lq, D), `xkv`: (B, Lk, D), `mask`: additive (Lq, Lk) or none.
    pub fn forward(&self, xq: &Tensor, xkv: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, d) = xq.dims3()?;
        let q = self.split_heads(&self.q.forward(xq)?)?;
        let kv = self.kv.forward(xkv)?;
        let k = self.split_heads(&kv.narrow(D::Minus1, 0, d)?)?;
        let v = self.split_heads(&kv.narrow(D::Minus1, d, d)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let y = ops::softmax(&q.matmul(&k.t()?)?, mask, scale)?.matmul(&v)?;
        let y = y.transpose(1, 2)?.contiguous()?.reshape((b, lq, d))?;
        self.out.forward(&y)
    }
}

/// Additive causal mask over `n` positions (row attends to columns <= row).
pub fn causal_mask(n: usize, device: &Device, dtype: DType) -> Result<Tensor> {
    let v: Vec<f32> = (0..n * n).map(|i| if i % n <= i / n { 0.0 } else { MASKED }).collect();
    Tensor::from_vec(v, (n, n), device)?.to_dtype(dtype)
}

/// Pre-norm self-attention plus MLP.
#[derive(Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, depth: usize) -> Result<Self> {
        let out_std = (1.0 / (dim * 2 * depth.max(1)) as f64).sqrt();
        Ok(Block {
            ln1: LayerNorm::new(vs, &format!("{name}.ln1"), dim)?,
            attn: Attention::new(vs, &format!("{name}.attn"), dim, heads, out_std)?,
            ln2: LayerNorm::new(vs, &format!("{name}.ln2"), dim)?,
            mlp: Mlp::new(vs, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, out_std)?,
        })
    }

    pub fn forward(&self, x: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let h = self.ln1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, mask)?)?;
        let h = self.ln2.forward(&x)?;
        x + self.mlp.forward(&h)?
    }
}

/// Spatial attention within each frame, causal temporal attention per grid location, then MLP.
/// Tokens are laid out (B, T, N, D).
#[derive(Clone)]
pub struct StBlock {
    ln_s: LayerNorm,
    spatial: Attention,
    ln_t: LayerNorm,
    temporal: Attention,
    ln_m: LayerNorm,
    mlp: Mlp,
}

impl StBlock {
    pub fn new(vs: &mut VarStore, name: &str, dim: usize, heads: usize, mlp_ratio: usize, depth: usize) -> Result<Self> {
        let out_std = (1.0 / (dim * 3 * depth.max(1)) as f64).sqrt();
        Ok(StBlock {
            ln_s: LayerNorm::new(vs, &format!("{name}.ln_s"), dim)?,
            spatial: Attention::new(vs, &format!("{name}.spatial"), dim, heads, out_std)?,
            ln_t: LayerNorm::new(vs, &format!("{name}.ln_t"), dim)?,
            temporal: Attention::new(vs, &format!("{name}.temporal"), dim, heads, out_std)?,
            ln_m: LayerNorm::new(vs, &format!("{name}.ln_m"), dim)?,
            mlp: Mlp::new(vs, &format!("{name}.mlp"), dim, dim * mlp_ratio, dim, out_std)?,
        })
    }

    pub fn forward(&self, x: &Tensor, causal: &Tensor) -> Result<Tensor> {
        let (b, t, n, d) = x.dims4()?;
        let xs = x.reshape((b * t, n, d))?;
        let h = self.ln_s.forward(&xs)?;
        let xs = (&xs + self.spatial.forward(&h, &h, None)?)?;
        let xt = xs.reshape((b, t, n, d))?.transpose(1, 2)?.contiguous()?.reshape((b * n, t, d))?;
        let h = self.ln_t.forward(&xt)?;
        let xt = (&xt + self.temporal.forward(&h, &h, Some(causal))?)?;
        let x = xt.reshape((b, n, t, d))?.transpose(1, 2)?.contiguous()?;
        let h = self.ln_m.forward(&x)?;
        x + self.mlp.forward(&h)?
    }
}
