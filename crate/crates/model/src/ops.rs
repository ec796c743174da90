//! Fused CPU kernels with hand-written backward passes: layer norm, masked softmax, bias add,
//! ReLU and cross-entropy. Inputs must be contiguous; f32 and f64 are supported.

use candle_core::backend::BackendStorage;
use candle_core::{bail, CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Result, Shape, Tensor, WithDType};

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = T::cpu_storage_as_slice(s)?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("fused op needs a contiguous input"),
    }
}

fn values<T: WithDType>(t: &Tensor) -> Result<Vec<T>> {
    t.flatten_all()?.to_vec1::<T>()
}

fn last_dim(l: &Layout) -> Result<usize> {
    match l.dims().last() {
        Some(&d) if d > 0 => Ok(d),
        _ => bail!("fused op needs a non-empty last dimension"),
    }
}

macro_rules! float_dispatch {
    ($dtype:expr, $f:ident ( $($arg:expr),* )) => {
        match $dtype {
            DType::F32 => $f::<f32>($($arg),*),
            DType::F64 => $f::<f64>($($arg),*),
            other => bail!("unsupported dtype {other:?}"),
        }
    };
}

struct LayerNorm {
    eps: f64,
}

fn ln_fwd<T: WithDType>(eps: f64, x: &[T], g: &[T], b: &[T]) -> Vec<T> {
    let d = g.len();
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(d) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        for i in 0..d {
            out.push(T::from_f64((row[i].to_f64() - mean) * rstd * g[i].to_f64() + b[i].to_f64()));
        }
    }
    out
}

fn ln_bwd<T: WithDType>(eps: f64, x: &Tensor, g: &Tensor, grad: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
    let (xs, gs, dy) = (values::<T>(x)?, values::<T>(g)?, values::<T>(grad)?);
    let d = gs.len();
    let mut dx = Vec::with_capacity(xs.len());
    let mut dg = vec![0f64; d];
    let mut db = vec![0f64; d];
    let mut xhat = vec![0f64; d];
    let mut gx = vec![0f64; d];
    for (row, drow) in xs.chunks_exact(d).zip(dy.chunks_exact(d)) {
        let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v.to_f64() - mean).powi(2)).sum::<f64>() / d as f64;
        let rstd = 1.0 / (var + eps).sqrt();
        let (mut m1, mut m2) = (0.0, 0.0);
        for i in 0..d {
            xhat[i] = (row[i].to_f64() - mean) * rstd;
            let gi = drow[i].to_f64();
            gx[i] = gi * gs[i].to_f64();
            m1 += gx[i];
            m2 += gx[i] * xhat[i];
            dg[i] += gi * xhat[i];
            db[i] += gi;
        }
        let (m1, m2) = (m1 / d as f64, m2 / d as f64);
        for i in 0..d {
            dx.push(T::from_f64(rstd * (gx[i] - m1 - xhat[i] * m2)));
        }
    }
    let dev = x.device();
    let to = |v: Vec<f64>| Tensor::from_vec(v.into_iter().map(T::from_f64).collect::<Vec<T>>(), d, dev);
    Ok((Tensor::from_vec(dx, x.shape(), dev)?, to(dg)?, to(db)?))
}

impl CustomOp3 for LayerNorm {
    fn name(&self) -> &'static str {
        "fused-layer-norm"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> Result<(CpuStorage, Shape)> {
        let d = last_dim(l1)?;
        if l2.shape().elem_count() != d || l3.shape().elem_count() != d {
            bail!("layer norm parameters must have {d} elements");
        }
        fn run<T: WithDType>(eps: f64, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, s3: &CpuStorage, l3: &Layout) -> Result<CpuStorage> {
            Ok(T::to_cpu_storage_owned(ln_fwd(eps, slice::<T>(s1, l1)?, slice::<T>(s2, l2)?, slice::<T>(s3, l3)?)))
        }
        let out = float_dispatch!(s1.dtype(), run(self.eps, s1, l1, s2, l2, s3, l3))?;
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, g: &Tensor, _b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (dx, dg, db) = float_dispatch!(x.dtype(), ln_bwd(self.eps, x, g, grad))?;
        Ok((Some(dx), Some(dg), Some(db)))
    }
}

/// Layer normalization over the last dimension with gain and bias.
pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
    x.contiguous()?.apply_op3(gain, bias, LayerNorm { eps })
}

struct Softmax {
    scale: f64,
}

fn softmax_rows<T: WithDType>(scale: f64, x: &[T], mask: Option<&[T]>, lk: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![0f64; lk];
    let mask_rows = mask.map_or(1, |m| m.len() / lk);
    for (r, row) in x.chunks_exact(lk).enumerate() {
        let m = mask.map(|m| &m[(r % mask_rows) * lk..(r % mask_rows + 1) * lk]);
        let mut max = f64::NEG_INFINITY;
        for j in 0..lk {
            buf[j] = row[j].to_f64() * scale + m.map_or(0.0, |m| m[j].to_f64());
            max = max.max(buf[j]);
        }
        let mut sum = 0.0;
        for v in buf.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        out.extend(buf.iter().map(|v| T::from_f64(v / sum)));
    }
    out
}

fn softmax_bwd<T: WithDType>(scale: f64, y: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let lk = y.dim(candle_core::D::Minus1)?;
    let (ys, gs) = (values::<T>(y)?, values::<T>(grad)?);
    let mut dx = Vec::with_capacity(ys.len());
    for (yr, gr) in ys.chunks_exact(lk).zip(gs.chunks_exact(lk)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a.to_f64() * b.to_f64()).sum();
        dx.extend(yr.iter().zip(gr).map(|(a, b)| T::from_f64(scale * a.to_f64() * (b.to_f64() - dot))));
    }
    Tensor::from_vec(dx, y.shape(), y.device())
}

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let lk = last_dim(l)?;
        fn run<T: WithDType>(scale: f64, s: &CpuStorage, l: &Layout, lk: usize) -> Result<CpuStorage> {
            Ok(T::to_cpu_storage_owned(softmax_rows(scale, slice::<T>(s, l)?, None, lk)))
        }
        Ok((float_dispatch!(s.dtype(), run(self.scale, s, l, lk))?, l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(float_dispatch!(res.dtype(), softmax_bwd(self.scale, res, grad))?))
    }
}

impl CustomOp2 for Softmax {
    fn name(&self) -> &'static str {
        "fused-masked-softmax"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let lk = last_dim(l1)?;
        let dims = l1.dims();
        let lq = if dims.len() >= 2 { dims[dims.len() - 2] } else { 1 };
        if l2.dims() != [lq, lk] {
            bail!("mask shape {:?} does not match scores {:?}", l2.dims(), dims);
        }
        fn run<T: WithDType>(scale: f64, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, lk: usize) -> Result<CpuStorage> {
            Ok(T::to_cpu_storage_owned(softmax_rows(scale, slice::<T>(s1, l1)?, Some(slice::<T>(s2, l2)?), lk)))
        }
        Ok((float_dispatch!(s1.dtype(), run(self.scale, s1, l1, s2, l2, lk))?, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, _mask: &Tensor, res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(float_dispatch!(res.dtype(), softmax_bwd(self.scale, res, grad))?), None))
    }
}

/// `softmax(scale * x + mask)` over the last dimension; `mask` is (Lq, Lk), shared by all
/// leading dimensions, and receives no gradient.
pub fn softmax(x: &Tensor, mask: Option<&Tensor>, scale: f64) -> Result<Tensor> {
    let x = x.contiguous()?;
    match mask {
        Some(m) => x.apply_op2(&m.contiguous()?, Softmax { scale }),
        None => x.apply_op1(Softmax { scale }),
    }
}

struct BiasAdd;

fn colsum<T: WithDType>(grad: &Tensor, n: usize) -> Result<Tensor> {
    let gs = values::<T>(grad)?;
    let mut acc = vec![0f64; n];
    for row in gs.chunks_exact(n) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += v.to_f64();
        }
    }
    Tensor::from_vec(acc.into_iter().map(T::from_f64).collect::<Vec<T>>(), n, grad.device())
}

impl CustomOp2 for BiasAdd {
    fn name(&self) -> &'static str {
        "fused-bias-add"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let n = last_dim(l1)?;
        if l2.shape().elem_count() != n {
            bail!("bias has {} elements, expected {n}", l2.shape().elem_count());
        }
        fn run<T: WithDType>(s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout, n: usize) -> Result<CpuStorage> {
            let (y, b) = (slice::<T>(s1, l1)?, slice::<T>(s2, l2)?);
            let mut out = Vec::with_capacity(y.len());
            for row in y.chunks_exact(n) {
                out.extend(row.iter().zip(b).map(|(a, c)| *a + *c));
            }
            Ok(T::to_cpu_storage_owned(out))
        }
        Ok((float_dispatch!(s1.dtype(), run(s1, l1, s2, l2, n))?, l1.shape().clone()))
    }

    fn bwd(&self, _y: &Tensor, b: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let n = b.elem_count();
        Ok((Some(grad.clone()), Some(float_dispatch!(grad.dtype(), colsum(grad, n))?.reshape(b.shape())?)))
    }
}

/// `y + b` with `b` broadcast over every leading dimension of `y`.
pub fn bias_add(y: &Tensor, b: &Tensor) -> Result<Tensor> {
    y.contiguous()?.apply_op2(&b.contiguous()?, BiasAdd)
}

struct Relu;

fn relu_bwd<T: WithDType>(res: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let (ys, gs) = (values::<T>(res)?, values::<T>(grad)?);
    let zero = T::from_f64(0.0);
    let dx: Vec<T> = ys.iter().zip(&gs).map(|(y, g)| if *y > zero { *g } else { zero }).collect();
    Tensor::from_vec(dx, res.shape(), res.device())
}

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "fused-relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        fn run<T: WithDType>(s: &CpuStorage, l: &Layout) -> Result<CpuStorage> {
            let zero = T::from_f64(0.0);
            Ok(T::to_cpu_storage_owned(slice::<T>(s, l)?.iter().map(|v| if *v > zero { *v } else { zero }).collect()))
        }
        Ok((float_dispatch!(s.dtype(), run(s, l))?, l.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        Ok(Some(float_dispatch!(res.dtype(), relu_bwd(res, grad))?))
    }
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    x.contiguous()?.apply_op1(Relu)
}

struct CrossEntropy;

fn ce_fwd<T: WithDType>(logits: &[T], targets: &[u32], k: usize) -> Result<T> {
    let mut total = 0.0;
    for (row, &t) in logits.chunks_exact(k).zip(targets) {
        if t as usize >= k {
            bail!("target {t} out of range for {k} classes");
        }
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v.to_f64() - max).exp()).sum::<f64>().ln();
        total += lse - row[t as usize].to_f64();
    }
    Ok(T::from_f64(total / targets.len() as f64))
}

fn ce_bwd<T: WithDType>(logits: &Tensor, targets: &Tensor, grad: &Tensor) -> Result<Tensor> {
    let k = logits.dim(1)?;
    let (xs, ts) = (values::<T>(logits)?, values::<u32>(targets)?);
    let g = grad.to_dtype(DType::F64)?.to_scalar::<f64>()? / ts.len() as f64;
    let mut dx = Vec::with_capacity(xs.len());
    for (row, &t) in xs.chunks_exact(k).zip(&ts) {
        let max = row.iter().map(|v| v.to_f64()).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        for (j, v) in row.iter().enumerate() {
            let p = (v.to_f64() - max).exp() / sum;
            dx.push(T::from_f64(g * (p - if j == t as usize { 1.0 } else { 0.0 })));
        }
    }
    Tensor::from_vec(dx, logits.shape(), logits.device())
}

impl CustomOp2 for CrossEntropy {
    fn name(&self) -> &'static str {
        "fused-cross-entropy"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        if dims.len() != 2 || l2.dims() != [dims[0]] || dims[0] == 0 {
            bail!("cross-entropy wants logits (n, k) and targets (n), got {dims:?} and {:?}", l2.dims());
        }
        let targets = slice::<u32>(s2, l2)?;
        fn run<T: WithDType>(s1: &CpuStorage, l1: &Layout, targets: &[u32], k: usize) -> Result<CpuStorage> {
            Ok(T::to_cpu_storage_owned(vec![ce_fwd(slice::<T>(s1, l1)?, targets, k)?]))
        }
        Ok((float_dispatch!(s1.dtype(), run(s1, l1, targets, dims[1]))?, Shape::from(())))
    }

    fn bwd(&self, logits: &Tensor, targets: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        Ok((Some(float_dispatch!(logits.dtype(), ce_bwd(logits, targets, grad))?), None))
    }
}

/// Mean negative log-likelihood of `targets` (n,) u32 under `logits` (n, k).
pub fn cross_entropy(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    logits.contiguous()?.apply_op2(&targets.contiguous()?, CrossEntropy)
}
