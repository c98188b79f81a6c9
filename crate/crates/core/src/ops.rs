//! Fused row-wise kernels for the CPU backend.
//!
//! The stock elementwise kernels call into libm for every `exp`/`tanh`, which
//! dominates the cost of attention on small models. These ops compute softmax,
//! log-softmax and GELU in a single pass and supply their own backward rules.
//! `f32` uses a polynomial `exp` (relative error ~1e-7); `f64` uses the exact
//! library functions so that finite-difference checks stay meaningful.

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Shape, Tensor, D};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

#[inline(always)]
pub(crate) fn fast_exp(x: f32) -> f32 {
    let x = x.clamp(-87.0, 88.0);
    // round to nearest via 1.5 * 2^23
    let n = (x * std::f32::consts::LOG2_E + 12_582_912.0) - 12_582_912.0;
    // Cody-Waite reduction
    let r = (x - n * 0.693_145_75) - n * 1.428_606_8e-6;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67
                    + r * (0.041_666_668 + r * (0.008_333_334 + r * (0.001_388_888_9 + r * 0.000_198_412_7))))));
    let bits = ((n as i32 + 127) << 23) as u32;
    p * f32::from_bits(bits)
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&v[start..end]),
        None => bail!("fused op expects a contiguous input"),
    }
}

fn last_dim(layout: &Layout) -> usize {
    layout.dims().last().copied().unwrap_or(1).max(1)
}

struct SoftmaxLastDim;

impl CustomOp1 for SoftmaxLastDim {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = last_dim(layout);
        let out = match storage {
            CpuStorage::F32(v) => {
                let src = contiguous(v, layout)?;
                let mut out = vec![0f32; src.len()];
                for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0f32;
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = fast_exp(x - max);
                        sum += *d;
                    }
                    let inv = 1.0 / sum;
                    dst.iter_mut().for_each(|d| *d *= inv);
                }
                CpuStorage::F32(out)
            }
            CpuStorage::F64(v) => {
                let src = contiguous(v, layout)?;
                let mut out = vec![0f64; src.len()];
                for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let mut sum = 0f64;
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = (x - max).exp();
                        sum += *d;
                    }
                    dst.iter_mut().for_each(|d| *d /= sum);
                }
                CpuStorage::F64(out)
            }
            _ => bail!("fused-softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let dot = (grad * res)?.sum_keepdim(D::Minus1)?;
        Ok(Some(res.mul(&grad.broadcast_sub(&dot)?)?))
    }
}

struct LogSoftmaxLastDim;

impl CustomOp1 for LogSoftmaxLastDim {
    fn name(&self) -> &'static str {
        "fused-log-softmax"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dim = last_dim(layout);
        let out = match storage {
            CpuStorage::F32(v) => {
                let src = contiguous(v, layout)?;
                let mut out = vec![0f32; src.len()];
                for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let sum: f32 = row.iter().map(|&x| fast_exp(x - max)).sum();
                    let lse = max + sum.ln();
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = x - lse;
                    }
                }
                CpuStorage::F32(out)
            }
            CpuStorage::F64(v) => {
                let src = contiguous(v, layout)?;
                let mut out = vec![0f64; src.len()];
                for (row, dst) in src.chunks_exact(dim).zip(out.chunks_exact_mut(dim)) {
                    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    let lse = max + sum.ln();
                    for (d, &x) in dst.iter_mut().zip(row) {
                        *d = x - lse;
                    }
                }
                CpuStorage::F64(out)
            }
            _ => bail!("fused-log-softmax supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let probs = res.contiguous()?.apply_op1_no_bwd(&Exp)?;
        let total = grad.sum_keepdim(D::Minus1)?;
        Ok(Some(grad.sub(&probs.broadcast_mul(&total)?)?))
    }
}

struct Exp;

impl CustomOp1 for Exp {
    fn name(&self) -> &'static str {
        "fused-exp"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(contiguous(v, layout)?.iter().map(|&x| fast_exp(x)).collect()),
            CpuStorage::F64(v) => CpuStorage::F64(contiguous(v, layout)?.iter().map(|&x| x.exp()).collect()),
            _ => bail!("fused-exp supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }
}

#[inline(always)]
fn tanh_f32(u: f32) -> f32 {
    // tanh(u) = 1 - 2 / (exp(2u) + 1)
    1.0 - 2.0 / (fast_exp(2.0 * u) + 1.0)
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                let (c, k) = (SQRT_2_OVER_PI as f32, GELU_COEF as f32);
                CpuStorage::F32(
                    contiguous(v, layout)?
                        .iter()
                        .map(|&x| 0.5 * x * (1.0 + tanh_f32(c * (x + k * x * x * x))))
                        .collect(),
                )
            }
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, layout)?
                    .iter()
                    .map(|&x| 0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh()))
                    .collect(),
            ),
            _ => bail!("fused-gelu supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let slope = arg.contiguous()?.apply_op1_no_bwd(&GeluSlope)?;
        Ok(Some(grad.mul(&slope)?))
    }
}

struct GeluSlope;

impl CustomOp1 for GeluSlope {
    fn name(&self) -> &'static str {
        "fused-gelu-slope"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => {
                let (c, k) = (SQRT_2_OVER_PI as f32, GELU_COEF as f32);
                CpuStorage::F32(
                    contiguous(v, layout)?
                        .iter()
                        .map(|&x| {
                            let t = tanh_f32(c * (x + k * x * x * x));
                            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * k * x * x)
                        })
                        .collect(),
                )
            }
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous(v, layout)?
                    .iter()
                    .map(|&x| {
                        let t = (SQRT_2_OVER_PI * (x + GELU_COEF * x * x * x)).tanh();
                        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_COEF * x * x)
                    })
                    .collect(),
            ),
            _ => bail!("fused-gelu-slope supports f32 and f64 only"),
        };
        Ok((out, layout.shape().clone()))
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(SoftmaxLastDim)
}

/// Log-softmax over the last dimension.
pub fn log_softmax_last_dim(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(LogSoftmaxLastDim)
}

/// GELU, tanh approximation.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// Divides every vector along the last dimension by its L2 norm.
pub fn l2_normalize(x: &Tensor) -> candle_core::Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    x.broadcast_div(&norm)
}

/// True when every element is finite.
pub fn all_finite(x: &Tensor) -> candle_core::Result<bool> {
    let flat = x.flatten_all()?.to_dtype(candle_core::DType::F64)?.to_vec1::<f64>()?;
    Ok(flat.iter().all(|v| v.is_finite()))
}
