//! Multi-head self- and cross-attention.
//!
//! Scores are scaled by `1/sqrt(head_dim)`. There is no dropout and no masking,
//! so a forward pass is a pure function of its inputs and weights.

use candle_core::Tensor;

use crate::error::{validation, Error, Result};
use crate::nn::{Builder, Linear};
use crate::ops;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    model_dim: usize,
    num_heads: usize,
}

impl AttentionConfig {
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        if model_dim == 0 || num_heads == 0 {
            return Err(Error::Config("model_dim and num_heads must be positive".into()));
        }
        if model_dim % num_heads != 0 {
            return Err(Error::Config(format!("model_dim {model_dim} is not divisible by {num_heads} heads")));
        }
        Ok(Self { model_dim, num_heads })
    }

    pub fn model_dim(&self) -> usize {
        self.model_dim
    }

    pub fn num_heads(&self) -> usize {
        self.num_heads
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

/// A `batch × tokens × model_dim` tensor whose entries are known to be finite.
#[derive(Clone, Debug)]
pub struct TokenTensor(Tensor);

impl TokenTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 {
            return validation(format!("token tensor must be rank 3, got {dims:?}"));
        }
        if dims[1] == 0 {
            return validation("token tensor needs at least one token");
        }
        if !ops::all_finite(&t)? {
            return validation("token tensor contains non-finite values");
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_inner(self) -> Tensor {
        self.0
    }

    pub fn dims3(&self) -> (usize, usize, usize) {
        let d = self.0.dims();
        (d[0], d[1], d[2])
    }
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = x.dims3()?;
    if heads == 1 {
        return Ok(x.reshape((b, 1, n, d))?);
    }
    Ok(x.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(x: &Tensor) -> Result<Tensor> {
    let (b, h, n, dh) = x.dims4()?;
    if h == 1 {
        return Ok(x.reshape((b, n, dh))?);
    }
    Ok(x.transpose(1, 2)?.contiguous()?.reshape((b, n, h * dh))?)
}

/// Softmax attention weights `B × heads × Nq × Nk` for already projected queries and keys.
pub fn attention_weights(q: &Tensor, k: &Tensor, heads: usize) -> Result<Tensor> {
    let (bq, _, dq) = q.dims3()?;
    let (bk, _, dk) = k.dims3()?;
    if bq != bk {
        return validation(format!("batch mismatch between queries ({bq}) and keys ({bk})"));
    }
    if dq != dk || dq % heads != 0 {
        return validation(format!("query dim {dq} / key dim {dk} incompatible with {heads} heads"));
    }
    let scale = 1.0 / ((dq / heads) as f64).sqrt();
    let qh = split_heads(q, heads)?;
    let kh = split_heads(k, heads)?;
    let scores = (qh.matmul(&kh.transpose(2, 3)?)? * scale)?;
    Ok(ops::softmax_last_dim(&scores)?)
}

/// Scaled dot-product attention over projected tensors; returns `(output, weights)`.
pub fn attend(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize) -> Result<(Tensor, Tensor)> {
    if k.dims() != v.dims() {
        return validation(format!("key {:?} and value {:?} shapes differ", k.dims(), v.dims()));
    }
    let weights = attention_weights(q, k, heads)?;
    let out = weights.matmul(&split_heads(v, heads)?)?;
    Ok((merge_heads(&out)?, weights))
}

/// Projections `W_Q, W_K, W_V, W_O` plus the head count.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub cfg: AttentionConfig,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
}

impl MultiHeadAttention {
    pub fn new(b: &mut Builder, cfg: AttentionConfig) -> Result<Self> {
        let d = cfg.model_dim();
        Ok(Self {
            cfg,
            wq: Linear::new(&mut b.pp("q"), d, d)?,
            wk: Linear::new(&mut b.pp("k"), d, d)?,
            wv: Linear::new(&mut b.pp("v"), d, d)?,
            wo: Linear::new(&mut b.pp("o"), d, d)?,
        })
    }

    fn check_width(&self, x: &Tensor) -> Result<()> {
        let d = x.dims().last().copied().unwrap_or(0);
        if d != self.cfg.model_dim() {
            return Err(Error::Config(format!(
                "input width {d} does not match model_dim {}",
                self.cfg.model_dim()
            )));
        }
        Ok(())
    }

    /// Self-attention on validated tokens.
    pub fn mhsa(&self, x: &TokenTensor) -> Result<TokenTensor> {
        Ok(TokenTensor(self.self_attend(x.tensor())?))
    }

    /// Cross-attention of `q` tokens over `kv` tokens.
    pub fn mhca(&self, q: &TokenTensor, kv: &TokenTensor) -> Result<TokenTensor> {
        Ok(TokenTensor(self.cross_attend(q.tensor(), kv.tensor())?))
    }

    pub fn self_attend(&self, x: &Tensor) -> Result<Tensor> {
        self.cross_attend(x, x)
    }

    pub fn cross_attend(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        self.check_width(q)?;
        self.check_width(kv)?;
        let (out, _) = attend(&self.wq.forward(q)?, &self.wk.forward(kv)?, &self.wv.forward(kv)?, self.cfg.num_heads())?;
        self.wo.forward(&out)
    }

    /// Attention weights (`B × heads × Nq × Nk`) for raw query and key/value tokens.
    pub fn weights(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        self.check_width(q)?;
        self.check_width(kv)?;
        attention_weights(&self.wq.forward(q)?, &self.wk.forward(kv)?, self.cfg.num_heads())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{seeded_rng, Registry};
    use candle_core::{DType, Device};

    fn build(d: usize, h: usize, seed: u64) -> MultiHeadAttention {
        let mut reg = Registry::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut reg, &mut rng, DType::F64);
        let mut attn = MultiHeadAttention::new(&mut b, AttentionConfig::new(d, h).unwrap()).unwrap();
        // non-zero biases so the oracle exercises them too
        let mut rng2 = seeded_rng(seed + 100);
        let mut reg2 = Registry::new();
        let mut b2 = Builder::new(&mut reg2, &mut rng2, DType::F64);
        for (i, lin) in [&mut attn.wq, &mut attn.wk, &mut attn.wv, &mut attn.wo].into_iter().enumerate() {
            lin.weight = b2.trunc_normal(&format!("w{i}"), &[d, d], 0.4).unwrap();
            lin.bias = b2.trunc_normal(&format!("b{i}"), &[d], 0.1).unwrap();
        }
        attn
    }

    fn to_nested(t: &Tensor) -> Vec<Vec<Vec<f64>>> {
        t.to_vec3::<f64>().unwrap()
    }

    fn mat(t: &Tensor) -> Vec<Vec<f64>> {
        t.to_vec2::<f64>().unwrap()
    }

    fn project(x: &[Vec<f64>], lin: &Linear) -> Vec<Vec<f64>> {
        let w = mat(&lin.weight);
        let b = lin.bias.to_vec1::<f64>().unwrap();
        x.iter()
            .map(|row| {
                (0..w[0].len())
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, v)| v * w[i][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    /// Per-head explicit loops, independent of the tensor path.
    fn oracle(attn: &MultiHeadAttention, q: &Tensor, kv: &Tensor) -> Vec<Vec<Vec<f64>>> {
        let (qs, kvs) = (to_nested(q), to_nested(kv));
        let h = attn.cfg.num_heads();
        let dh = attn.cfg.head_dim();
        qs.iter()
            .zip(&kvs)
            .map(|(qb, kvb)| {
                let qp = project(qb, &attn.wq);
                let kp = project(kvb, &attn.wk);
                let vp = project(kvb, &attn.wv);
                let mut out = vec![vec![0.0; h * dh]; qb.len()];
                for head in 0..h {
                    let r = head * dh..(head + 1) * dh;
                    for (i, qi) in qp.iter().enumerate() {
                        let scores: Vec<f64> = kp
                            .iter()
                            .map(|kj| qi[r.clone()].iter().zip(&kj[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                            .collect();
                        let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let e: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = e.iter().sum();
                        for (j, vj) in vp.iter().enumerate() {
                            for c in r.clone() {
                                out[i][c] += e[j] / z * vj[c];
                            }
                        }
                    }
                }
                project(&out, &attn.wo)
            })
            .collect()
    }

    fn max_diff(a: &[Vec<Vec<f64>>], b: &[Vec<Vec<f64>>]) -> f64 {
        a.iter()
            .flatten()
            .flatten()
            .zip(b.iter().flatten().flatten())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn config_rejects_indivisible_width() {
        assert!(matches!(AttentionConfig::new(10, 3), Err(Error::Config(_))));
        assert_eq!(AttentionConfig::new(12, 3).unwrap().head_dim(), 4);
    }

    #[test]
    fn mhsa_matches_loop_oracle() {
        let attn = build(8, 2, 1);
        let x = Tensor::randn(0f64, 1.0, (2, 4, 8), &Device::Cpu).unwrap();
        let y = attn.self_attend(&x).unwrap();
        assert!(max_diff(&to_nested(&y), &oracle(&attn, &x, &x)) < 1e-6);
    }

    #[test]
    fn mhca_matches_loop_oracle() {
        let attn = build(8, 2, 2);
        let q = Tensor::randn(0f64, 1.0, (1, 3, 8), &Device::Cpu).unwrap();
        let kv = Tensor::randn(0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let y = attn.cross_attend(&q, &kv).unwrap();
        assert!(max_diff(&to_nested(&y), &oracle(&attn, &q, &kv)) < 1e-6);
    }

    #[test]
    fn single_token_is_value_then_output_projection() {
        let attn = build(8, 2, 3);
        let x = Tensor::randn(0f64, 1.0, (3, 1, 8), &Device::Cpu).unwrap();
        let y = attn.self_attend(&x).unwrap();
        let expected = attn.wo.forward(&attn.wv.forward(&x).unwrap()).unwrap();
        assert!(max_diff(&to_nested(&y), &to_nested(&expected)) < 1e-12);
    }

    #[test]
    fn single_key_gives_identical_rows() {
        let attn = build(8, 4, 4);
        let q = Tensor::randn(0f64, 1.0, (2, 6, 8), &Device::Cpu).unwrap();
        let kv = Tensor::randn(0f64, 1.0, (2, 1, 8), &Device::Cpu).unwrap();
        let y = to_nested(&attn.cross_attend(&q, &kv).unwrap());
        for batch in y {
            for row in &batch {
                assert!(row.iter().zip(&batch[0]).all(|(a, b)| (a - b).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn cross_with_self_equals_self() {
        let attn = build(8, 2, 5);
        let x = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let a = attn.cross_attend(&x, &x).unwrap();
        let b = attn.self_attend(&x).unwrap();
        assert_eq!(to_nested(&a), to_nested(&b));
    }

    #[test]
    fn weight_rows_sum_to_one() {
        let attn = build(16, 4, 6);
        let x = Tensor::randn(0f64, 2.0, (2, 7, 16), &Device::Cpu).unwrap();
        let w = attn.weights(&x, &x).unwrap();
        let sums = w.sum(3).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-6));
    }

    #[test]
    fn batch_mismatch_is_rejected() {
        let attn = build(8, 2, 7);
        let q = Tensor::zeros((2, 3, 8), DType::F64, &Device::Cpu).unwrap();
        let kv = Tensor::zeros((1, 3, 8), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(attn.cross_attend(&q, &kv), Err(Error::Validation(_))));
        let wide = Tensor::zeros((2, 3, 6), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(attn.self_attend(&wide), Err(Error::Config(_))));
    }

    #[test]
    fn token_tensor_rejects_nan() {
        let t = Tensor::new(&[[[1.0f64, f64::NAN]]], &Device::Cpu).unwrap();
        assert!(matches!(TokenTensor::new(t), Err(Error::Validation(_))));
        let t = Tensor::zeros((1, 0, 4), DType::F64, &Device::Cpu).unwrap();
        assert!(TokenTensor::new(t).is_err());
    }

    #[test]
    fn permuting_tokens_permutes_output() {
        let attn = build(8, 2, 8);
        let x = Tensor::randn(0f64, 1.0, (1, 5, 8), &Device::Cpu).unwrap();
        let perm = [3u32, 0, 4, 1, 2];
        let idx = Tensor::new(&perm, &Device::Cpu).unwrap();
        let xp = x.index_select(&idx, 1).unwrap();
        let y = attn.self_attend(&x).unwrap().index_select(&idx, 1).unwrap();
        let yp = attn.self_attend(&xp).unwrap();
        assert!(max_diff(&to_nested(&y), &to_nested(&yp)) < 1e-12);
    }
}
