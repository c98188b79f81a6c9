//! Plain-loop reference implementations shared by the integration tests and
//! the acceptance harness.
#![allow(dead_code)]

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rgbx_core::attention::{AttentionConfig, MultiHeadAttention};
use rgbx_core::dsrm::{DsrmBlock, DsrmConfig};
use rgbx_core::maclip::{contrastive_loss, ContrastiveTargets};
use rgbx_core::nn::{seeded_rng, Builder, Linear, Mlp, Registry};
use rgbx_core::prompt::{decompose_attention, prompted_attention, PromptBundle};

pub type Mat = Vec<Vec<f64>>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(r: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let d = Normal::new(0.0, std).unwrap();
    let v: Vec<f64> = (0..n).map(|_| d.sample(r)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn mat(t: &Tensor) -> Mat {
    t.to_dtype(DType::F64).unwrap().to_vec2::<f64>().unwrap()
}

pub fn mat3(t: &Tensor) -> Vec<Mat> {
    t.to_dtype(DType::F64).unwrap().to_vec3::<f64>().unwrap()
}

pub fn max_diff(a: &[Mat], b: &[Mat]) -> f64 {
    assert_eq!(a.len(), b.len());
    let mut m: f64 = 0.0;
    for (x, y) in a.iter().zip(b) {
        assert_eq!(x.len(), y.len());
        for (r, s) in x.iter().zip(y) {
            assert_eq!(r.len(), s.len());
            for (p, q) in r.iter().zip(s) {
                m = m.max((p - q).abs());
            }
        }
    }
    m
}

pub fn max_diff_t(a: &Tensor, b: &Tensor) -> f64 {
    a.to_dtype(DType::F64)
        .unwrap()
        .sub(&b.to_dtype(DType::F64).unwrap())
        .unwrap()
        .abs()
        .unwrap()
        .flatten_all()
        .unwrap()
        .max(0)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap()
}

pub fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

pub fn linear(x: &Mat, l: &Linear) -> Mat {
    let w = mat(&l.weight);
    let b = l.bias.to_dtype(DType::F64).unwrap().to_vec1::<f64>().unwrap();
    x.iter()
        .map(|row| (0..b.len()).map(|o| b[o] + row.iter().enumerate().map(|(i, v)| v * w[i][o]).sum::<f64>()).collect())
        .collect()
}

pub fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())
}

pub fn mlp(x: &Mat, m: &Mlp) -> Mat {
    let h: Mat = linear(x, &m.fc1).into_iter().map(|r| r.into_iter().map(gelu).collect()).collect();
    linear(&h, &m.fc2)
}

pub fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

/// Per-head attention weights for projected rows: `[head][i][j]`.
pub fn attn_weights(q: &Mat, k: &Mat, heads: usize) -> Vec<Mat> {
    let dh = q[0].len() / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    (0..heads)
        .map(|h| {
            q.iter()
                .map(|qi| {
                    let s: Vec<f64> = k.iter().map(|kj| (0..dh).map(|t| qi[h * dh + t] * kj[h * dh + t]).sum::<f64>() * scale).collect();
                    softmax(&s)
                })
                .collect()
        })
        .collect()
}

/// Scaled dot-product attention over already projected rows.
pub fn attend(q: &Mat, k: &Mat, v: &Mat, heads: usize) -> Mat {
    let dh = q[0].len() / heads;
    let w = attn_weights(q, k, heads);
    (0..q.len())
        .map(|i| {
            let mut out = vec![0.0; q[0].len()];
            for h in 0..heads {
                for (j, vj) in v.iter().enumerate() {
                    for t in 0..dh {
                        out[h * dh + t] += w[h][i][j] * vj[h * dh + t];
                    }
                }
            }
            out
        })
        .collect()
}

pub fn mha_cross(q: &Mat, kv: &Mat, a: &MultiHeadAttention) -> Mat {
    let o = attend(&linear(q, &a.wq), &linear(kv, &a.wk), &linear(kv, &a.wv), a.cfg.num_heads());
    linear(&o, &a.wo)
}

/// Random prompt-attention case: `(max |O_E - rows of full|, max |O_E - recomposition|, max |O_E - loop oracle|)`.
pub fn prompt_attention_case(seed: u64) -> (f64, f64, f64) {
    let mut r = rng(seed);
    let b = r.random_range(1..=4);
    let n = r.random_range(1..=32);
    let heads = [1, 2, 4][r.random_range(0..3)];
    let d = heads * r.random_range(1..=32 / heads);
    let kc = r.random_range(0..=4);
    let kl = r.random_range(if kc == 0 { 1 } else { 0 }..=4);
    let mut reg = Registry::new();
    let mut wr = seeded_rng(seed ^ 0xa5a5);
    let attn = MultiHeadAttention::new(&mut Builder::new(&mut reg, &mut wr, DType::F64).pp("attn"), AttentionConfig::new(d, heads).unwrap()).unwrap();
    let attn = MultiHeadAttention {
        wq: Linear { weight: randn(&mut r, &[d, d], 0.5), bias: randn(&mut r, &[d], 0.1) },
        wk: Linear { weight: randn(&mut r, &[d, d], 0.5), bias: randn(&mut r, &[d], 0.1) },
        ..attn
    };
    let e = randn(&mut r, &[b, n, d], 1.0);
    let control = (kc > 0).then(|| randn(&mut r, &[b, kc, d], 1.0));
    let learned = (kl > 0).then(|| randn(&mut r, &[kl, d], 1.0));
    let bundle = PromptBundle::new(control.clone(), learned.clone());
    let out = prompted_attention(&e, &bundle, &attn).unwrap();

    let full = rgbx_core::prompt::assemble_prompted_input(&e, &bundle).unwrap();
    let rows = attn.self_attend(&full).unwrap().narrow(1, 0, n).unwrap();
    let d_rows = max_diff_t(&out, &rows);

    let dec = decompose_attention(&e, &bundle, &attn).unwrap();
    let dh = d / heads;
    let ee = tensor4(&dec.a_ee);
    let em = tensor4(&dec.a_em);
    let fulls = mat3(&full);
    let outs = mat3(&out);
    let mut recomposed = Vec::new();
    let mut looped = Vec::new();
    for bi in 0..b {
        let v = linear(&fulls[bi], &attn.wv);
        let mut o = vec![vec![0.0; d]; n];
        for h in 0..heads {
            for i in 0..n {
                for t in 0..dh {
                    let c = h * dh + t;
                    let patch: f64 = (0..n).map(|j| ee[bi][h][i][j] * v[j][c]).sum();
                    let prompt: f64 = (0..bundle.len()).map(|k| em[bi][h][i][k] * v[n + k][c]).sum();
                    o[i][c] = patch + prompt;
                }
            }
        }
        recomposed.push(linear(&o, &attn.wo));
        looped.push(mha_cross(&fulls[bi][..n].to_vec(), &fulls[bi], &attn));
    }
    (d_rows, max_diff(&outs, &recomposed), max_diff(&outs, &looped))
}

pub fn tensor4(t: &Tensor) -> Vec<Vec<Mat>> {
    let (b, h, _, _) = t.dims4().unwrap();
    (0..b).map(|i| (0..h).map(|j| mat(&t.get(i).unwrap().get(j).unwrap())).collect()).collect()
}

/// Double-loop contrastive loss over `[S^r; S^m]` and `[S^t; S^t]` with index targets.
pub fn contrastive_oracle(t: &Mat, r: &Mat, m: &Mat, tau: f64) -> f64 {
    let b = t.len();
    let n = 2 * b;
    let img = |i: usize| if i < b { &r[i] } else { &m[i - b] };
    let txt = |j: usize| &t[j % b];
    let dot = |a: &Vec<f64>, c: &Vec<f64>| a.iter().zip(c).map(|(x, y)| x * y).sum::<f64>() / tau;
    let mut logits = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            logits[i][j] = dot(img(i), txt(j));
        }
    }
    let mut i2t = 0.0;
    let mut t2i = 0.0;
    for i in 0..n {
        let row_max = logits[i].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row_max + logits[i].iter().map(|x| (x - row_max).exp()).sum::<f64>().ln();
        i2t += logits[i][i] - lse;
        let col: Vec<f64> = (0..n).map(|k| logits[k][i]).collect();
        let col_max = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = col_max + col.iter().map(|x| (x - col_max).exp()).sum::<f64>().ln();
        t2i += logits[i][i] - lse;
    }
    -0.5 * (i2t + t2i) / n as f64
}

pub fn unit_rows(r: &mut ChaCha8Rng, b: usize, d: usize) -> Tensor {
    let t = randn(r, &[b, d], 1.0);
    rgbx_core::ops::l2_normalize(&t).unwrap()
}

/// Random contrastive case: `|loss - oracle|`.
pub fn contrastive_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let b = r.random_range(1..=8);
    let d = r.random_range(2..=16);
    let (t, s_r, s_m) = (unit_rows(&mut r, b, d), unit_rows(&mut r, b, d), unit_rows(&mut r, b, d));
    let tau = r.random_range(0.05..1.0);
    let loss = contrastive_loss(&t, &s_r, &s_m, &Tensor::new(tau, &Device::Cpu).unwrap(), ContrastiveTargets::Index)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    (loss - contrastive_oracle(&mat(&t), &mat(&s_r), &mat(&s_m), tau)).abs()
}

/// `b = 1`, `s_r = s_m`, duplicated caption: the loss must be `ln 2`.
pub fn contrastive_ln2_case(seed: u64) -> f64 {
    let mut r = rng(seed);
    let t = unit_rows(&mut r, 1, 8);
    let s = unit_rows(&mut r, 1, 8);
    let loss = contrastive_loss(&t, &s, &s, &Tensor::new(0.07f64, &Device::Cpu).unwrap(), ContrastiveTargets::Index)
        .unwrap()
        .to_scalar::<f64>()
        .unwrap();
    (loss - std::f64::consts::LN_2).abs()
}

pub fn dsrm_block(c: usize, n: usize, embed: usize, seed: u64) -> (DsrmBlock, Registry) {
    let mut reg = Registry::new();
    let mut r = seeded_rng(seed);
    let cfg = DsrmConfig { prompt_slots: 4, prompt_width: 3, channel_heads: 2, spatial_heads: 2, ..Default::default() };
    let blk = DsrmBlock::new(&mut Builder::new(&mut reg, &mut r, DType::F64).pp("dsrm"), &cfg, c, n, embed).unwrap();
    // unit-scale weights so every path carries a measurable gradient
    let mut wr = rng(seed ^ 0xd5);
    for name in reg.names().map(String::from).collect::<Vec<_>>() {
        let v = reg.get(&name).unwrap();
        if name.ends_with(".weight") && v.rank() == 2 {
            let fan_in = v.dims()[0] as f64;
            v.set(&randn(&mut wr, v.dims(), fan_in.powf(-0.5))).unwrap();
        }
    }
    (blk, reg)
}

pub struct DsrmOracle {
    pub indicator: Vec<f64>,
    pub selected: Mat,
    pub q_c: Mat,
    pub channel: Mat,
    pub q_s: Mat,
    pub out: Mat,
}

/// Default-variant refinement of one sample `f` (`C × N`) with embedding `s`.
pub fn dsrm_oracle(blk: &DsrmBlock, f: &Mat, s: &[f64]) -> DsrmOracle {
    let (c, n) = (f.len(), f[0].len());
    let pooled: Vec<f64> = f.iter().map(|row| row.iter().sum::<f64>() / n as f64).collect();
    let indicator = softmax(&mlp(&vec![pooled], blk.indicator.as_ref().unwrap())[0]);
    let u = mat(blk.universal.as_ref().unwrap());
    let dp = u[0].len() / c;
    let selected: Mat = (0..c).map(|ci| (0..dp).map(|j| (0..u.len()).map(|k| indicator[k] * u[k][ci * dp + j]).sum()).collect()).collect();
    let q_c = linear(&selected, blk.prompt_proj.as_ref().unwrap());
    let first = &blk.first;
    let channel = linear(&attend(&q_c, &linear(f, &first.wk), &linear(f, &first.wv), first.heads), &first.wo);
    let emb = mlp(&vec![s.to_vec()], &blk.embed_mlp).remove(0);
    let tokens: Mat = (0..n).map(|i| emb[i * c..(i + 1) * c].to_vec()).collect();
    let second = &blk.second;
    let q_s = linear(&tokens, second.wq.as_ref().unwrap());
    let kv = transpose(&channel);
    let mut out = linear(&attend(&q_s, &linear(&kv, &second.wk), &linear(&kv, &second.wv), second.heads), &second.wo);
    let ft = transpose(f);
    for (o, r) in out.iter_mut().zip(&ft) {
        for (x, y) in o.iter_mut().zip(r) {
            *x += y;
        }
    }
    DsrmOracle { indicator, selected, q_c, channel, q_s, out }
}
