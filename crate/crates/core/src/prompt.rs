//! Prompted attention: prompt rows are appended to the patch tokens, attention
//! runs over the concatenation, and only the patch-token outputs are kept.
//!
//! Queries are formed for the patch rows only, so the prompt outputs are never
//! computed. This is exactly the first `N` rows of full attention over
//! `[E; M]` because softmax rows are independent of each other.

use std::fmt;
use std::str::FromStr;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, MultiHeadAttention};
use crate::error::{validation, Error, Result};
use crate::nn::{Builder, Mlp};

/// Control prompts `C` (computed) followed by learned prompts `P`.
///
/// `control` is either `K_c × D` (shared across the batch) or `B × K_c × D`;
/// `learned` is `K_p × D` or `B × K_p × D`. Either may be absent.
#[derive(Clone, Debug, Default)]
pub struct PromptBundle {
    pub control: Option<Tensor>,
    pub learned: Option<Tensor>,
}

impl PromptBundle {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn new(control: Option<Tensor>, learned: Option<Tensor>) -> Self {
        Self { control, learned }
    }

    fn rows(t: &Option<Tensor>) -> usize {
        t.as_ref().map(|t| t.dims()[t.rank() - 2]).unwrap_or(0)
    }

    /// Total prompt rows `K = K_c + K_p`.
    pub fn len(&self) -> usize {
        Self::rows(&self.control) + Self::rows(&self.learned)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Prompt rows broadcast to `B × K × D`, or `None` when empty.
    pub fn batched(&self, batch: usize, width: usize) -> Result<Option<Tensor>> {
        let mut parts = Vec::new();
        for t in [&self.control, &self.learned].into_iter().flatten() {
            if t.rows_or_zero() == 0 {
                continue;
            }
            let d = *t.dims().last().unwrap();
            if d != width {
                return validation(format!("prompt width {d} does not match token width {width}"));
            }
            let b = match t.rank() {
                2 => t.unsqueeze(0)?.broadcast_as((batch, t.dims()[0], d))?,
                3 if t.dims()[0] == batch => t.clone(),
                _ => return validation(format!("prompt shape {:?} incompatible with batch {batch}", t.dims())),
            };
            parts.push(b);
        }
        if parts.is_empty() {
            return Ok(None);
        }
        Ok(Some(Tensor::cat(&parts, 1)?))
    }
}

trait RowsOrZero {
    fn rows_or_zero(&self) -> usize;
}

impl RowsOrZero for Tensor {
    fn rows_or_zero(&self) -> usize {
        if self.rank() < 2 {
            0
        } else {
            self.dims()[self.rank() - 2]
        }
    }
}

/// `[E; M]` as `B × (N + K) × D`; the first `N` rows are `e` unchanged.
pub fn assemble_prompted_input(e: &Tensor, bundle: &PromptBundle) -> Result<Tensor> {
    let (b, _, d) = e.dims3()?;
    match bundle.batched(b, d)? {
        None => Ok(e.clone()),
        Some(m) => Ok(Tensor::cat(&[e, &m.to_dtype(e.dtype())?], 1)?),
    }
}

/// The retained patch outputs `O_E` of attention over `[E; M]`.
pub fn prompted_attention(e: &Tensor, bundle: &PromptBundle, attn: &MultiHeadAttention) -> Result<Tensor> {
    if bundle.is_empty() {
        return attn.self_attend(e);
    }
    let full = assemble_prompted_input(e, bundle)?;
    let q = attn.wq.forward(e)?;
    let k = attn.wk.forward(&full)?;
    let v = attn.wv.forward(&full)?;
    let (out, _) = attend(&q, &k, &v, attn.cfg.num_heads())?;
    attn.wo.forward(&out)
}

/// The four blocks of the attention matrix over `[E; M]`, each `B × heads × rows × cols`.
#[derive(Clone, Debug)]
pub struct AttentionDecomposition {
    pub a_ee: Tensor,
    pub a_em: Tensor,
    pub a_me: Tensor,
    pub a_mm: Tensor,
}

impl AttentionDecomposition {
    /// Reassembles the full `(N + K) × (N + K)` matrix.
    pub fn reassemble(&self) -> Result<Tensor> {
        let top = Tensor::cat(&[&self.a_ee, &self.a_em], 3)?;
        let bottom = Tensor::cat(&[&self.a_me, &self.a_mm], 3)?;
        Ok(Tensor::cat(&[top, bottom], 2)?)
    }
}

pub fn decompose_attention(e: &Tensor, bundle: &PromptBundle, attn: &MultiHeadAttention) -> Result<AttentionDecomposition> {
    if bundle.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let n = e.dims3()?.1;
    let k = bundle.len();
    let full = assemble_prompted_input(e, bundle)?;
    let a = attn.weights(&full, &full)?;
    Ok(AttentionDecomposition {
        a_ee: a.narrow(2, 0, n)?.narrow(3, 0, n)?,
        a_em: a.narrow(2, 0, n)?.narrow(3, n, k)?,
        a_me: a.narrow(2, n, k)?.narrow(3, 0, n)?,
        a_mm: a.narrow(2, n, k)?.narrow(3, n, k)?,
    })
}

/// Which embedding each backbone branch derives its control prompts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptPairing {
    /// RGB branch ← `S^r`, modality branch ← `S^m`.
    Aligned,
    /// RGB branch ← `S^m`, modality branch ← `S^r`.
    CrossModal,
    /// Both branches ← `S^r`.
    RgbDominant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbeddingSource {
    Rgb,
    Modality,
}

impl PromptPairing {
    pub const ALL: [PromptPairing; 3] = [PromptPairing::Aligned, PromptPairing::CrossModal, PromptPairing::RgbDominant];

    /// `(source for the RGB branch, source for the modality branch)`.
    pub fn sources(self) -> (EmbeddingSource, EmbeddingSource) {
        use EmbeddingSource::*;
        match self {
            PromptPairing::Aligned => (Rgb, Modality),
            PromptPairing::CrossModal => (Modality, Rgb),
            PromptPairing::RgbDominant => (Rgb, Rgb),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PromptPairing::Aligned => "aligned",
            PromptPairing::CrossModal => "cross_modal",
            PromptPairing::RgbDominant => "rgb_dominant",
        }
    }
}

impl fmt::Display for PromptPairing {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptPairing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown pairing `{s}` (expected aligned, cross_modal or rgb_dominant)")))
    }
}

/// One two-layer MLP per backbone stage mapping an embedding to `K_c` prompt rows.
#[derive(Clone, Debug)]
pub struct ControlPromptGenerator {
    mlps: Vec<Mlp>,
    widths: Vec<usize>,
    rows: usize,
}

impl ControlPromptGenerator {
    pub fn new(b: &mut Builder, embed_dim: usize, stage_widths: &[usize], rows: usize) -> Result<Self> {
        let mut mlps = Vec::with_capacity(stage_widths.len());
        for (i, &w) in stage_widths.iter().enumerate() {
            mlps.push(Mlp::new(&mut b.pp(format!("stage{}", i + 1)), embed_dim, w, rows * w)?);
        }
        Ok(Self { mlps, widths: stage_widths.to_vec(), rows })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn num_stages(&self) -> usize {
        self.mlps.len()
    }

    pub fn mlp(&self, stage: usize) -> Result<&Mlp> {
        if stage == 0 || stage > self.mlps.len() {
            return validation(format!("unknown stage {stage}; stages are 1..={}", self.mlps.len()));
        }
        Ok(&self.mlps[stage - 1])
    }

    /// `s` is `B × D_clip` (or a single `D_clip` vector); returns `B × K_c × D_stage`.
    pub fn make_control_prompts(&self, s: &Tensor, stage: usize) -> Result<Tensor> {
        let mlp = self.mlp(stage)?;
        let s = if s.rank() == 1 { s.unsqueeze(0)? } else { s.clone() };
        let b = s.dims()[0];
        if self.rows == 0 {
            return Ok(Tensor::zeros((b, 0, self.widths[stage - 1]), s.dtype(), s.device())?);
        }
        Ok(mlp.forward(&s)?.reshape((b, self.rows, self.widths[stage - 1]))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionConfig;
    use crate::nn::{seeded_rng, Registry};
    use candle_core::{DType, Device, Var};

    fn attn(d: usize, h: usize, seed: u64) -> MultiHeadAttention {
        let mut reg = Registry::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut reg, &mut rng, DType::F64);
        MultiHeadAttention::new(&mut b, AttentionConfig::new(d, h).unwrap()).unwrap()
    }

    #[test]
    fn empty_bundle_leaves_input_unchanged() {
        let e = Tensor::randn(0f64, 1.0, (2, 3, 4), &Device::Cpu).unwrap();
        let out = assemble_prompted_input(&e, &PromptBundle::empty()).unwrap();
        assert_eq!(out.to_vec3::<f64>().unwrap(), e.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn prompt_row_is_broadcast_over_batch() {
        let e = Tensor::randn(0f64, 1.0, (3, 2, 4), &Device::Cpu).unwrap();
        let p = Tensor::new(&[[1.0f64, 2.0, 3.0, 4.0]], &Device::Cpu).unwrap();
        let out = assemble_prompted_input(&e, &PromptBundle::new(None, Some(p))).unwrap().to_vec3::<f64>().unwrap();
        for batch in &out {
            assert_eq!(batch.len(), 3);
            assert_eq!(batch[2], vec![1.0, 2.0, 3.0, 4.0]);
        }
        assert_eq!(out[1][..2], e.to_vec3::<f64>().unwrap()[1][..]);
    }

    #[test]
    fn width_mismatch_is_a_validation_error() {
        let e = Tensor::zeros((1, 2, 4), DType::F64, &Device::Cpu).unwrap();
        let p = Tensor::zeros((1, 5), DType::F64, &Device::Cpu).unwrap();
        let r = assemble_prompted_input(&e, &PromptBundle::new(Some(p), None));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn empty_bundle_is_bitwise_mhsa() {
        let a = attn(8, 2, 1);
        let e = Tensor::randn(0f64, 1.0, (2, 5, 8), &Device::Cpu).unwrap();
        let x = prompted_attention(&e, &PromptBundle::empty(), &a).unwrap();
        let y = a.self_attend(&e).unwrap();
        assert_eq!(x.to_vec3::<f64>().unwrap(), y.to_vec3::<f64>().unwrap());
    }

    #[test]
    fn decomposition_needs_prompts_and_rows_normalise() {
        let a = attn(8, 2, 2);
        let e = Tensor::randn(0f64, 1.0, (1, 1, 8), &Device::Cpu).unwrap();
        assert!(matches!(decompose_attention(&e, &PromptBundle::empty(), &a), Err(Error::EmptyPrompt)));
        let p = Tensor::randn(0f64, 1.0, (1, 8), &Device::Cpu).unwrap();
        let dec = decompose_attention(&e, &PromptBundle::new(Some(p), None), &a).unwrap();
        let ee = dec.a_ee.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let em = dec.a_em.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(ee.len(), 2);
        for (x, y) in ee.iter().zip(&em) {
            assert!((x + y - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn control_prompts_shapes_and_zero_init() {
        let mut reg = Registry::new();
        let mut rng = seeded_rng(0);
        let mut b = Builder::new(&mut reg, &mut rng, DType::F64);
        let mut gen = ControlPromptGenerator::new(&mut b, 16, &[8, 12, 16, 20], 2).unwrap();
        let s = Tensor::randn(0f64, 1.0, (3, 16), &Device::Cpu).unwrap();
        for (i, w) in [8, 12, 16, 20].iter().enumerate() {
            assert_eq!(gen.make_control_prompts(&s, i + 1).unwrap().dims(), &[3, 2, *w]);
        }
        assert!(matches!(gen.make_control_prompts(&s, 5), Err(Error::Validation(_))));
        assert!(gen.make_control_prompts(&s, 0).is_err());

        // zero weights, non-zero output bias: zero embedding yields the bias rows
        let mlp = &mut gen.mlps[0];
        mlp.fc1.weight = mlp.fc1.weight.zeros_like().unwrap();
        mlp.fc2.weight = mlp.fc2.weight.zeros_like().unwrap();
        mlp.fc2.bias = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap();
        let zero = Tensor::zeros((1, 16), DType::F64, &Device::Cpu).unwrap();
        let c = gen.make_control_prompts(&zero, 1).unwrap().to_vec3::<f64>().unwrap();
        assert_eq!(c[0][0], (0..8).map(|v| v as f64).collect::<Vec<_>>());
        assert_eq!(c[0][1], (8..16).map(|v| v as f64).collect::<Vec<_>>());
    }

    #[test]
    fn gradients_reach_learned_prompts_not_computed_controls() {
        let a = attn(8, 2, 3);
        let e = Tensor::randn(0f64, 1.0, (2, 4, 8), &Device::Cpu).unwrap();
        let control = Var::randn(0f64, 1.0, (2, 8), &Device::Cpu).unwrap();
        let learned = Var::randn(0f64, 1.0, (2, 8), &Device::Cpu).unwrap();
        let bundle = PromptBundle::new(Some(control.as_detached_tensor()), Some(learned.as_tensor().clone()));
        let loss = prompted_attention(&e, &bundle, &a).unwrap().sqr().unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        assert!(grads.get(control.as_tensor()).is_none());
        let g = grads.get(learned.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(g > 0.0);
    }

    #[test]
    fn pairing_parses_and_maps_sources() {
        assert_eq!("rgb_dominant".parse::<PromptPairing>().unwrap().sources(), (EmbeddingSource::Rgb, EmbeddingSource::Rgb));
        assert_eq!(PromptPairing::CrossModal.sources(), (EmbeddingSource::Modality, EmbeddingSource::Rgb));
        assert!("dominant".parse::<PromptPairing>().is_err());
    }
}
