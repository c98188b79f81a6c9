//! Dual-branch four-stage segmentation network.
//!
//! Both branches run through the same transformer blocks (batched together).
//! Every block injects control prompts derived from a CLIP embedding and
//! learned per-branch prompts. Branch features are fused per stage by gated
//! rectification plus cross-attention; stage 4 is refined by the DSRM first.
//! An MLP head merges the fused pyramid and is upsampled to the input size.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, MultiHeadAttention};
use crate::dsrm::{Dsrm, DsrmConfig};
use crate::error::{config, validation, Result};
use crate::maclip::patchify;
use crate::nn::{seeded_rng, token_resize_matrix, Builder, LayerNorm, Linear, Mlp, Registry, INIT_STD};
use crate::ops;
use crate::prompt::{prompted_attention, ControlPromptGenerator, EmbeddingSource, PromptBundle, PromptPairing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegConfig {
    pub image_size: usize,
    pub patch: usize,
    pub widths: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    /// Token-grid side per stage.
    pub sides: [usize; 4],
    pub mlp_ratio: usize,
    pub control_prompts: usize,
    pub learned_prompts: usize,
    pub pairing: PromptPairing,
    pub dsrm_pairing: PromptPairing,
    pub use_dsrm: bool,
    pub head_width: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub dsrm: DsrmConfig,
}

impl Default for SegConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 4,
            widths: [32, 64, 128, 160],
            depths: [1, 1, 2, 1],
            heads: [1, 2, 4, 5],
            sides: [16, 12, 10, 8],
            mlp_ratio: 4,
            control_prompts: 4,
            learned_prompts: 4,
            pairing: PromptPairing::RgbDominant,
            dsrm_pairing: PromptPairing::Aligned,
            use_dsrm: true,
            head_width: 64,
            embed_dim: 128,
            num_classes: 13,
            dsrm: DsrmConfig::default(),
        }
    }
}

impl SegConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % self.patch != 0 || self.image_size / self.patch != self.sides[0] {
            return config(format!("stage-1 side {} must equal image_size / patch = {}", self.sides[0], self.image_size / self.patch.max(1)));
        }
        for i in 1..4 {
            if self.widths[i] < self.widths[i - 1] {
                return config("stage widths must be nondecreasing");
            }
            if self.sides[i] >= self.sides[i - 1] {
                return config("stage token grids must shrink strictly");
            }
        }
        for i in 0..4 {
            if self.depths[i] == 0 {
                return config(format!("stage {} has no blocks", i + 1));
            }
            AttentionConfig::new(self.widths[i], self.heads[i])?;
        }
        if self.num_classes == 0 {
            return config("num_classes must be positive");
        }
        Ok(())
    }

    /// Stage-4 token count `N`.
    pub fn stage4_tokens(&self) -> usize {
        self.sides[3] * self.sides[3]
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

impl Block {
    fn forward(&self, x: &Tensor, bundle: &PromptBundle) -> Result<Tensor> {
        let x = (x + prompted_attention(&self.ln1.forward(x)?, bundle, &self.attn)?)?;
        Ok((&x + self.mlp.forward(&self.ln2.forward(&x)?)?)?)
    }
}

#[derive(Clone, Debug)]
struct Stage {
    /// Token-grid resize from the previous stage (absent for stage 1).
    resize: Option<Tensor>,
    embed: Linear,
    pos: Tensor,
    blocks: Vec<Block>,
    norm: LayerNorm,
}

/// Channel and spatial gates exchanged between branches, then a shared
/// cross-attention and a merge.
#[derive(Clone, Debug)]
pub struct FuseModule {
    pub channel_gate: Mlp,
    pub spatial_gate: Linear,
    pub ln: LayerNorm,
    pub cross: MultiHeadAttention,
    pub merge: Linear,
}

/// Gate values for one fusion: `(channel_r, channel_m, spatial_r, spatial_m)`,
/// channel gates `B × 1 × D`, spatial gates `B × N × 1`.
pub type Gates = (Tensor, Tensor, Tensor, Tensor);

impl FuseModule {
    fn new(b: &mut Builder, width: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            channel_gate: Mlp::new(&mut b.pp("channel_gate"), 2 * width, width, 2 * width)?,
            spatial_gate: Linear::new(&mut b.pp("spatial_gate"), 2 * width, 2)?,
            ln: LayerNorm::new(&mut b.pp("ln"), width)?,
            cross: MultiHeadAttention::new(&mut b.pp("cross"), AttentionConfig::new(width, heads)?)?,
            merge: Linear::new(&mut b.pp("merge"), 2 * width, width)?,
        })
    }

    pub fn gates(&self, r: &Tensor, m: &Tensor) -> Result<Gates> {
        let d = r.dims3()?.2;
        let pooled = Tensor::cat(&[r.mean_keepdim(1)?, m.mean_keepdim(1)?], 2)?;
        let gc = candle_nn::ops::sigmoid(&self.channel_gate.forward(&pooled)?)?;
        let gs = candle_nn::ops::sigmoid(&self.spatial_gate.forward(&Tensor::cat(&[r, m], 2)?)?)?;
        Ok((gc.narrow(2, 0, d)?, gc.narrow(2, d, d)?, gs.narrow(2, 0, 1)?, gs.narrow(2, 1, 1)?))
    }

    /// Rectified pair `(r', m')`.
    pub fn rectify(&self, r: &Tensor, m: &Tensor, gates: &Gates) -> Result<(Tensor, Tensor)> {
        let (gc_r, gc_m, gs_r, gs_m) = gates;
        let from_m = (m.broadcast_mul(gc_m)? + m.broadcast_mul(gs_m)?)?;
        let from_r = (r.broadcast_mul(gc_r)? + r.broadcast_mul(gs_r)?)?;
        Ok(((r + from_m)?, (m + from_r)?))
    }

    pub fn fuse_with(&self, r: &Tensor, m: &Tensor, gates: &Gates) -> Result<Tensor> {
        if r.dims() != m.dims() {
            return validation(format!("fusion branches differ: {:?} vs {:?}", r.dims(), m.dims()));
        }
        let (r2, m2) = self.rectify(r, m, gates)?;
        let (nr, nm) = (self.ln.forward(&r2)?, self.ln.forward(&m2)?);
        let y_r = (&r2 + self.cross.cross_attend(&nr, &nm)?)?;
        let y_m = (&m2 + self.cross.cross_attend(&nm, &nr)?)?;
        let avg = ((&y_r + &y_m)? * 0.5)?;
        Ok((avg + self.merge.forward(&Tensor::cat(&[&y_r, &y_m], 2)?)?)?)
    }

    /// Token-major `B × N × D` branches to one fused map.
    pub fn fuse(&self, r: &Tensor, m: &Tensor) -> Result<Tensor> {
        if r.dims() != m.dims() {
            return validation(format!("fusion branches differ: {:?} vs {:?}", r.dims(), m.dims()));
        }
        let g = self.gates(r, m)?;
        self.fuse_with(r, m, &g)
    }
}

#[derive(Clone, Debug)]
pub struct SegHead {
    proj: Vec<Linear>,
    /// Per-stage resize to the stage-1 grid (`None` for stage 1).
    up: Vec<Option<Tensor>>,
    fuse: Linear,
    classify: Linear,
    /// Stage-1 grid to full resolution, `(H·W) × N_1`.
    to_pixels: Tensor,
    out_side: usize,
}

impl SegHead {
    fn new(b: &mut Builder, cfg: &SegConfig) -> Result<Self> {
        let mut proj = Vec::new();
        let mut up = Vec::new();
        for i in 0..4 {
            proj.push(Linear::new(&mut b.pp(format!("proj{}", i + 1)), cfg.widths[i], cfg.head_width)?);
            up.push(if i == 0 { None } else { Some(token_resize_matrix(cfg.sides[i], cfg.sides[0], b.dtype())?) });
        }
        Ok(Self {
            proj,
            up,
            fuse: Linear::new(&mut b.pp("fuse"), 4 * cfg.head_width, cfg.head_width)?,
            classify: Linear::new(&mut b.pp("classify"), cfg.head_width, cfg.num_classes)?,
            to_pixels: token_resize_matrix(cfg.sides[0], cfg.image_size, b.dtype())?,
            out_side: cfg.image_size,
        })
    }

    /// Pyramid of token-major maps to `B × K × H × W` logits.
    pub fn forward(&self, pyramid: &[Tensor]) -> Result<Tensor> {
        if pyramid.len() != 4 {
            return validation(format!("segmentation head needs 4 stage maps, got {}", pyramid.len()));
        }
        let mut parts = Vec::with_capacity(4);
        for (i, f) in pyramid.iter().enumerate() {
            let p = self.proj[i].forward(f)?;
            parts.push(match &self.up[i] {
                Some(r) => r.broadcast_matmul(&p)?,
                None => p,
            });
        }
        let fused = ops::gelu(&self.fuse.forward(&Tensor::cat(&parts, 2)?)?)?;
        let logits = self.classify.forward(&fused)?; // B × N1 × K
        let (b, _, k) = logits.dims3()?;
        let pix = logits.transpose(1, 2)?.contiguous()?.reshape((b * k, ()))?.matmul(&self.to_pixels.t()?)?;
        Ok(pix.reshape((b, k, self.out_side, self.out_side))?)
    }
}

/// Intermediate results of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub logits: Tensor,
    /// Fused token-major stage maps `B × N_i × D_i`.
    pub pyramid: Vec<Tensor>,
    /// Per-stage branch features before fusion (stage 4 after refinement).
    pub branch_r: Vec<Tensor>,
    pub branch_m: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub cfg: SegConfig,
    stages: Vec<Stage>,
    pub prompts: ControlPromptGenerator,
    /// Learned prompts per stage: `(rgb, modality)`, each `K_p × D_i`.
    pub learned: Vec<(Tensor, Tensor)>,
    pub fusers: Vec<FuseModule>,
    pub dsrm: Option<Dsrm>,
    pub head: SegHead,
}

fn pick<'a>(src: EmbeddingSource, s_r: &'a Tensor, s_m: &'a Tensor) -> &'a Tensor {
    match src {
        EmbeddingSource::Rgb => s_r,
        EmbeddingSource::Modality => s_m,
    }
}

impl SegModel {
    pub fn new(cfg: &SegConfig, seed: u64, dtype: DType) -> Result<(Self, Registry)> {
        cfg.validate()?;
        let mut reg = Registry::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut reg, &mut rng, dtype);
        let mut stages = Vec::new();
        for i in 0..4 {
            let mut sb = b.pp(format!("stage{}", i + 1));
            let (in_dim, resize) = if i == 0 {
                (3 * cfg.patch * cfg.patch, None)
            } else {
                (cfg.widths[i - 1], Some(token_resize_matrix(cfg.sides[i - 1], cfg.sides[i], dtype)?))
            };
            let acfg = AttentionConfig::new(cfg.widths[i], cfg.heads[i])?;
            let w = cfg.widths[i];
            let blocks = (0..cfg.depths[i])
                .map(|j| {
                    let mut bb = sb.pp(format!("block{j}"));
                    Ok(Block {
                        ln1: LayerNorm::new(&mut bb.pp("ln1"), w)?,
                        attn: MultiHeadAttention::new(&mut bb.pp("attn"), acfg)?,
                        ln2: LayerNorm::new(&mut bb.pp("ln2"), w)?,
                        mlp: Mlp::new(&mut bb.pp("mlp"), w, w * cfg.mlp_ratio, w)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(Stage {
                resize,
                embed: Linear::new(&mut sb.pp("embed"), in_dim, w)?,
                pos: sb.trunc_normal("pos", &[cfg.sides[i] * cfg.sides[i], w], INIT_STD)?,
                blocks,
                norm: LayerNorm::new(&mut sb.pp("norm"), w)?,
            });
        }
        let prompts = ControlPromptGenerator::new(&mut b.pp("prompts.control"), cfg.embed_dim, &cfg.widths, cfg.control_prompts)?;
        let mut learned = Vec::new();
        for i in 0..4 {
            let mut lb = b.pp(format!("prompts.learned.stage{}", i + 1));
            learned.push((
                lb.trunc_normal("rgb", &[cfg.learned_prompts, cfg.widths[i]], INIT_STD)?,
                lb.trunc_normal("modality", &[cfg.learned_prompts, cfg.widths[i]], INIT_STD)?,
            ));
        }
        let fusers = (0..4)
            .map(|i| FuseModule::new(&mut b.pp(format!("fuse{}", i + 1)), cfg.widths[i], cfg.heads[i]))
            .collect::<Result<Vec<_>>>()?;
        let dsrm = if cfg.use_dsrm { Some(Dsrm::new(&mut b.pp("dsrm"), &cfg.dsrm, cfg.widths[3], cfg.stage4_tokens(), cfg.embed_dim)?) } else { None };
        let head = SegHead::new(&mut b.pp("head"), cfg)?;
        Ok((Self { cfg: cfg.clone(), stages, prompts, learned, fusers, dsrm, head }, reg))
    }

    /// Bundles for the batched `[rgb; modality]` input of one stage.
    fn bundle(&self, stage: usize, s_r: &Tensor, s_m: &Tensor, batch: usize) -> Result<PromptBundle> {
        let (src_r, src_m) = self.cfg.pairing.sources();
        let control = if self.cfg.control_prompts > 0 {
            let c_r = self.prompts.make_control_prompts(pick(src_r, s_r, s_m), stage + 1)?;
            let c_m = self.prompts.make_control_prompts(pick(src_m, s_r, s_m), stage + 1)?;
            Some(Tensor::cat(&[c_r, c_m], 0)?)
        } else {
            None
        };
        let learned = if self.cfg.learned_prompts > 0 {
            let (p_r, p_m) = &self.learned[stage];
            let (k, d) = p_r.dims2()?;
            let p_r = p_r.unsqueeze(0)?.broadcast_as((batch, k, d))?;
            let p_m = p_m.unsqueeze(0)?.broadcast_as((batch, k, d))?;
            Some(Tensor::cat(&[p_r, p_m], 0)?)
        } else {
            None
        };
        Ok(PromptBundle::new(control, learned))
    }

    /// Runs the shared blocks of `stage` (0-based) on already-embedded tokens
    /// of both branches. Inputs are `B × N × D`.
    pub fn stage_forward(&self, e_r: &Tensor, e_m: &Tensor, bundle_r: &PromptBundle, bundle_m: &PromptBundle, stage: usize) -> Result<(Tensor, Tensor)> {
        if e_r.dims() != e_m.dims() {
            return validation(format!("branch inputs differ: {:?} vs {:?}", e_r.dims(), e_m.dims()));
        }
        let st = self.stages.get(stage).ok_or_else(|| crate::Error::Validation(format!("no stage {stage}")))?;
        let mut r = e_r.clone();
        let mut m = e_m.clone();
        for blk in &st.blocks {
            r = blk.forward(&r, bundle_r)?;
            m = blk.forward(&m, bundle_m)?;
        }
        Ok((st.norm.forward(&r)?, st.norm.forward(&m)?))
    }

    fn embed(&self, stage: usize, x: &Tensor) -> Result<Tensor> {
        let st = &self.stages[stage];
        let x = match &st.resize {
            None => patchify(x, self.cfg.patch)?,
            Some(r) => r.broadcast_matmul(x)?,
        };
        Ok(st.embed.forward(&x)?.broadcast_add(&st.pos)?)
    }

    /// `rgb` and `x` are `B × 3 × H × W`; `s_r`, `s_m` are `B × D_clip`.
    pub fn forward_detailed(&self, rgb: &Tensor, x: &Tensor, s_r: &Tensor, s_m: &Tensor) -> Result<ForwardOutput> {
        if rgb.dims() != x.dims() {
            return validation(format!("RGB {:?} and modality {:?} inputs differ", rgb.dims(), x.dims()));
        }
        let (b, c, h, w) = rgb.dims4()?;
        if c != 3 || h != self.cfg.image_size || w != self.cfg.image_size {
            return validation(format!("expected B×3×{s}×{s} inputs, got {:?}", rgb.dims(), s = self.cfg.image_size));
        }
        if s_r.dims() != [b, self.cfg.embed_dim] || s_m.dims() != [b, self.cfg.embed_dim] {
            return validation(format!("embeddings must be {b}×{}", self.cfg.embed_dim));
        }
        let mut tokens = Tensor::cat(&[rgb, x], 0)?;
        let mut pyramid = Vec::with_capacity(4);
        let mut branch_r = Vec::with_capacity(4);
        let mut branch_m = Vec::with_capacity(4);
        for i in 0..4 {
            let mut t = self.embed(i, &tokens)?;
            let bundle = self.bundle(i, s_r, s_m, b)?;
            for blk in &self.stages[i].blocks {
                t = blk.forward(&t, &bundle)?;
            }
            t = self.stages[i].norm.forward(&t)?;
            tokens = t.clone();
            let (mut r, mut m) = (t.narrow(0, 0, b)?, t.narrow(0, b, b)?);
            if i == 3 {
                if let Some(d) = &self.dsrm {
                    let (src_r, src_m) = self.cfg.dsrm_pairing.sources();
                    let f = t.transpose(1, 2)?.contiguous()?;
                    let s = Tensor::cat(&[pick(src_r, s_r, s_m), pick(src_m, s_r, s_m)], 0)?;
                    let y = d.forward(&f, &s)?;
                    r = y.narrow(0, 0, b)?;
                    m = y.narrow(0, b, b)?;
                }
            }
            pyramid.push(self.fusers[i].fuse(&r, &m)?);
            branch_r.push(r);
            branch_m.push(m);
        }
        let logits = self.head.forward(&pyramid)?;
        Ok(ForwardOutput { logits, pyramid, branch_r, branch_m })
    }

    pub fn dtype(&self) -> DType {
        self.head.to_pixels.dtype()
    }

    pub fn forward(&self, rgb: &Tensor, x: &Tensor, s_r: &Tensor, s_m: &Tensor) -> Result<Tensor> {
        Ok(self.forward_detailed(rgb, x, s_r, s_m)?.logits)
    }

    /// Public bundle constructor for a single branch, used by tests.
    pub fn branch_bundle(&self, stage: usize, s: &Tensor, modality_branch: bool) -> Result<PromptBundle> {
        let c = if self.cfg.control_prompts > 0 { Some(self.prompts.make_control_prompts(s, stage + 1)?) } else { None };
        let (p_r, p_m) = &self.learned[stage];
        let p = if self.cfg.learned_prompts > 0 { Some(if modality_branch { p_m.clone() } else { p_r.clone() }) } else { None };
        Ok(PromptBundle::new(c, p))
    }
}

/// Names of transformer-stage parameters that mention a branch; empty when
/// every stage is fully shared.
pub fn branch_specific_stage_params(reg: &Registry) -> Vec<String> {
    reg.names()
        .filter(|n| n.starts_with("stage") && (n.contains("rgb") || n.contains("modality") || n.contains("branch")))
        .map(str::to_string)
        .collect()
}

/// Token-major `B × N × D` on a square grid to `B × D × H × W`.
pub fn to_spatial(t: &Tensor) -> Result<Tensor> {
    let (b, n, d) = t.dims3()?;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n {
        return validation(format!("{n} tokens do not form a square grid"));
    }
    Ok(t.transpose(1, 2)?.reshape((b, d, side, side))?)
}
