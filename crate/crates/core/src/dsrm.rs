//! Domain-specific refinement of stage-4 features: channel attention queried by
//! a soft selection over learnable universal prompts, then spatial
//! cross-attention queried by the paired CLIP embedding.
//!
//! Features enter channels-major (`B × C × N`) and leave token-major
//! (`B × N × C`) with the input added back.

use std::fmt;
use std::str::FromStr;

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::attention::attend;
use crate::error::{config, validation, Error, Result};
use crate::nn::{Builder, Linear, Mlp};
use crate::ops;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AttentionKind {
    /// Channels are tokens, width `N`.
    Channel,
    /// Spatial positions are tokens, width `C`.
    Spatial,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptRole {
    Query,
    KeyValue,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptSource {
    Universal,
    Feature,
    Embedding,
}

/// Structure variants `a`..`i`; `h` is the default.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DsrmVariant {
    A,
    B,
    C,
    D,
    E,
    F,
    G,
    #[default]
    H,
    I,
}

impl DsrmVariant {
    pub const ALL: [DsrmVariant; 9] = [
        DsrmVariant::A,
        DsrmVariant::B,
        DsrmVariant::C,
        DsrmVariant::D,
        DsrmVariant::E,
        DsrmVariant::F,
        DsrmVariant::G,
        DsrmVariant::H,
        DsrmVariant::I,
    ];

    pub fn as_str(self) -> &'static str {
        ["a", "b", "c", "d", "e", "f", "g", "h", "i"][self as usize]
    }

    pub fn role(self) -> PromptRole {
        use DsrmVariant::*;
        match self {
            A | B | C | D => PromptRole::KeyValue,
            _ => PromptRole::Query,
        }
    }

    /// Attention kinds of the first and second module.
    pub fn order(self) -> (AttentionKind, AttentionKind) {
        use AttentionKind::*;
        use DsrmVariant::*;
        match self {
            A | E => (Spatial, Spatial),
            B | F => (Channel, Channel),
            C | G => (Spatial, Channel),
            D | H | I => (Channel, Spatial),
        }
    }

    /// Prompt feeding the first module.
    pub fn first_source(self) -> PromptSource {
        if self == DsrmVariant::I {
            PromptSource::Feature
        } else {
            PromptSource::Universal
        }
    }
}

impl fmt::Display for DsrmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DsrmVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown DSRM variant `{s}` (expected a..i)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DsrmConfig {
    pub variant: DsrmVariant,
    pub prompt_slots: usize,
    pub prompt_width: usize,
    pub channel_heads: usize,
    pub spatial_heads: usize,
    pub depth: usize,
    pub cosine_reweight: bool,
}

impl Default for DsrmConfig {
    fn default() -> Self {
        Self { variant: DsrmVariant::H, prompt_slots: 8, prompt_width: 16, channel_heads: 4, spatial_heads: 4, depth: 1, cosine_reweight: false }
    }
}

/// One attention module of the two-module refinement.
#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub kind: AttentionKind,
    pub role: PromptRole,
    pub source: PromptSource,
    pub wq: Option<Linear>,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
    cosine: bool,
}

impl AttentionUnit {
    fn new(b: &mut Builder, kind: AttentionKind, role: PromptRole, source: PromptSource, width: usize, heads: usize, cosine: bool) -> Result<Self> {
        if heads == 0 || width % heads != 0 {
            return config(format!("{heads} heads do not divide attention width {width}"));
        }
        // universal prompts arrive already projected when they form the query
        let wq = if role == PromptRole::Query && source == PromptSource::Universal { None } else { Some(Linear::new(&mut b.pp("q"), width, width)?) };
        Ok(Self {
            kind,
            role,
            source,
            wq,
            wk: Linear::new(&mut b.pp("k"), width, width)?,
            wv: Linear::new(&mut b.pp("v"), width, width)?,
            wo: Linear::new(&mut b.pp("o"), width, width)?,
            heads,
            cosine,
        })
    }

    fn query(&self, t: &Tensor) -> Result<Tensor> {
        match &self.wq {
            Some(l) => l.forward(t),
            None => Ok(t.clone()),
        }
    }

    /// `prompt` and `x` share the unit's token layout.
    pub fn forward(&self, prompt: &Tensor, x: &Tensor) -> Result<Tensor> {
        if prompt.dims() != x.dims() {
            return validation(format!("prompt {:?} and features {:?} differ in layout", prompt.dims(), x.dims()));
        }
        let (q_in, kv_in) = match self.role {
            PromptRole::Query => (prompt.clone(), x.clone()),
            PromptRole::KeyValue => (x.clone(), prompt.clone()),
        };
        let kv_in = if self.cosine { cosine_reweight(&kv_in, &q_in)? } else { kv_in };
        let q = self.query(&q_in)?;
        let (o, _) = attend(&q, &self.wk.forward(&kv_in)?, &self.wv.forward(&kv_in)?, self.heads)?;
        self.wo.forward(&o)
    }
}

/// Scales each token of `x` by its cosine similarity with the matching token of `reference`.
pub fn cosine_reweight(x: &Tensor, reference: &Tensor) -> Result<Tensor> {
    let cos = (ops::l2_normalize(x)? * ops::l2_normalize(reference)?)?.sum_keepdim(D::Minus1)?;
    Ok(x.broadcast_mul(&cos)?)
}

/// One refinement block (two attention modules).
#[derive(Clone, Debug)]
pub struct DsrmBlock {
    pub variant: DsrmVariant,
    channels: usize,
    tokens: usize,
    pub universal: Option<Tensor>,
    pub indicator: Option<Mlp>,
    pub prompt_proj: Option<Linear>,
    pub embed_mlp: Mlp,
    pub first: AttentionUnit,
    pub second: AttentionUnit,
    prompt_width: usize,
}

fn width_of(kind: AttentionKind, channels: usize, tokens: usize) -> usize {
    match kind {
        AttentionKind::Channel => tokens,
        AttentionKind::Spatial => channels,
    }
}

impl DsrmBlock {
    pub fn new(b: &mut Builder, cfg: &DsrmConfig, channels: usize, tokens: usize, embed_dim: usize) -> Result<Self> {
        if cfg.prompt_slots == 0 || cfg.prompt_width == 0 {
            return config("DSRM needs at least one prompt slot of nonzero width");
        }
        let v = cfg.variant;
        let (k1, k2) = v.order();
        let heads = |k| match k {
            AttentionKind::Channel => cfg.channel_heads,
            AttentionKind::Spatial => cfg.spatial_heads,
        };
        let uses_u = v.first_source() == PromptSource::Universal;
        let (universal, indicator, prompt_proj) = if uses_u {
            (
                Some(b.trunc_normal("universal", &[cfg.prompt_slots, channels * cfg.prompt_width], 1.0)?),
                Some(Mlp::new(&mut b.pp("indicator"), channels, channels, cfg.prompt_slots)?),
                Some(Linear::new(&mut b.pp("prompt_proj"), cfg.prompt_width, tokens)?),
            )
        } else {
            (None, None, None)
        };
        let first = AttentionUnit::new(&mut b.pp("first"), k1, v.role(), v.first_source(), width_of(k1, channels, tokens), heads(k1), cfg.cosine_reweight)?;
        let second = AttentionUnit::new(&mut b.pp("second"), k2, v.role(), PromptSource::Embedding, width_of(k2, channels, tokens), heads(k2), cfg.cosine_reweight)?;
        Ok(Self {
            variant: v,
            channels,
            tokens,
            universal,
            indicator,
            prompt_proj,
            embed_mlp: Mlp::new(&mut b.pp("embed_mlp"), embed_dim, embed_dim, tokens * channels)?,
            first,
            second,
            prompt_width: cfg.prompt_width,
        })
    }

    fn check_feature(&self, f: &Tensor) -> Result<(usize, usize, usize)> {
        let (b, c, n) = f.dims3()?;
        if c != self.channels || n != self.tokens {
            return config(format!("DSRM configured for C={}, N={}, got {c}×{n}", self.channels, self.tokens));
        }
        Ok((b, c, n))
    }

    /// `softmax(MLP(GAP_N(f)))`, `B × K_u`.
    pub fn soft_indicator(&self, f: &Tensor) -> Result<Tensor> {
        self.check_feature(f)?;
        let mlp = self.indicator.as_ref().ok_or_else(|| Error::Config(format!("variant {} has no universal prompt", self.variant)))?;
        Ok(ops::softmax_last_dim(&mlp.forward(&f.mean(2)?)?)?)
    }

    /// Soft-selected universal prompt, `B × C × d_p`.
    pub fn selected_prompt(&self, f: &Tensor) -> Result<Tensor> {
        let (b, c, _) = self.check_feature(f)?;
        let u = self.universal.as_ref().ok_or_else(|| Error::Config(format!("variant {} has no universal prompt", self.variant)))?;
        Ok(self.soft_indicator(f)?.matmul(u)?.reshape((b, c, self.prompt_width))?)
    }

    /// `Q_c`, `B × C × N`.
    pub fn channel_query(&self, f: &Tensor) -> Result<Tensor> {
        let proj = self.prompt_proj.as_ref().ok_or_else(|| Error::Config(format!("variant {} has no universal prompt", self.variant)))?;
        proj.forward(&self.selected_prompt(f)?)
    }

    /// `MHSA(Q_c, W^K_c F, W^V_c F)` with channels as tokens.
    pub fn channel_attention(&self, q_c: &Tensor, f: &Tensor) -> Result<Tensor> {
        self.check_feature(f)?;
        if self.first.kind != AttentionKind::Channel {
            return config(format!("variant {} does not start with channel attention", self.variant));
        }
        self.first.forward(q_c, f)
    }

    fn embedding_tokens(&self, s: &Tensor, kind: AttentionKind) -> Result<Tensor> {
        let s = if s.rank() == 1 { s.unsqueeze(0)? } else { s.clone() };
        let b = s.dims()[0];
        let y = self.embed_mlp.forward(&s)?;
        Ok(match kind {
            AttentionKind::Spatial => y.reshape((b, self.tokens, self.channels))?,
            AttentionKind::Channel => y.reshape((b, self.channels, self.tokens))?,
        })
    }

    /// `Q_s = W^Q_s · Reshape(MLP(s))`, `B × N × C`.
    pub fn spatial_query(&self, s: &Tensor) -> Result<Tensor> {
        if self.second.kind != AttentionKind::Spatial {
            return config(format!("variant {} does not end with spatial attention", self.variant));
        }
        self.second.query(&self.embedding_tokens(s, AttentionKind::Spatial)?)
    }

    /// `MHCA(Q_s, W^K_s F_cᵀ, W^V_s F_cᵀ) + inputᵀ`, `B × N × C`.
    pub fn spatial_cross_attention(&self, q_s: &Tensor, f_c: &Tensor, input: &Tensor) -> Result<Tensor> {
        if self.second.kind != AttentionKind::Spatial || self.second.role != PromptRole::Query {
            return config(format!("variant {} has no query-side spatial attention", self.variant));
        }
        let kv = f_c.transpose(1, 2)?;
        let (o, _) = attend(q_s, &self.second.wk.forward(&kv)?, &self.second.wv.forward(&kv)?, self.second.heads)?;
        Ok((self.second.wo.forward(&o)? + input.transpose(1, 2)?)?)
    }

    fn layout(t: &Tensor, from: AttentionKind, to: AttentionKind) -> Result<Tensor> {
        Ok(if from == to { t.clone() } else { t.transpose(1, 2)? })
    }

    fn prompt_for(&self, unit: &AttentionUnit, f: &Tensor, s: &Tensor) -> Result<Tensor> {
        match unit.source {
            PromptSource::Universal => Self::layout(&self.channel_query(f)?, AttentionKind::Channel, unit.kind),
            PromptSource::Feature => Self::layout(f, AttentionKind::Channel, unit.kind),
            PromptSource::Embedding => self.embedding_tokens(s, unit.kind),
        }
    }

    /// `f` is `B × C × N`, `s` is `B × D_clip`; returns `B × N × C`.
    pub fn forward(&self, f: &Tensor, s: &Tensor, trace: &mut Vec<&'static str>) -> Result<Tensor> {
        let (b, _, _) = self.check_feature(f)?;
        if s.rank() != 2 || s.dims()[0] != b {
            return validation(format!("embedding batch {:?} does not match features batch {b}", s.dims()));
        }
        if self.first.source == PromptSource::Universal {
            trace.push("soft_indicator");
        }
        let p1 = self.prompt_for(&self.first, f, s)?;
        let x1 = Self::layout(f, AttentionKind::Channel, self.first.kind)?;
        let y1 = self.first.forward(&p1, &x1)?;
        trace.push(stage_name(self.first.kind));
        let p2 = self.prompt_for(&self.second, f, s)?;
        let x2 = Self::layout(&y1, self.first.kind, self.second.kind)?;
        let y2 = self.second.forward(&p2, &x2)?;
        trace.push(stage_name(self.second.kind));
        let y2 = Self::layout(&y2, self.second.kind, AttentionKind::Spatial)?;
        trace.push("residual");
        Ok((y2 + f.transpose(1, 2)?)?)
    }
}

fn stage_name(kind: AttentionKind) -> &'static str {
    match kind {
        AttentionKind::Channel => "channel_attention",
        AttentionKind::Spatial => "spatial_attention",
    }
}

/// One shared parameter set (optionally stacked) applied to every branch.
#[derive(Clone, Debug)]
pub struct Dsrm {
    pub blocks: Vec<DsrmBlock>,
}

impl Dsrm {
    pub fn new(b: &mut Builder, cfg: &DsrmConfig, channels: usize, tokens: usize, embed_dim: usize) -> Result<Self> {
        if cfg.depth == 0 {
            return config("DSRM depth must be at least 1");
        }
        let blocks = (0..cfg.depth)
            .map(|i| DsrmBlock::new(&mut b.pp(format!("block{i}")), cfg, channels, tokens, embed_dim))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn variant(&self) -> DsrmVariant {
        self.blocks[0].variant
    }

    pub fn forward_traced(&self, f: &Tensor, s: &Tensor) -> Result<(Tensor, Vec<&'static str>)> {
        let mut trace = Vec::new();
        let mut x = f.clone();
        let mut out = None;
        for blk in &self.blocks {
            let y = blk.forward(&x, s, &mut trace)?;
            x = y.transpose(1, 2)?.contiguous()?;
            out = Some(y);
        }
        Ok((out.unwrap(), trace))
    }

    pub fn forward(&self, f: &Tensor, s: &Tensor) -> Result<Tensor> {
        Ok(self.forward_traced(f, s)?.0)
    }

    /// Both branches through the same weights; returns `(F_s^r, F_s^m)`.
    pub fn forward_pair(&self, f4_r: &Tensor, f4_m: &Tensor, s_r: &Tensor, s_m: &Tensor) -> Result<(Tensor, Tensor)> {
        if f4_r.dims() != f4_m.dims() {
            return validation("both DSRM branches must be present with equal shapes");
        }
        let b = f4_r.dims()[0];
        let y = self.forward(&Tensor::cat(&[f4_r, f4_m], 0)?, &Tensor::cat(&[s_r, s_m], 0)?)?;
        Ok((y.narrow(0, 0, b)?, y.narrow(0, b, b)?))
    }
}
