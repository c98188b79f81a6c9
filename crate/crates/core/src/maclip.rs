//! Modality-aware CLIP: a frozen dual encoder whose image tower is adapted per
//! modality by a pool of low-rank adapters, trained with a contrastive loss in
//! which every caption embedding is used twice (once against the RGB image and
//! once against the paired modality image).

use std::collections::BTreeMap;

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::attention::{attend, AttentionConfig, MultiHeadAttention};
use crate::error::{config, validation, Error, Result};
use crate::modality::Modality;
use crate::nn::{seeded_rng, Builder, LayerNorm, Linear, Mlp, Registry, INIT_STD};
use crate::ops;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaClipConfig {
    pub image_size: usize,
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub text_width: usize,
    pub embed_dim: usize,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub temperature: f64,
}

impl Default for MaClipConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch: 8,
            width: 128,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            text_width: 128,
            embed_dim: 128,
            lora_rank: 4,
            lora_alpha: 8.0,
            temperature: 0.07,
        }
    }
}

pub const TEMPERATURE_RANGE: (f64, f64) = (1e-3, 1.0);

/// Low-rank update `(α/r) · up · down` added to a frozen projection.
#[derive(Clone, Debug)]
pub struct LoraModule {
    /// `r × d_in`
    pub down: Tensor,
    /// `d_out × r`, zero at initialisation.
    pub up: Tensor,
    rank: usize,
    alpha: f64,
}

impl LoraModule {
    pub fn new(b: &mut Builder, d_in: usize, d_out: usize, rank: usize, alpha: f64) -> Result<Self> {
        if rank == 0 || rank > d_in.min(d_out) {
            return config(format!("LoRA rank {rank} must be in 1..={}", d_in.min(d_out)));
        }
        Ok(Self {
            down: b.uniform("down", &[rank, d_in], 1.0 / (d_in as f64).sqrt())?,
            up: b.zeros("up", &[d_out, rank])?,
            rank,
            alpha,
        })
    }

    /// Wraps existing tensors, validating their shapes.
    pub fn from_parts(down: Tensor, up: Tensor, alpha: f64) -> Result<Self> {
        let (rank, d_in) = down.dims2()?;
        let (d_out, r2) = up.dims2()?;
        if r2 != rank {
            return validation(format!("LoRA factors disagree on rank: {rank} vs {r2}"));
        }
        if rank == 0 || rank > d_in.min(d_out) {
            return config(format!("LoRA rank {rank} must be in 1..={}", d_in.min(d_out)));
        }
        Ok(Self { down, up, rank, alpha })
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// `(α/r) · x · downᵀ · upᵀ` for row vectors `x`.
    pub fn delta(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().unwrap();
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let y = x.reshape((rows, d_in))?.matmul(&self.down.t()?)?.matmul(&self.up.t()?)?;
        let mut out = dims;
        *out.last_mut().unwrap() = self.up.dims()[0];
        Ok((y.reshape(out)? * self.scale())?)
    }

    /// The materialised update in `x · W` orientation (`d_in × d_out`).
    pub fn dense_delta(&self) -> Result<Tensor> {
        Ok((self.down.t()?.matmul(&self.up.t()?)? * self.scale())?)
    }
}

/// Frozen projection plus adapter.
pub fn lora_forward(frozen: &Linear, lora: &LoraModule, x: &Tensor) -> Result<Tensor> {
    if lora.down.dims()[1] != frozen.in_dim() || lora.up.dims()[0] != frozen.out_dim() {
        return validation("LoRA factors do not match the frozen projection");
    }
    Ok((frozen.forward(x)? + lora.delta(x)?)?)
}

/// Adapters for the query and value projections of one encoder block.
#[derive(Clone, Debug)]
pub struct BlockAdapters {
    pub q: LoraModule,
    pub v: LoraModule,
}

/// One adapter set per image-tower block.
#[derive(Clone, Debug)]
pub struct LoraSet {
    pub blocks: Vec<BlockAdapters>,
}

/// The per-modality adapter pool.
#[derive(Clone, Debug)]
pub struct LoraPool {
    sets: BTreeMap<Modality, LoraSet>,
}

impl LoraPool {
    pub fn new(b: &mut Builder, modalities: &[Modality], depth: usize, width: usize, rank: usize, alpha: f64) -> Result<Self> {
        let mut sets = BTreeMap::new();
        for &m in modalities {
            let mut mb = b.pp(m.as_str());
            let mut blocks = Vec::with_capacity(depth);
            for i in 0..depth {
                let mut bb = mb.pp(format!("block{i}"));
                blocks.push(BlockAdapters {
                    q: LoraModule::new(&mut bb.pp("q"), width, width, rank, alpha)?,
                    v: LoraModule::new(&mut bb.pp("v"), width, width, rank, alpha)?,
                });
            }
            sets.insert(m, LoraSet { blocks });
        }
        Ok(Self { sets })
    }

    pub fn select(&self, modality: Modality) -> Result<&LoraSet> {
        self.sets.get(&modality).ok_or_else(|| Error::UnsupportedModality(modality.to_string()))
    }

    /// Lookup by modality id string; unknown ids are an error, never a fallback.
    pub fn select_id(&self, id: &str) -> Result<&LoraSet> {
        self.select(id.parse()?)
    }

    pub fn modalities(&self) -> impl Iterator<Item = Modality> + '_ {
        self.sets.keys().copied()
    }
}

pub fn select_lora<'a>(pool: &'a LoraPool, modality_id: &str) -> Result<&'a LoraSet> {
    pool.select_id(modality_id)
}

/// Splits `B × C × H × W` images into `B × (H/p · W/p) × (C·p·p)` patch rows.
pub fn patchify(images: &Tensor, patch: usize) -> Result<Tensor> {
    let (b, c, h, w) = images.dims4()?;
    if h % patch != 0 || w % patch != 0 {
        return validation(format!("image {h}×{w} not divisible by patch {patch}"));
    }
    let (hp, wp) = (h / patch, w / patch);
    Ok(images
        .reshape((b, c, hp, patch, wp, patch))?
        .permute((0, 2, 4, 1, 3, 5))?
        .contiguous()?
        .reshape((b, hp * wp, c * patch * patch))?)
}

#[derive(Clone, Debug)]
struct TowerBlock {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Frozen ViT-style image encoder producing unit-norm embeddings.
#[derive(Clone, Debug)]
pub struct ImageTower {
    patch: usize,
    image_size: usize,
    embed: Linear,
    pos: Tensor,
    blocks: Vec<TowerBlock>,
    norm: LayerNorm,
    proj: Linear,
}

impl ImageTower {
    fn new(b: &mut Builder, cfg: &MaClipConfig) -> Result<Self> {
        let tokens = (cfg.image_size / cfg.patch).pow(2);
        let acfg = AttentionConfig::new(cfg.width, cfg.heads)?;
        let mut blocks = Vec::with_capacity(cfg.depth);
        for i in 0..cfg.depth {
            let mut bb = b.pp(format!("block{i}"));
            blocks.push(TowerBlock {
                ln1: LayerNorm::new(&mut bb.pp("ln1"), cfg.width)?,
                attn: MultiHeadAttention::new(&mut bb.pp("attn"), acfg)?,
                ln2: LayerNorm::new(&mut bb.pp("ln2"), cfg.width)?,
                mlp: Mlp::new(&mut bb.pp("mlp"), cfg.width, cfg.width * cfg.mlp_ratio, cfg.width)?,
            });
        }
        Ok(Self {
            patch: cfg.patch,
            image_size: cfg.image_size,
            embed: Linear::new(&mut b.pp("embed"), 3 * cfg.patch * cfg.patch, cfg.width)?,
            pos: b.trunc_normal("pos", &[tokens, cfg.width], INIT_STD)?,
            blocks,
            norm: LayerNorm::new(&mut b.pp("norm"), cfg.width)?,
            proj: Linear::new(&mut b.pp("proj"), cfg.width, cfg.embed_dim)?,
        })
    }

    /// `images` is `B × 3 × S × S`; returns `B × D_clip`, rows of unit norm.
    pub fn forward(&self, images: &Tensor, adapters: Option<&LoraSet>) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return validation(format!(
                "image tower expects 3×{s}×{s} inputs, got {c}×{h}×{w}",
                s = self.image_size
            ));
        }
        if let Some(a) = adapters {
            if a.blocks.len() != self.blocks.len() {
                return validation("adapter set depth does not match the image tower");
            }
        }
        let mut x = self.embed.forward(&patchify(images, self.patch)?)?.broadcast_add(&self.pos)?;
        for (i, blk) in self.blocks.iter().enumerate() {
            let h = blk.ln1.forward(&x)?;
            let (q, v) = match adapters {
                Some(a) => (lora_forward(&blk.attn.wq, &a.blocks[i].q, &h)?, lora_forward(&blk.attn.wv, &a.blocks[i].v, &h)?),
                None => (blk.attn.wq.forward(&h)?, blk.attn.wv.forward(&h)?),
            };
            let k = blk.attn.wk.forward(&h)?;
            let (o, _) = attend(&q, &k, &v, blk.attn.cfg.num_heads())?;
            x = (x + blk.attn.wo.forward(&o)?)?;
            x = (&x + blk.mlp.forward(&blk.ln2.forward(&x)?)?)?;
        }
        let pooled = self.norm.forward(&x)?.mean(1)?;
        Ok(ops::l2_normalize(&self.proj.forward(&pooled)?)?)
    }
}

/// Whitespace/comma tokenizer over a closed vocabulary; id 0 is `<unk>`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    words: Vec<String>,
}

pub const CAPTION_WORDS: [&str; 4] = ["a", "scene", "containing", "with"];

impl Vocabulary {
    pub fn new<S: AsRef<str>>(class_names: &[S]) -> Self {
        let mut words = vec!["<unk>".to_string()];
        for w in CAPTION_WORDS.iter().map(|s| s.to_string()).chain(class_names.iter().map(|s| s.as_ref().to_lowercase())) {
            if !words.contains(&w) {
                words.push(w);
            }
        }
        Self { words }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn encode(&self, caption: &str) -> Result<Vec<u32>> {
        let ids: Vec<u32> = caption
            .split(|c: char| c.is_whitespace() || c == ',')
            .filter(|t| !t.is_empty())
            .map(|t| {
                let t = t.to_lowercase();
                self.words.iter().position(|w| *w == t).unwrap_or(0) as u32
            })
            .collect();
        if ids.is_empty() {
            return validation("caption is empty");
        }
        Ok(ids)
    }
}

/// Frozen bag-of-words text encoder: embedding table, mean pool, projection.
#[derive(Clone, Debug)]
pub struct TextTower {
    table: Tensor,
    proj: Linear,
}

impl TextTower {
    fn new(b: &mut Builder, vocab: usize, cfg: &MaClipConfig) -> Result<Self> {
        Ok(Self {
            table: b.trunc_normal("table", &[vocab, cfg.text_width], 1.0)?,
            proj: Linear::new(&mut b.pp("proj"), cfg.text_width, cfg.embed_dim)?,
        })
    }

    pub fn encode_ids(&self, ids: &[u32]) -> Result<Tensor> {
        let idx = Tensor::new(ids, self.table.device())?;
        let pooled = self.table.index_select(&idx, 0)?.mean_keepdim(0)?;
        Ok(ops::l2_normalize(&self.proj.forward(&pooled)?)?.squeeze(0)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveTargets {
    /// Plain diagonal targets; the duplicated caption forces an `ln 2` floor.
    Index,
    /// Half the target mass on each of the two matching columns.
    Averaged,
}

/// Symmetric contrastive loss over `[S^r; S^m]` against `[S^t; S^t]`.
///
/// All inputs are `b × D` with unit-norm rows; `temperature` is a scalar tensor.
pub fn contrastive_loss(s_t: &Tensor, s_r: &Tensor, s_m: &Tensor, temperature: &Tensor, targets: ContrastiveTargets) -> Result<Tensor> {
    let tau = temperature.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if tau.len() != 1 || !(tau[0] > 0.0) {
        return validation(format!("temperature must be a positive scalar, got {tau:?}"));
    }
    let (b, d) = s_t.dims2()?;
    if b == 0 {
        return validation("contrastive loss needs at least one triple");
    }
    if s_r.dims2()? != (b, d) || s_m.dims2()? != (b, d) {
        return validation("embedding triples must share batch size and width");
    }
    let images = Tensor::cat(&[s_r, s_m], 0)?;
    let texts = Tensor::cat(&[s_t, s_t], 0)?;
    let logits = images.matmul(&texts.t()?)?.broadcast_div(&temperature.reshape(())?)?;
    let n = 2 * b;
    let mut target = vec![0f64; n * n];
    for i in 0..n {
        match targets {
            ContrastiveTargets::Index => target[i * n + i] = 1.0,
            ContrastiveTargets::Averaged => {
                target[i * n + i] += 0.5;
                target[i * n + (i + b) % n] += 0.5;
            }
        }
    }
    let target = Tensor::from_vec(target, (n, n), s_t.device())?.to_dtype(logits.dtype())?;
    let i2t = (ops::log_softmax_last_dim(&logits)? * &target)?.sum_all()?;
    let t2i = (ops::log_softmax_last_dim(&logits.t()?)? * &target.t()?)?.sum_all()?;
    Ok(((i2t + t2i)? * (-0.5 / n as f64))?)
}

/// Frozen encoders, the adapter pool and the learnable temperature.
#[derive(Clone, Debug)]
pub struct MaClip {
    pub cfg: MaClipConfig,
    pub image: ImageTower,
    pub text: TextTower,
    pub pool: LoraPool,
    pub temperature: Tensor,
    pub vocab: Vocabulary,
}

impl MaClip {
    /// Builds the model and its registry. Encoder weights are registered frozen;
    /// the adapters and the temperature are trainable.
    pub fn new(cfg: &MaClipConfig, vocab: Vocabulary, seed: u64, dtype: DType) -> Result<(Self, Registry)> {
        if cfg.image_size % cfg.patch != 0 {
            return config("image_size must be divisible by patch");
        }
        if !(cfg.temperature >= TEMPERATURE_RANGE.0 && cfg.temperature <= TEMPERATURE_RANGE.1) {
            return config(format!("initial temperature {} outside {:?}", cfg.temperature, TEMPERATURE_RANGE));
        }
        let mut reg = Registry::new();
        let mut rng = seeded_rng(seed);
        let mut b = Builder::new(&mut reg, &mut rng, dtype);
        let image = ImageTower::new(&mut b.frozen().pp("image"), cfg)?;
        let text = TextTower::new(&mut b.frozen().pp("text"), vocab.len(), cfg)?;
        let pool = LoraPool::new(&mut b.pp("lora"), &Modality::ALL, cfg.depth, cfg.width, cfg.lora_rank, cfg.lora_alpha)?;
        let temperature = b.constant("temperature", &[], cfg.temperature)?;
        Ok((Self { cfg: cfg.clone(), image, text, pool, temperature, vocab }, reg))
    }

    pub fn dtype(&self) -> DType {
        self.temperature.dtype()
    }

    /// Frozen-encoder embedding without any adapter.
    pub fn encode_frozen(&self, images: &Tensor) -> Result<Tensor> {
        self.image.forward(images, None)
    }

    pub fn encode_image(&self, images: &Tensor, modality: Modality) -> Result<Tensor> {
        self.image.forward(images, Some(self.pool.select(modality)?))
    }

    /// Both images pass through the one adapted encoder; returns `(S^r, S^m)`.
    pub fn encode_pair(&self, x_rgb: &Tensor, x_m: &Tensor, modality: Modality) -> Result<(Tensor, Tensor)> {
        if x_rgb.dims() != x_m.dims() {
            return validation(format!("RGB {:?} and modality {:?} inputs differ in shape", x_rgb.dims(), x_m.dims()));
        }
        let b = x_rgb.dims()[0];
        let both = self.encode_image(&Tensor::cat(&[x_rgb, x_m], 0)?, modality)?;
        Ok((both.narrow(0, 0, b)?, both.narrow(0, b, b)?))
    }

    pub fn encode_text(&self, caption: &str) -> Result<Tensor> {
        self.text.encode_ids(&self.vocab.encode(caption)?)
    }

    pub fn encode_texts<S: AsRef<str>>(&self, captions: &[S]) -> Result<Tensor> {
        let rows = captions.iter().map(|c| self.encode_text(c.as_ref())).collect::<Result<Vec<_>>>()?;
        Ok(Tensor::stack(&rows, 0)?)
    }

    pub fn temperature_value(&self) -> Result<f64> {
        Ok(self.temperature.to_dtype(DType::F64)?.to_scalar::<f64>()?)
    }
}

/// AdamW over the adapter pool and temperature only.
pub struct MaClipTrainer {
    opt: AdamW,
    temperature: candle_core::Var,
    pub targets: ContrastiveTargets,
}

impl MaClipTrainer {
    pub fn new(registry: &Registry, lr: f64, targets: ContrastiveTargets) -> Result<Self> {
        Self::with_params(registry, &registry.trainable_names(), lr, targets)
    }

    /// Fails with a configuration error if any named parameter is frozen.
    pub fn with_params(registry: &Registry, names: &[String], lr: f64, targets: ContrastiveTargets) -> Result<Self> {
        let vars = registry.optimizer_vars(names)?;
        let temperature = registry
            .get("temperature")
            .cloned()
            .ok_or_else(|| Error::Config("registry has no temperature".into()))?;
        let opt = AdamW::new(vars, ParamsAdamW { lr, weight_decay: 0.0, ..Default::default() })?;
        Ok(Self { opt, temperature, targets })
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.opt.set_learning_rate(lr);
    }

    /// One optimisation step on a single-modality batch; returns the loss before the update.
    pub fn step<S: AsRef<str>>(&mut self, model: &MaClip, rgb: &Tensor, modality_img: &Tensor, modality: Modality, captions: &[S]) -> Result<f64> {
        let s_t = model.encode_texts(captions)?;
        let (s_r, s_m) = model.encode_pair(rgb, modality_img, modality)?;
        let loss = contrastive_loss(&s_t, &s_r, &s_m, &model.temperature, self.targets)?;
        let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        let grads = loss.backward()?;
        self.opt.step(&grads)?;
        let t = self.temperature.as_tensor().clamp(TEMPERATURE_RANGE.0, TEMPERATURE_RANGE.1)?;
        self.temperature.set(&t)?;
        Ok(value)
    }
}

/// Zero tensor on the CPU, for callers that need a placeholder embedding.
pub fn zero_embeddings(batch: usize, dim: usize, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::zeros((batch, dim), dtype, &Device::Cpu)?)
}

/// Mean cosine similarity between matching rows.
pub fn mean_row_cosine(a: &Tensor, b: &Tensor) -> Result<f64> {
    let a = ops::l2_normalize(a)?;
    let b = ops::l2_normalize(b)?;
    Ok((a * b)?.sum(D::Minus1)?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
