//! Experiment stages: MA-CLIP pretraining, joint training, per-dataset
//! fine-tuning, ablations, evaluation, latency and overlay export.

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::backbone::{SegConfig, SegModel};
use crate::checkpoint;
use crate::config::{RunConfig, TrainConfig};
use crate::dsrm::DsrmVariant;
use crate::error::{Error, Result};
use crate::labels::{joint_loss, predict_local, remap_labels, RemapTable};
use crate::maclip::{MaClip, MaClipConfig, MaClipTrainer, Vocabulary};
use crate::metrics::{compute_miou, embedding_separation, ConfusionMatrix, MiouReport, SeparationReport};
use crate::nn::Registry;
use crate::prompt::PromptPairing;
use crate::synth_data::{augment, batch_tensors, cache_dir_from_env, class_profile, default_datasets, DatasetSpec, JointSampler, MultiModalSample, Split, SynthCorpus};

pub const MACLIP_KIND: &str = "maclip";
pub const SEG_KIND: &str = "segmodel";

/// Append-only JSON-lines log; every line is a complete record.
#[derive(Clone, Debug)]
pub struct MetricsLog {
    path: PathBuf,
}

impl MetricsLog {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        Self { path: path.into() }
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append<T: Serialize>(&self, record: &T) -> Result<()> {
        if let Some(dir) = self.path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut line = serde_json::to_string(record)?;
        line.push('\n');
        let mut f = OpenOptions::new().create(true).append(true).open(&self.path)?;
        f.write_all(line.as_bytes())?;
        f.flush()?;
        Ok(())
    }

    /// Parses every complete line; a torn final line is skipped.
    pub fn read(&self) -> Result<Vec<serde_json::Value>> {
        let text = std::fs::read_to_string(&self.path)?;
        Ok(text.lines().filter_map(|l| serde_json::from_str(l).ok()).collect())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalRecord {
    pub kind: String,
    pub run: String,
    pub dataset: String,
    pub split: Split,
    pub step: usize,
    pub classes: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub wall_clock_s: f64,
}

/// Per-dataset evaluation result.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetEval {
    pub dataset: String,
    pub classes: Vec<String>,
    pub report: MiouReport,
}

pub fn mean_miou(evals: &[DatasetEval]) -> f64 {
    evals.iter().map(|e| e.report.miou).sum::<f64>() / evals.len().max(1) as f64
}

/// MA-CLIP embeddings `(S^r, S^m)` per dataset, rows aligned with the samples.
#[derive(Clone, Debug)]
pub struct Embeddings {
    pub train: Vec<(Tensor, Tensor)>,
    pub eval: Vec<(Tensor, Tensor)>,
}

impl Embeddings {
    pub fn split(&self, split: Split) -> &[(Tensor, Tensor)] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }

    pub fn rows(&self, split: Split, dataset: usize, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let (r, m) = &self.split(split)[dataset];
        let ids: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
        let ids = Tensor::new(ids.as_slice(), r.device())?;
        Ok((r.index_select(&ids, 0)?, m.index_select(&ids, 0)?))
    }
}

fn chunked<T>(items: &[T], size: usize) -> impl Iterator<Item = (usize, &[T])> {
    items.chunks(size.max(1)).enumerate().map(move |(i, c)| (i * size.max(1), c))
}

/// Adapted-encoder embeddings of the clean samples of every dataset.
pub fn compute_embeddings(maclip: &MaClip, corpus: &SynthCorpus, dtype: DType, batch: usize) -> Result<Embeddings> {
    let one = |samples: &[MultiModalSample]| -> Result<(Tensor, Tensor)> {
        let mut rs = Vec::new();
        let mut ms = Vec::new();
        for (_, chunk) in chunked(samples, batch) {
            let refs: Vec<&MultiModalSample> = chunk.iter().collect();
            let (rgb, x, _) = batch_tensors(&refs, maclip.dtype())?;
            let (r, m) = maclip.encode_pair(&rgb, &x, chunk[0].modality)?;
            rs.push(r.to_dtype(dtype)?.detach());
            ms.push(m.to_dtype(dtype)?.detach());
        }
        Ok((Tensor::cat(&rs, 0)?, Tensor::cat(&ms, 0)?))
    };
    Ok(Embeddings {
        train: corpus.train.iter().map(|s| one(s)).collect::<Result<_>>()?,
        eval: corpus.eval.iter().map(|s| one(s)).collect::<Result<_>>()?,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<f64>,
    pub temperature: f64,
    pub separation: SeparationReport,
    pub frozen_hash_before: u64,
    pub frozen_hash_after: u64,
}

pub fn build_maclip(cfg: &MaClipConfig, corpus: &SynthCorpus, seed: u64, dtype: DType) -> Result<(MaClip, Registry)> {
    MaClip::new(cfg, Vocabulary::new(corpus.space.names()), seed, dtype)
}

/// Modality-separation of held-out adapted embeddings (label = dataset index).
pub fn modality_separation(maclip: &MaClip, corpus: &SynthCorpus, batch: usize) -> Result<SeparationReport> {
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (d, samples) in corpus.eval.iter().enumerate() {
        for (_, chunk) in chunked(samples, batch) {
            let refs: Vec<&MultiModalSample> = chunk.iter().collect();
            let (_, x, _) = batch_tensors(&refs, maclip.dtype())?;
            let e = maclip.encode_image(&x, chunk[0].modality)?.to_dtype(DType::F64)?.to_vec2::<f64>()?;
            labels.extend(std::iter::repeat(d).take(e.len()));
            rows.extend(e);
        }
    }
    embedding_separation(&rows, &labels)
}

/// Contrastive adapter training on single-dataset batches.
pub fn pretrain_maclip(cfg: &RunConfig, corpus: &SynthCorpus) -> Result<(MaClip, Registry, PretrainReport)> {
    let (model, reg) = build_maclip(&cfg.maclip, corpus, cfg.seed, cfg.dtype())?;
    let before = reg.frozen_hash()?;
    let mut trainer = MaClipTrainer::new(&reg, cfg.pretrain.lr, cfg.pretrain.targets)?;
    let sizes: Vec<usize> = corpus.train.iter().map(Vec::len).collect();
    let mut sampler = JointSampler::new(&sizes, &cfg.data.weights, cfg.seed ^ 0x5eed_0001)?;
    let mut losses = Vec::with_capacity(cfg.pretrain.steps);
    for step in 0..cfg.pretrain.steps {
        let (d, idx) = sampler.next_batch(cfg.pretrain.batch);
        let samples: Vec<&MultiModalSample> = idx.iter().map(|&i| &corpus.train[d][i]).collect();
        let (rgb, x, _) = batch_tensors(&samples, model.dtype())?;
        let captions: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
        let loss = trainer.step(&model, &rgb, &x, corpus.datasets[d].modality, &captions)?;
        if step % 50 == 0 {
            log::info!("pretrain step {step}: loss {loss:.4}");
        }
        losses.push(loss);
    }
    let separation = modality_separation(&model, corpus, 32)?;
    let report = PretrainReport { losses, temperature: model.temperature_value()?, separation, frozen_hash_before: before, frozen_hash_after: reg.frozen_hash()? };
    Ok((model, reg, report))
}

/// AdamW with a poly learning-rate decay over a fixed step budget.
pub struct SegTrainer {
    opt: AdamW,
    base_lr: f64,
    power: f64,
    total: usize,
    step: usize,
}

impl SegTrainer {
    pub fn new(reg: &Registry, lr: f64, weight_decay: f64, power: f64, total: usize) -> Result<Self> {
        let vars = reg.optimizer_vars(&reg.trainable_names())?;
        let opt = AdamW::new(vars, ParamsAdamW { lr, weight_decay, ..Default::default() })?;
        Ok(Self { opt, base_lr: lr, power, total: total.max(1), step: 0 })
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        self.base_lr * (1.0 - step.min(self.total) as f64 / self.total as f64).powf(self.power)
    }

    /// One update on a single-dataset batch; returns the loss before the update.
    pub fn step(&mut self, model: &SegModel, rgb: &Tensor, x: &Tensor, s_r: &Tensor, s_m: &Tensor, labels: &[u8], table: &RemapTable) -> Result<f64> {
        self.opt.set_learning_rate(self.lr_at(self.step));
        let logits = model.forward(rgb, x, s_r, s_m)?;
        let loss = joint_loss(&logits, labels, table)?;
        let value = loss.loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        if !value.is_finite() {
            return Err(Error::Validation(format!("non-finite loss at step {}", self.step)));
        }
        if !loss.all_ignored {
            self.opt.backward_step(&loss.loss)?;
        }
        self.step += 1;
        Ok(value)
    }
}

/// Trains `model` for `steps` on datasets drawn with `weights`.
#[allow(clippy::too_many_arguments)]
pub fn train_segmentation(model: &SegModel, reg: &Registry, corpus: &SynthCorpus, emb: &Embeddings, tcfg: &TrainConfig, weights: &[f64], steps: usize, lr: f64, augment_samples: bool, seed: u64) -> Result<Vec<f64>> {
    let tables: Vec<RemapTable> = corpus.datasets.iter().map(|d| corpus.space.table(&d.name)).collect::<Result<_>>()?;
    let sizes: Vec<usize> = corpus.train.iter().map(Vec::len).collect();
    let mut sampler = JointSampler::new(&sizes, weights, seed)?;
    let mut trainer = SegTrainer::new(reg, lr, tcfg.weight_decay, tcfg.poly_power, steps)?;
    let dtype = model.dtype();
    let mut losses = Vec::with_capacity(steps);
    let t0 = Instant::now();
    for step in 0..steps {
        let (d, idx) = sampler.next_batch(tcfg.batch);
        let owned: Vec<MultiModalSample> = idx
            .iter()
            .map(|&i| {
                let s = &corpus.train[d][i];
                if augment_samples {
                    augment(s, sampler.next_seed())
                } else {
                    s.clone()
                }
            })
            .collect();
        let refs: Vec<&MultiModalSample> = owned.iter().collect();
        let (rgb, x, labels) = batch_tensors(&refs, dtype)?;
        let (s_r, s_m) = emb.rows(Split::Train, d, &idx)?;
        let loss = trainer.step(model, &rgb, &x, &s_r, &s_m, &labels, &tables[d])?;
        if tcfg.log_every > 0 && (step % tcfg.log_every == 0 || step + 1 == steps) {
            log::info!("train step {step}/{steps}: loss {loss:.4} ({:.1}s)", t0.elapsed().as_secs_f64());
        }
        losses.push(loss);
    }
    Ok(losses)
}

/// Per-dataset mIoU over the dataset's own classes.
pub fn evaluate(model: &SegModel, corpus: &SynthCorpus, emb: &Embeddings, split: Split, batch: usize) -> Result<Vec<DatasetEval>> {
    let dtype = model.dtype();
    let mut out = Vec::new();
    for (d, spec) in corpus.datasets.iter().enumerate() {
        let table = corpus.space.table(&spec.name)?;
        let samples = match split {
            Split::Train => &corpus.train[d],
            Split::Eval => &corpus.eval[d],
        };
        let mut cm = ConfusionMatrix::new(table.num_local());
        for (start, chunk) in chunked(samples, batch) {
            let refs: Vec<&MultiModalSample> = chunk.iter().collect();
            let (rgb, x, labels) = batch_tensors(&refs, dtype)?;
            let idx: Vec<usize> = (start..start + chunk.len()).collect();
            let (s_r, s_m) = emb.rows(split, d, &idx)?;
            let logits = model.forward(&rgb, &x, &s_r, &s_m)?;
            cm.update(&predict_local(&logits, &table)?, &remap_labels(&labels, &table)?)?;
        }
        out.push(DatasetEval { dataset: spec.name.clone(), classes: spec.classes.clone(), report: compute_miou(&cm)? });
    }
    Ok(out)
}

/// Median wall-clock milliseconds of `f` after at least five warmup calls.
pub fn measure_latency<F: FnMut() -> Result<()>>(mut f: F, warmup: usize, repetitions: usize) -> Result<f64> {
    for _ in 0..warmup.max(5) {
        f()?;
    }
    let mut times = Vec::with_capacity(repetitions.max(1));
    for _ in 0..repetitions.max(1) {
        let t = Instant::now();
        f()?;
        times.push(t.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(times[times.len() / 2])
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct JointReport {
    pub losses: Vec<f64>,
    pub train: Vec<DatasetEval>,
    pub eval: Vec<DatasetEval>,
    pub train_mean: f64,
    pub eval_mean: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub dataset: String,
    pub before: f64,
    pub after: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AblationRecord {
    pub kind: String,
    pub variant: String,
    pub pairing: String,
    pub eval_mean: f64,
    pub per_dataset: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LatencyReport {
    pub kind: String,
    pub batch: usize,
    pub median_ms: f64,
}

/// One configured run: corpus, output directory and metrics log.
pub struct Experiment {
    pub cfg: RunConfig,
    pub corpus: SynthCorpus,
    pub log: MetricsLog,
    embeddings: Option<Embeddings>,
    started: Instant,
}

fn dataset_specs(names: &[String]) -> Result<Vec<DatasetSpec>> {
    let all = default_datasets();
    names
        .iter()
        .map(|n| all.iter().find(|d| &d.name == n).cloned().ok_or_else(|| Error::Config(format!("unknown dataset `{n}`"))))
        .collect()
}

impl Experiment {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let specs = dataset_specs(&cfg.data.datasets)?;
        let root = if cfg.data.cache_dir.is_empty() { cache_dir_from_env() } else { Some(PathBuf::from(&cfg.data.cache_dir)) };
        let corpus = match root {
            Some(r) => SynthCorpus::cached(&r, specs, cfg.data.train_per_dataset, cfg.data.eval_per_dataset, cfg.seed)?,
            None => SynthCorpus::generate(specs, cfg.data.train_per_dataset, cfg.data.eval_per_dataset, cfg.seed)?,
        };
        if cfg.model.num_classes != corpus.space.len() {
            return Err(Error::Config(format!("model.num_classes is {} but the unified space has {} classes", cfg.model.num_classes, corpus.space.len())));
        }
        let log = MetricsLog::new(cfg.out_dir().join("metrics.jsonl"));
        Ok(Self { cfg, corpus, log, embeddings: None, started: Instant::now() })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.cfg.out_dir().join(name)
    }

    pub fn maclip_path(&self) -> PathBuf {
        self.path("maclip.safetensors")
    }

    pub fn joint_path(&self) -> PathBuf {
        self.path("joint.safetensors")
    }

    pub fn finetune_path(&self, dataset: &str) -> PathBuf {
        self.path(&format!("finetune-{dataset}.safetensors"))
    }

    pub fn pretrain_maclip(&mut self) -> Result<PretrainReport> {
        let (model, reg, report) = pretrain_maclip(&self.cfg, &self.corpus)?;
        let cfg = serde_json::to_string(&(&model.cfg, &model.vocab))?;
        checkpoint::save(&self.maclip_path(), MACLIP_KIND, &cfg, &reg.tensors())?;
        std::fs::write(self.path("labels.txt"), self.corpus.space.to_manifest())?;
        self.log.append(&serde_json::json!({
            "kind": "maclip_pretrain",
            "steps": report.losses.len(),
            "final_loss": report.losses.last(),
            "temperature": report.temperature,
            "separation_accuracy": report.separation.accuracy,
            "silhouette": report.separation.silhouette,
            "silhouette_defined": report.separation.silhouette_defined,
            "wall_clock_s": self.started.elapsed().as_secs_f64(),
        }))?;
        self.embeddings = None;
        Ok(report)
    }

    pub fn load_maclip(&self) -> Result<MaClip> {
        let ck = checkpoint::load(&self.maclip_path(), MACLIP_KIND)
            .map_err(|e| match e {
                Error::MissingPrerequisite(m) => Error::MissingPrerequisite(format!("{m}; run pretrain-maclip first")),
                e => e,
            })?;
        let (mcfg, vocab): (MaClipConfig, Vocabulary) = serde_json::from_str(&ck.config)?;
        let (model, reg) = MaClip::new(&mcfg, vocab, self.cfg.seed, self.cfg.dtype())?;
        load_into(&reg, &ck.tensors)?;
        Ok(model)
    }

    pub fn embeddings(&mut self) -> Result<Embeddings> {
        if self.embeddings.is_none() {
            let m = self.load_maclip()?;
            self.embeddings = Some(compute_embeddings(&m, &self.corpus, self.cfg.dtype(), 32)?);
        }
        Ok(self.embeddings.clone().unwrap())
    }

    pub fn new_model(&self, model_cfg: &SegConfig) -> Result<(SegModel, Registry)> {
        SegModel::new(model_cfg, self.cfg.seed, self.cfg.dtype())
    }

    pub fn save_model(&self, path: &Path, model: &SegModel, reg: &Registry) -> Result<()> {
        checkpoint::save(path, SEG_KIND, &serde_json::to_string(&model.cfg)?, &reg.tensors())
    }

    pub fn load_model(&self, path: &Path) -> Result<(SegModel, Registry)> {
        let ck = checkpoint::load(path, SEG_KIND)?;
        let cfg: SegConfig = serde_json::from_str(&ck.config)?;
        let (m, reg) = SegModel::new(&cfg, self.cfg.seed, self.cfg.dtype())?;
        load_into(&reg, &ck.tensors)?;
        Ok((m, reg))
    }

    fn log_evals(&self, run: &str, split: Split, step: usize, evals: &[DatasetEval]) -> Result<()> {
        for e in evals {
            self.log.append(&EvalRecord {
                kind: "eval".into(),
                run: run.into(),
                dataset: e.dataset.clone(),
                split,
                step,
                classes: e.classes.clone(),
                per_class_iou: e.report.per_class.clone(),
                miou: e.report.miou,
                wall_clock_s: self.started.elapsed().as_secs_f64(),
            })?;
        }
        Ok(())
    }

    /// Trains a fresh model with `model_cfg` and returns it with its eval results.
    pub fn train_fresh(&mut self, model_cfg: &SegConfig, steps: usize, run: &str) -> Result<(SegModel, Registry, JointReport)> {
        let emb = self.embeddings()?;
        let (model, reg) = self.new_model(model_cfg)?;
        let t = Instant::now();
        let tc = self.cfg.train.clone();
        let mut losses = Vec::new();
        let chunk = if tc.eval_every == 0 { steps.max(1) } else { tc.eval_every };
        let mut done = 0;
        // a single schedule over the whole budget, evaluated every `chunk` steps
        let tables_seed = self.cfg.seed ^ 0x5eed_0002;
        let mut sampler_state = None;
        while done < steps {
            let n = chunk.min(steps - done);
            losses.extend(self.train_segment(&model, &reg, &emb, done, n, steps, tables_seed, &mut sampler_state)?);
            done += n;
            if done < steps {
                let ev = evaluate(&model, &self.corpus, &emb, Split::Eval, self.cfg.eval.batch)?;
                self.log_evals(run, Split::Eval, done, &ev)?;
            }
        }
        let seconds = t.elapsed().as_secs_f64();
        let train = evaluate(&model, &self.corpus, &emb, Split::Train, self.cfg.eval.batch)?;
        let eval = evaluate(&model, &self.corpus, &emb, Split::Eval, self.cfg.eval.batch)?;
        self.log_evals(run, Split::Train, steps, &train)?;
        self.log_evals(run, Split::Eval, steps, &eval)?;
        let report = JointReport { losses, train_mean: mean_miou(&train), eval_mean: mean_miou(&eval), train, eval, seconds };
        Ok((model, reg, report))
    }

    #[allow(clippy::too_many_arguments)]
    fn train_segment(&self, model: &SegModel, reg: &Registry, emb: &Embeddings, offset: usize, n: usize, total: usize, seed: u64, state: &mut Option<(JointSampler, SegTrainer)>) -> Result<Vec<f64>> {
        let tc = &self.cfg.train;
        if state.is_none() {
            let sizes: Vec<usize> = self.corpus.train.iter().map(Vec::len).collect();
            *state = Some((JointSampler::new(&sizes, &self.cfg.data.weights, seed)?, SegTrainer::new(reg, tc.lr, tc.weight_decay, tc.poly_power, total)?));
        }
        let (sampler, trainer) = state.as_mut().unwrap();
        let tables: Vec<RemapTable> = self.corpus.datasets.iter().map(|d| self.corpus.space.table(&d.name)).collect::<Result<_>>()?;
        let dtype = model.dtype();
        let mut losses = Vec::with_capacity(n);
        let t0 = Instant::now();
        for k in 0..n {
            let step = offset + k;
            let (d, idx) = sampler.next_batch(tc.batch);
            let owned: Vec<MultiModalSample> = idx
                .iter()
                .map(|&i| {
                    let s = &self.corpus.train[d][i];
                    if self.cfg.data.augment {
                        augment(s, sampler.next_seed())
                    } else {
                        s.clone()
                    }
                })
                .collect();
            let refs: Vec<&MultiModalSample> = owned.iter().collect();
            let (rgb, x, labels) = batch_tensors(&refs, dtype)?;
            let (s_r, s_m) = emb.rows(Split::Train, d, &idx)?;
            let loss = trainer.step(model, &rgb, &x, &s_r, &s_m, &labels, &tables[d])?;
            if tc.log_every > 0 && (step % tc.log_every == 0 || step + 1 == total) {
                log::info!("train step {step}/{total}: loss {loss:.4} ({:.1}s)", t0.elapsed().as_secs_f64());
            }
            losses.push(loss);
        }
        Ok(losses)
    }

    pub fn joint_train(&mut self) -> Result<JointReport> {
        let model_cfg = self.cfg.model.clone();
        let (model, reg, report) = self.train_fresh(&model_cfg, self.cfg.train.steps, "joint")?;
        self.save_model(&self.joint_path(), &model, &reg)?;
        Ok(report)
    }

    pub fn finetune(&mut self) -> Result<FinetuneReport> {
        let ds = self.cfg.finetune.dataset.clone();
        let d = self.corpus.index_of(&ds)?;
        let (model, reg) = self.load_model(&self.joint_path()).map_err(|e| match e {
            Error::MissingPrerequisite(m) => Error::MissingPrerequisite(format!("{m}; run train first")),
            e => e,
        })?;
        let emb = self.embeddings()?;
        let before = evaluate(&model, &self.corpus, &emb, Split::Eval, self.cfg.eval.batch)?[d].report.miou;
        let mut weights = vec![0.0; self.corpus.datasets.len()];
        weights[d] = 1.0;
        train_segmentation(&model, &reg, &self.corpus, &emb, &self.cfg.train, &weights, self.cfg.finetune.steps, self.cfg.finetune.lr, self.cfg.data.augment, self.cfg.seed ^ 0x5eed_0003)?;
        let evals = evaluate(&model, &self.corpus, &emb, Split::Eval, self.cfg.eval.batch)?;
        self.log_evals(&format!("finetune-{ds}"), Split::Eval, self.cfg.finetune.steps, &evals[d..=d])?;
        self.save_model(&self.finetune_path(&ds), &model, &reg)?;
        let report = FinetuneReport { dataset: ds, before, after: evals[d].report.miou };
        self.log.append(&serde_json::json!({"kind": "finetune", "dataset": report.dataset, "before": report.before, "after": report.after}))?;
        Ok(report)
    }

    /// Variant sweep at the configured pairing, then pairing sweep at the configured variant.
    pub fn ablate(&mut self) -> Result<Vec<AblationRecord>> {
        let steps = if self.cfg.ablate.steps == 0 { self.cfg.train.steps } else { self.cfg.ablate.steps };
        let variants: Vec<DsrmVariant> = self.cfg.ablate.variants.iter().map(|v| v.parse()).collect::<Result<_>>()?;
        let pairings: Vec<PromptPairing> = self.cfg.ablate.pairings.iter().map(|p| p.parse()).collect::<Result<_>>()?;
        let mut runs: Vec<(String, SegConfig)> = Vec::new();
        for v in variants {
            let mut c = self.cfg.model.clone();
            c.dsrm.variant = v;
            runs.push(("dsrm_variant".into(), c));
        }
        for p in pairings {
            let mut c = self.cfg.model.clone();
            c.pairing = p;
            runs.push(("prompt_pairing".into(), c));
        }
        let mut done: Vec<(SegConfig, AblationRecord)> = Vec::new();
        let mut out = Vec::new();
        for (kind, c) in runs {
            let rec = match done.iter().find(|(dc, _)| *dc == c) {
                Some((_, r)) => AblationRecord { kind: kind.clone(), ..r.clone() },
                None => {
                    let run = format!("ablate-{}-{}", c.dsrm.variant, c.pairing);
                    let (_, _, rep) = self.train_fresh(&c, steps, &run)?;
                    let r = AblationRecord {
                        kind: kind.clone(),
                        variant: c.dsrm.variant.to_string(),
                        pairing: c.pairing.to_string(),
                        eval_mean: rep.eval_mean,
                        per_dataset: rep.eval.iter().map(|e| (e.dataset.clone(), e.report.miou)).collect(),
                    };
                    done.push((c.clone(), r.clone()));
                    r
                }
            };
            self.log.append(&serde_json::json!({"kind": "ablation", "sweep": rec.kind, "variant": rec.variant, "pairing": rec.pairing, "eval_mean": rec.eval_mean, "per_dataset": rec.per_dataset}))?;
            out.push(rec);
        }
        Ok(out)
    }

    fn eval_model(&self) -> Result<(SegModel, Registry)> {
        match self.cfg.eval.checkpoint.as_str() {
            "init" => self.new_model(&self.cfg.model),
            "joint" => self.load_model(&self.joint_path()),
            "finetune" => self.load_model(&self.finetune_path(&self.cfg.finetune.dataset)),
            other => Err(Error::Config(format!("eval.checkpoint must be init, joint or finetune, not `{other}`"))),
        }
    }

    pub fn eval(&mut self) -> Result<Vec<DatasetEval>> {
        let (model, _) = self.eval_model()?;
        let emb = self.embeddings()?;
        let evals = evaluate(&model, &self.corpus, &emb, Split::Eval, self.cfg.eval.batch)?;
        self.log_evals(&format!("eval-{}", self.cfg.eval.checkpoint), Split::Eval, 0, &evals)?;
        Ok(evals)
    }

    /// Median forward latency of the configured model on random inputs.
    pub fn latency(&self) -> Result<LatencyReport> {
        let (model, _) = self.new_model(&self.cfg.model)?;
        let b = self.cfg.latency.batch;
        let s = self.cfg.model.image_size;
        let dev = candle_core::Device::Cpu;
        let dt = self.cfg.dtype();
        let rgb = Tensor::rand(0f32, 1.0, (b, 3, s, s), &dev)?.to_dtype(dt)?;
        let x = Tensor::rand(0f32, 1.0, (b, 3, s, s), &dev)?.to_dtype(dt)?;
        let e = Tensor::randn(0f32, 1.0, (b, self.cfg.model.embed_dim), &dev)?.to_dtype(dt)?;
        let ms = measure_latency(|| model.forward(&rgb, &x, &e, &e).map(|_| ()), self.cfg.latency.warmup, self.cfg.latency.repetitions)?;
        let r = LatencyReport { kind: "latency".into(), batch: b, median_ms: ms };
        self.log.append(&r)?;
        Ok(r)
    }

    /// Writes predicted-label colour overlays for the first eval samples.
    pub fn export(&mut self) -> Result<Vec<PathBuf>> {
        let (model, _) = self.eval_model()?;
        let emb = self.embeddings()?;
        let dir = self.path("overlays");
        std::fs::create_dir_all(&dir)?;
        let mut written = Vec::new();
        for (d, spec) in self.corpus.datasets.iter().enumerate() {
            let table = self.corpus.space.table(&spec.name)?;
            let n = self.cfg.eval.export_samples.min(self.corpus.eval[d].len());
            if n == 0 {
                continue;
            }
            let refs: Vec<&MultiModalSample> = self.corpus.eval[d][..n].iter().collect();
            let (rgb, x, _) = batch_tensors(&refs, self.cfg.dtype())?;
            let idx: Vec<usize> = (0..n).collect();
            let (s_r, s_m) = emb.rows(Split::Eval, d, &idx)?;
            let pred = predict_local(&model.forward(&rgb, &x, &s_r, &s_m)?, &table)?;
            let px = refs[0].rgb.height * refs[0].rgb.width;
            for (i, s) in refs.iter().enumerate() {
                let mut img = image::RgbImage::new(s.rgb.width as u32, s.rgb.height as u32);
                for (p, pixel) in img.pixels_mut().enumerate() {
                    let color = class_profile(&spec.classes[pred[i * px + p] as usize]).color;
                    let rgb = &s.rgb.data[p * 3..p * 3 + 3];
                    *pixel = image::Rgb(std::array::from_fn(|c| ((0.5 * rgb[c] + 0.5 * color[c]).clamp(0.0, 1.0) * 255.0).round() as u8));
                }
                let path = dir.join(format!("{}_{i:03}.png", spec.name));
                img.save(&path)?;
                written.push(path);
            }
        }
        Ok(written)
    }
}

/// Loads checkpoint tensors into a registry, converting to its dtype.
pub fn load_into(reg: &Registry, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
    let dtype = reg.tensors().values().next().map(|t| t.dtype()).unwrap_or(DType::F32);
    let converted: BTreeMap<String, Tensor> = tensors.iter().map(|(k, t)| Ok((k.clone(), t.to_dtype(dtype)?))).collect::<Result<_>>()?;
    reg.load(&converted)
}
