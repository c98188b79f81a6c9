mod common;

use candle_core::{DType, Var};
use common::*;
use rgbx_core::backbone::{SegConfig, SegModel};
use rgbx_core::config::RunConfig;
use rgbx_core::dsrm::DsrmConfig;
use rgbx_core::error::Error;
use rgbx_core::experiment::{measure_latency, Experiment, MetricsLog};
use rgbx_core::gradcheck;

fn micro_model() -> SegConfig {
    SegConfig {
        image_size: 16,
        patch: 4,
        widths: [4, 4, 8, 8],
        depths: [1, 1, 1, 1],
        heads: [1, 1, 2, 2],
        sides: [4, 3, 2, 1],
        mlp_ratio: 2,
        control_prompts: 1,
        learned_prompts: 1,
        head_width: 4,
        embed_dim: 4,
        num_classes: 3,
        dsrm: DsrmConfig { prompt_slots: 2, prompt_width: 2, channel_heads: 1, spatial_heads: 2, ..Default::default() },
        ..Default::default()
    }
}

/// Small but complete run configuration writing into `dir`.
fn small_run(dir: &std::path::Path) -> RunConfig {
    let o = dir.display().to_string();
    let overrides = [
        format!("out_dir={o:?}"),
        "data.train_per_dataset=6".into(),
        "data.eval_per_dataset=3".into(),
        "maclip.patch=16".into(),
        "maclip.width=16".into(),
        "maclip.depth=1".into(),
        "maclip.heads=2".into(),
        "maclip.text_width=16".into(),
        "maclip.embed_dim=16".into(),
        "pretrain.steps=3".into(),
        "pretrain.batch=2".into(),
        "model.patch=8".into(),
        "model.widths=[8, 8, 16, 16]".into(),
        "model.sides=[8, 6, 4, 2]".into(),
        "model.heads=[1, 1, 2, 2]".into(),
        "model.depths=[1, 1, 1, 1]".into(),
        "model.head_width=8".into(),
        "model.embed_dim=16".into(),
        "model.control_prompts=1".into(),
        "model.learned_prompts=1".into(),
        "model.dsrm.prompt_slots=2".into(),
        "model.dsrm.prompt_width=2".into(),
        "model.dsrm.channel_heads=2".into(),
        "model.dsrm.spatial_heads=2".into(),
        "train.steps=4".into(),
        "train.batch=2".into(),
        "train.lr=1e-3".into(),
        "finetune.steps=2".into(),
        "ablate.steps=2".into(),
        "ablate.variants=[]".into(),
        "eval.batch=8".into(),
        "eval.export_samples=1".into(),
        "latency.warmup=5".into(),
        "latency.repetitions=3".into(),
    ];
    RunConfig::from_parts(None, &overrides).unwrap()
}

#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let cfg = micro_model();
    let (m, reg) = SegModel::new(&cfg, 1, DType::F64).unwrap();
    let mut r = rng(2);
    let rgb = randn(&mut r, &[2, 3, 16, 16], 0.5);
    let x = randn(&mut r, &[2, 3, 16, 16], 0.5);
    let (s_r, s_m) = (randn(&mut r, &[2, 4], 1.0), randn(&mut r, &[2, 4], 1.0));
    let w = randn(&mut r, &[2, 3, 16, 16], 1.0);
    for name in ["stage1.embed.weight", "dsrm.block0.universal", "prompts.learned.stage2.modality", "head.classify.weight"] {
        let var: Var = reg.get(name).unwrap_or_else(|| panic!("missing {name}")).clone();
        let idx: Vec<usize> = (0..var.elem_count()).step_by(5).take(12).collect();
        let rep = gradcheck::check(&var, &idx, 1e-5, 1e-7, || Ok((m.forward(&rgb, &x, &s_r, &s_m)? * &w)?.sum_all()?)).unwrap();
        assert!(rep.max_rel_err < 1e-3, "{name}: {rep:?}");
    }
}

#[test]
fn stages_need_their_prerequisites() {
    let dir = tempfile::tempdir().unwrap();
    let mut e = Experiment::new(small_run(dir.path())).unwrap();
    assert!(matches!(e.joint_train(), Err(Error::MissingPrerequisite(_))));
    assert!(matches!(e.finetune(), Err(Error::MissingPrerequisite(_))));
    assert!(matches!(e.eval(), Err(Error::MissingPrerequisite(_))));
}

#[test]
fn full_small_pipeline_runs_and_logs() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_run(dir.path());
    let mut e = Experiment::new(cfg.clone()).unwrap();
    let p = e.pretrain_maclip().unwrap();
    assert_eq!(p.frozen_hash_before, p.frozen_hash_after);

    cfg.eval.checkpoint = "init".into();
    let mut init = Experiment::new(cfg.clone()).unwrap();
    let untrained = init.eval().unwrap();
    assert_eq!(untrained.len(), 5);
    assert!(untrained.iter().all(|d| d.report.miou.is_finite() && d.report.miou < 0.5));

    let j = e.joint_train().unwrap();
    assert!(j.losses.iter().all(|l| l.is_finite()));
    assert!(e.joint_path().exists());
    let f = e.finetune().unwrap();
    assert_eq!(f.dataset, "mfnet");
    assert!(e.finetune_path("mfnet").exists());

    let runs = e.ablate().unwrap();
    let pairings: Vec<&str> = runs.iter().map(|r| r.pairing.as_str()).collect();
    assert_eq!(pairings, ["aligned", "cross_modal", "rgb_dominant"]);
    assert!(runs.iter().all(|r| r.per_dataset.len() == 5));

    let written = e.export().unwrap();
    assert_eq!(written.len(), 5);
    assert!(image::open(&written[0]).unwrap().width() == 64);

    let records = MetricsLog::new(dir.path().join("metrics.jsonl")).read().unwrap();
    let evals: Vec<_> = records.iter().filter(|r| r["kind"] == "eval").collect();
    assert!(!evals.is_empty());
    for r in evals {
        for k in ["dataset", "step", "per_class_iou", "miou", "wall_clock_s"] {
            assert!(r.get(k).is_some(), "record lacks {k}: {r}");
        }
    }
}

#[test]
fn torn_log_lines_are_skipped() {
    let dir = tempfile::tempdir().unwrap();
    let log = MetricsLog::new(dir.path().join("m.jsonl"));
    log.append(&serde_json::json!({"kind": "eval", "miou": 0.5})).unwrap();
    std::fs::OpenOptions::new().append(true).open(log.path()).map(|mut f| std::io::Write::write_all(&mut f, b"{\"kind\": \"ev")).unwrap().unwrap();
    assert_eq!(log.read().unwrap().len(), 1);
}

#[test]
fn latency_is_positive_and_grows_with_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.out_dir = dir.path().display().to_string();
    cfg.latency.repetitions = 5;
    let one = measure_latency(|| Ok(()), 5, 1).unwrap();
    assert!(one.is_finite() && one >= 0.0);
    cfg.data.train_per_dataset = 1;
    cfg.data.eval_per_dataset = 1;
    let e = Experiment::new(cfg.clone()).unwrap();
    let a = e.latency().unwrap().median_ms;
    cfg.latency.batch = 2;
    let e = Experiment::new(cfg).unwrap();
    let b = e.latency().unwrap().median_ms;
    assert!(a > 0.0 && b > a, "batch 1: {a} ms, batch 2: {b} ms");
}

#[test]
fn config_overrides_reach_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_run(dir.path());
    assert_eq!(cfg.model.widths, [8, 8, 16, 16]);
    assert!(RunConfig::from_parts(None, &["model.embed_dim=7"]).is_err());
    assert!(RunConfig::from_parts(None, &["trian.steps=1"]).is_err());
}
