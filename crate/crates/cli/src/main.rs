//! `rgbx` command-line driver.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rgbx_core::config::RunConfig;
use rgbx_core::experiment::{mean_miou, Experiment};
use serde_json::json;

#[derive(Parser)]
#[command(name = "rgbx", version, about = "Prompt-guided RGB-X segmentation on synthetic multi-modal data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; defaults are used for anything it omits.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Dotted overrides such as `train.steps=500` or `model.dsrm.variant=i`.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Contrastively train the per-modality adapters and save the encoder.
    PretrainMaclip(Common),
    /// Joint training on every configured dataset.
    Train(Common),
    /// Fine-tune the joint checkpoint on `finetune.dataset`.
    Finetune(Common),
    /// Evaluate `eval.checkpoint` on the held-out split.
    Eval(Common),
    /// Sweep refinement variants and prompt pairings.
    Ablate(Common),
    /// Median forward latency of the configured model.
    Latency(Common),
    /// Write predicted-label colour overlays.
    Export(Common),
    /// Print the fully resolved configuration.
    ShowConfig(Common),
}

fn experiment(c: &Common) -> Result<Experiment> {
    let cfg = RunConfig::load(c.config.as_deref(), &c.overrides).context("loading configuration")?;
    std::fs::create_dir_all(cfg.out_dir())?;
    std::fs::write(cfg.out_dir().join("config.toml"), cfg.to_toml()?)?;
    Ok(Experiment::new(cfg)?)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    Ok(match cli.command {
        Command::PretrainMaclip(c) => {
            let mut e = experiment(&c)?;
            let r = e.pretrain_maclip()?;
            json!({
                "checkpoint": e.maclip_path(),
                "final_loss": r.losses.last(),
                "temperature": r.temperature,
                "separation": r.separation,
            })
        }
        Command::Train(c) => {
            let mut e = experiment(&c)?;
            let r = e.joint_train()?;
            let per: Vec<_> = r.eval.iter().map(|d| json!({"dataset": d.dataset, "miou": d.report.miou})).collect();
            json!({
                "checkpoint": e.joint_path(),
                "train_mean_miou": r.train_mean,
                "eval_mean_miou": r.eval_mean,
                "eval": per,
                "seconds": r.seconds,
            })
        }
        Command::Finetune(c) => {
            let mut e = experiment(&c)?;
            let r = e.finetune()?;
            json!({"checkpoint": e.finetune_path(&r.dataset), "dataset": r.dataset, "before": r.before, "after": r.after})
        }
        Command::Eval(c) => {
            let mut e = experiment(&c)?;
            let r = e.eval()?;
            let per: Vec<_> = r.iter().map(|d| json!({"dataset": d.dataset, "miou": d.report.miou, "per_class": d.report.per_class})).collect();
            json!({"mean_miou": mean_miou(&r), "datasets": per, "log": e.log.path()})
        }
        Command::Ablate(c) => {
            let mut e = experiment(&c)?;
            json!({"runs": e.ablate()?})
        }
        Command::Latency(c) => {
            let e = experiment(&c)?;
            serde_json::to_value(e.latency()?)?
        }
        Command::Export(c) => {
            let mut e = experiment(&c)?;
            json!({"written": e.export()?})
        }
        Command::ShowConfig(c) => {
            let cfg = RunConfig::load(c.config.as_deref(), &c.overrides)?;
            print!("{}", cfg.to_toml()?);
            return Ok(serde_json::Value::Null);
        }
    })
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let out = run(Cli::parse())?;
    if !out.is_null() {
        println!("{}", serde_json::to_string_pretty(&out)?);
    }
    Ok(())
}
