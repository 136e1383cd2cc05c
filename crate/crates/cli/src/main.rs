use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use weaksal::data::{load_config, load_manifest, synth_dataset, PseudoConfig, SnetTrainConfig, SynthConfig, WeakConfig};
use weaksal::networks::VocabIndex;
use weaksal::train::{
    evaluate, evaluate_coarse, gen_pseudo, infer, load_snet, load_weak, CoarseKind, SnetTrainer, WeakTrainer,
};

#[derive(Parser)]
#[command(name = "weaksal", version, about = "Saliency detection from weak supervision")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// TOML settings file plus `key.path=value` overrides.
#[derive(Args)]
struct Settings {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting, e.g. `--set weights.lambda=0.02`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic shapes dataset.
    SynthData {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train CNet and PNet on category, caption and unlabelled records.
    TrainWeak {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint; its stored settings are used.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Turn the weak networks' maps into binary pseudo labels.
    GenPseudo {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train SNet on a pseudo-label manifest.
    TrainSnet {
        #[arg(long)]
        pseudo: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        settings: Settings,
    },
    /// Score a checkpoint on a manifest with ground-truth masks.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Score the coarse maps of a weak checkpoint instead of SNet.
        #[arg(long, value_enum)]
        coarse: Option<Coarse>,
    },
    /// Write SNet saliency maps for images.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(required = true)]
        images: Vec<PathBuf>,
    },
}

#[derive(Clone, Copy, clap::ValueEnum)]
enum Coarse {
    Category,
    Caption,
    Fused,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::SynthData { out, settings } => {
            let cfg: SynthConfig = load_config(settings.config.as_deref(), &settings.overrides)?;
            let s = synth_dataset(&out, &cfg)?;
            println!(
                "{} training and {} evaluation records in {}",
                s.train_records,
                s.eval_records,
                out.display()
            );
        }
        Command::TrainWeak { manifest, vocab, out, resume, settings } => {
            let manifest = load_manifest(&manifest)?;
            let mut trainer = match resume {
                Some(ckpt) => {
                    if settings.config.is_some() || !settings.overrides.is_empty() {
                        log::warn!("settings are taken from the checkpoint when resuming");
                    }
                    WeakTrainer::resume(&ckpt, &manifest)?
                }
                None => {
                    let cfg: WeakConfig = load_config(settings.config.as_deref(), &settings.overrides)?;
                    let vocab = VocabIndex::load(&vocab).with_context(|| format!("reading {}", vocab.display()))?;
                    WeakTrainer::new(cfg, &manifest, &vocab)?
                }
            };
            let logs = trainer.run(&out)?;
            if let Some(last) = logs.last() {
                println!("finished at step {}: {}", trainer.step, last.csv_row());
            }
        }
        Command::GenPseudo { checkpoint, manifest, out, settings } => {
            let cfg: PseudoConfig = load_config(settings.config.as_deref(), &settings.overrides)?;
            let bundle = load_weak(&checkpoint)?;
            let s = gen_pseudo(&bundle, &load_manifest(&manifest)?, &cfg, &out)?;
            println!("{} pseudo labels ({} skipped) in {}", s.written, s.skipped, s.manifest.display());
        }
        Command::TrainSnet { pseudo, out, resume, settings } => {
            let mut trainer = match resume {
                Some(ckpt) => SnetTrainer::resume(&ckpt, &pseudo)?,
                None => {
                    let cfg: SnetTrainConfig = load_config(settings.config.as_deref(), &settings.overrides)?;
                    SnetTrainer::new(cfg, &pseudo)?
                }
            };
            let logs = trainer.run(&out)?;
            if let Some(last) = logs.last() {
                println!("finished at step {}: loss {:.4}", trainer.step, last.loss);
            }
        }
        Command::Eval { checkpoint, manifest, out, coarse } => {
            let manifest = load_manifest(&manifest)?;
            let report = match coarse {
                None => {
                    let (snet, store) = load_snet(&checkpoint)?;
                    evaluate(&snet, &store, &manifest, Some(&out))?
                }
                Some(kind) => {
                    let kind = match kind {
                        Coarse::Category => CoarseKind::Category,
                        Coarse::Caption => CoarseKind::Caption,
                        Coarse::Fused => CoarseKind::Fused,
                    };
                    let result = evaluate_coarse(&load_weak(&checkpoint)?, &manifest, kind)?;
                    result.report.write(&out)?;
                    println!("mean IoU at 0.5: {:.4}", result.mean_iou);
                    result.report
                }
            };
            println!("max F {:.4}, MAE {:.4} over {} images", report.max_f, report.mae, report.images);
        }
        Command::Infer { checkpoint, out, images } => {
            let (snet, store) = load_snet(&checkpoint)?;
            let written = infer(&snet, &store, &images, &out)?;
            if written.is_empty() {
                bail!("no maps written");
            }
            println!("{} maps in {}", written.len(), out.display());
        }
    }
    Ok(())
}
