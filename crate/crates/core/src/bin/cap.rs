//! Command-line harness: corpus generation, clip sampling, training,
//! evaluation, gradient checking, and annotation validation.

use anyhow::{bail, Context, Result};
use cap_core::annotations::{load_corpus, validate};
use cap_core::checkpoint::Checkpoint;
use cap_core::clip_sampler::{sample_corpus, save_manifest, SamplerConfig, Strategy};
use cap_core::config::TrainConfig;
use cap_core::metrics::group_by_attribute;
use cap_core::plots::{plot_pr_curve, plot_score_vs_time};
use cap_core::synthdata::{generate, load_corpus_dir, save_corpus_dir, SynthConfig};
use cap_core::train::{evaluate, resume, save_log, train};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "cap", about = "accident anticipation pipeline harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// JSON config file; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<u32>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    t2i_layers: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<u32>,
    #[arg(long)]
    window_len: Option<u32>,
    #[arg(long)]
    lr_self_attention: Option<f64>,
    #[arg(long)]
    lr_t2i: Option<f64>,
    #[arg(long)]
    lr_gru: Option<f64>,
    #[arg(long)]
    lr_decoder: Option<f64>,
    #[arg(long)]
    placeholder_text_mode: bool,
    #[arg(long)]
    decoder_ablated: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::load(path).context("loading config")?,
            None => TrainConfig::default(),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(epochs);
        set!(seed);
        set!(t2i_layers);
        set!(lambda);
        set!(batch_size);
        set!(window_len);
        set!(lr_self_attention);
        set!(lr_t2i);
        set!(lr_gru);
        set!(lr_decoder);
        if self.placeholder_text_mode {
            cfg.placeholder_text_mode = true;
        }
        if self.decoder_ablated {
            cfg.decoder_ablated = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario corpus.
    Generate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n_videos: usize,
        /// Fraction of accident scenarios.
        #[arg(long, default_value_t = 0.5)]
        positive_frac: f64,
        #[arg(long, default_value_t = 30)]
        n_frames: u32,
        #[arg(long, default_value_t = 10.0)]
        fps: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample clips from an annotation corpus into a manifest.
    Sample {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long, default_value_t = 150)]
        window_len: u32,
        #[arg(long, value_parser = ["mini", "full"], default_value = "mini")]
        strategy: String,
        #[arg(long, default_value_t = 5.0)]
        horizon_s: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validate annotation records and report violations.
    Validate {
        #[arg(long)]
        annotations: PathBuf,
    },
    /// Train a model on a generated corpus directory.
    Train {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Resume from an existing checkpoint.
        #[arg(long)]
        from: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint on a corpus directory.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Replace fact text with the fixed placeholder before encoding.
        #[arg(long)]
        placeholder_text: bool,
        /// Also slice the report by a scene attribute.
        #[arg(long)]
        group_by: Option<String>,
        /// Directory for report JSON and plots.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient verification of every module.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate {
            seed,
            n_videos,
            positive_frac,
            n_frames,
            fps,
            out,
        } => {
            let cfg = SynthConfig { n_frames, fps };
            let scenarios = generate(seed, n_videos, positive_frac, &cfg);
            save_corpus_dir(&scenarios, &out)?;
            let pos = scenarios.iter().filter(|s| s.record.is_accident()).count();
            println!(
                "wrote {} scenarios ({} positive) to {}",
                scenarios.len(),
                pos,
                out.display()
            );
        }
        Command::Sample {
            annotations,
            window_len,
            strategy,
            horizon_s,
            seed,
            out,
        } => {
            let records = load_corpus(&annotations)?;
            let config = SamplerConfig {
                window_len,
                strategy: if strategy == "full" {
                    Strategy::Full
                } else {
                    Strategy::Mini
                },
                horizon_s,
                seed,
            };
            let batch = sample_corpus(&records, &config)?;
            save_manifest(&batch.clips, &out)?;
            for n in &batch.notices {
                eprintln!("notice: {n}");
            }
            println!("wrote {} clips to {}", batch.clips.len(), out.display());
        }
        Command::Validate { annotations } => {
            let records = load_corpus(&annotations)?;
            let mut bad = 0usize;
            for r in &records {
                let violations = validate(r);
                if !violations.is_empty() {
                    bad += 1;
                    for v in violations {
                        println!("{}: {} violates {}", r.video_id, v.field, v.rule);
                    }
                }
            }
            println!("{} records, {} invalid", records.len(), bad);
            if bad > 0 {
                bail!("validation failed");
            }
        }
        Command::Train {
            corpus,
            out,
            from,
            config,
        } => {
            let scenarios = load_corpus_dir(&corpus)?;
            std::fs::create_dir_all(&out)?;
            let outcome = match from {
                Some(path) => {
                    let ckpt = Checkpoint::load(&path)?;
                    resume(&ckpt, &scenarios)?
                }
                None => {
                    let cfg = config.resolve()?;
                    train(&scenarios, &cfg)?
                }
            };
            outcome.checkpoint.save(&out.join("model.ckpt"))?;
            save_log(&outcome.log, &out.join("loss_log.jsonl"))?;
            let last = outcome.log.last().map(|e| e.loss.l_total).unwrap_or(0.0);
            println!(
                "trained {} epochs, {} logged samples, final loss {:.4}",
                outcome.checkpoint.epoch,
                outcome.log.len(),
                last
            );
            println!("checkpoint: {}", out.join("model.ckpt").display());
        }
        Command::Eval {
            corpus,
            checkpoint,
            placeholder_text,
            group_by,
            out,
        } => {
            let scenarios = load_corpus_dir(&corpus)?;
            let ckpt = Checkpoint::load(&checkpoint)?;
            let eval = evaluate(&scenarios, &ckpt.store, &ckpt.config, placeholder_text)?;
            print!("{}", eval.report);
            if let Some(attr) = group_by {
                let records: Vec<_> = scenarios.iter().map(|s| s.record.clone()).collect();
                let fps = records.first().map(|r| r.fps).unwrap_or(10.0);
                for g in group_by_attribute(
                    &eval.predictions,
                    &records,
                    &attr,
                    fps,
                    ckpt.config.video_score_stat,
                )? {
                    print!("{g}");
                }
            }
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(
                    dir.join("report.json"),
                    serde_json::to_string_pretty(&eval.report)?,
                )?;
                plot_pr_curve(
                    &eval.predictions,
                    ckpt.config.video_score_stat,
                    &dir.join("pr_curve.png"),
                )?;
                plot_score_vs_time(&eval.predictions, 8, &dir.join("score_vs_time.png"))?;
                println!("artifacts in {}", dir.display());
            }
        }
        Command::Gradcheck { seed } => {
            let report = cap_core::gradcheck::run(seed);
            print!("{report}");
            if !report.all_pass() {
                bail!("gradient check failed");
            }
        }
    }
    Ok(())
}
