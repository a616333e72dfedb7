use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use masscad::config::PipelineConfig;
use masscad::eval::EvalReport;
use masscad::nnet::ModelKind;
use masscad::pipeline;

#[derive(Parser)]
#[command(name = "masscad", version, about = "Symmetry-aware mass detection pipeline on synthetic mammograms")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Pipeline config (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Root seed; overrides `seed` in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the parallel stages (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; overrides `paths.out`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom dataset and its split.
    Phantom,
    /// Run the candidate detector on every split.
    Candidates,
    /// Cut patch pairs around candidates.
    Patches,
    /// Train one model on the patch archives.
    Train {
        #[arg(long, value_parser = parse_kind)]
        model: ModelKind,
    },
    /// Score the evaluation split and write the report.
    Eval {
        /// Checkpoints to evaluate, reference first (default: every trained model).
        checkpoints: Vec<PathBuf>,
    },
    /// Run every stage in order.
    Pipeline,
    /// Print the effective config in canonical form.
    Config,
}

fn parse_kind(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: masscad::error::Error| e.to_string())
}

fn load_config(g: &Global) -> Result<PipelineConfig> {
    let mut cfg = match &g.config {
        Some(path) => PipelineConfig::from_file(path, g.seed)?,
        None => PipelineConfig::parse_with("", g.seed)?,
    };
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    Ok(cfg)
}

fn print_report(report: &EvalReport) {
    for m in &report.models {
        println!(
            "{}: AUC {:.3} [{:.3}, {:.3}]  CPM image {:.3} [{:.3}, {:.3}]  CPM exam {:.3} [{:.3}, {:.3}]",
            m.model,
            m.auc.value,
            m.auc.ci[0],
            m.auc.ci[1],
            m.cpm_image.value,
            m.cpm_image.ci[0],
            m.cpm_image.ci[1],
            m.cpm_exam.value,
            m.cpm_exam.ci[0],
            m.cpm_exam.ci[1],
        );
        let s = &m.missing_contralateral;
        let fmt = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.3}"));
        println!(
            "  without contra-lateral: {} candidates ({} positive), AUC {}, CPM image {}",
            s.candidates,
            s.positives,
            fmt(s.auc),
            fmt(s.cpm_image)
        );
    }
    for c in &report.comparisons {
        println!(
            "{} vs {}: p(AUC) {:.3}  p(CPM image) {:.3}  p(CPM exam) {:.3}",
            c.candidate, c.reference, c.p_auc, c.p_cpm_image, c.p_cpm_exam
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.global.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    let cfg = load_config(&cli.global)?;
    match cli.command {
        Command::Phantom => {
            let s = pipeline::run_phantom(&cfg)?;
            println!(
                "{} images, {} lesions; exams train/val/test = {}/{}/{}",
                s.images, s.lesions, s.exams[0], s.exams[1], s.exams[2]
            );
        }
        Command::Candidates => {
            for s in pipeline::run_candidates(&cfg)? {
                println!(
                    "{}: {} images, {:.2} candidates/image, lesion recall {:.3}",
                    s.split,
                    s.images,
                    s.per_image(),
                    s.recall()
                );
            }
        }
        Command::Patches => {
            for s in pipeline::run_patches(&cfg)? {
                println!(
                    "{}: {} pairs, {} positive, {} without contra-lateral",
                    s.split, s.pairs, s.positives, s.missing_contralateral
                );
            }
        }
        Command::Train { model } => {
            let s = pipeline::run_train(&cfg, model, &mut |r| {
                eprintln!("epoch {}: loss {:.4}, val AUC {:.4}", r.epoch, r.mean_loss, r.val_auc)
            })?;
            println!(
                "{}: best epoch {} of {}, validation AUC {:.4}",
                s.kind, s.best_epoch, s.epochs_run, s.best_val_auc
            );
        }
        Command::Eval { checkpoints } => print_report(&pipeline::run_eval(&cfg, &checkpoints)?),
        Command::Pipeline => print_report(&pipeline::run_pipeline(&cfg, &mut |line| eprintln!("{line}"))?),
        Command::Config => print!("{}", cfg.to_text()),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
