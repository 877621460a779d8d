use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};
use tabtoken_cli::config::resolve;
use tabtoken_cli::{evaluate, exit_code, finetune, grad_check, heatmaps, pretrain, EXIT_USAGE};

/// Tabular in-context classification with feature tokenization.
#[derive(Parser)]
#[command(name = "tabtoken", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config file; keys match the `--key value` overrides.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Field overrides, e.g. `--lr 3e-4 --epochs=10`.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a backbone on synthetic tasks.
    Pretrain(Common),
    /// Fine-tune a backbone with the repeated split protocol.
    Finetune(Common),
    /// Score a checkpoint without updates.
    Evaluate(Common),
    /// Write category and identifier Gram matrices as CSV.
    ExportHeatmaps(Common),
    /// Compare analytic and numerical gradients.
    GradCheck(Common),
}

fn fmt_auc(auc: Option<f64>) -> String {
    auc.map_or_else(|| "undefined".into(), |a| format!("{a:.4}"))
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain(c) => {
            let cfg: pretrain::PretrainRun = resolve(c.config.as_deref(), &c.overrides)?;
            let (_, log) = pretrain::run(&cfg)?;
            if let Some(h) = log.heldout.last() {
                println!("pretrained {} episodes, held-out loss {:.4}", log.episodes.len(), h.loss);
            }
            println!("wrote {}", cfg.out.join("checkpoint.json").display());
        }
        Command::Finetune(c) => {
            let cfg: finetune::FinetuneRun = resolve(c.config.as_deref(), &c.overrides)?;
            for r in finetune::run(&cfg)? {
                println!("{} {}: mean AUC {}", r.dataset, r.variant.as_str(), fmt_auc(r.mean_auc));
            }
        }
        Command::Evaluate(c) => {
            let cfg: evaluate::EvaluateRun = resolve(c.config.as_deref(), &c.overrides)?;
            let r = evaluate::run(&cfg)?;
            println!("{}: mean AUC {}, accuracy {:.4}", r.dataset, fmt_auc(r.mean_auc), r.mean_accuracy);
        }
        Command::ExportHeatmaps(c) => {
            let cfg: heatmaps::HeatmapRun = resolve(c.config.as_deref(), &c.overrides)?;
            let files = heatmaps::run(&cfg)?;
            println!("wrote {}", files.category.display());
            if let Some(p) = files.identifier {
                println!("wrote {}", p.display());
            }
        }
        Command::GradCheck(c) => {
            let cfg: grad_check::GradCheckRun = resolve(c.config.as_deref(), &c.overrides)?;
            let reports = grad_check::run(&cfg)?;
            for r in &reports {
                println!("{}", serde_json::to_string(r)?);
            }
            grad_check::ensure_passed(&reports, cfg.tolerance)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
