//! `cpsca`: train, collect attention statistics, prune, fine-tune,
//! evaluate and report.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cpsca_cli::config::PruneConfig;
use cpsca_cli::{cmd_report, pipeline, report, sweep, CliError, ExperimentConfig, Result};
use cpsca_core::baselines::Scorer;
use cpsca_core::data::{write_synthetic, DatasetName};
use cpsca_core::pruner::Ratios;

#[derive(Parser)]
#[command(name = "cpsca", version, about = "Attention-guided channel pruning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Overrides {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run directory; replaces `out_dir` of the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seeds initialization, training and fine-tuning.
    #[arg(long)]
    seed: Option<u64>,
    /// Total training images, taken evenly per class.
    #[arg(long)]
    subset: Option<usize>,
    /// Uniform pruning ratio.
    #[arg(long, conflicts_with = "ratios")]
    ratio: Option<f64>,
    /// TOML file with `uniform = r` and an `[overrides]` table of per-layer ratios.
    #[arg(long)]
    ratios: Option<PathBuf>,
    #[arg(long)]
    scorer: Option<Scorer>,
}

#[derive(Subcommand)]
enum Command {
    /// Build the model with its attention blocks and train it.
    Train(Overrides),
    /// Score the prunable channels of a trained run.
    Collect(Overrides),
    /// Remove attention and prune with the collected scores.
    Prune(Overrides),
    /// Fine-tune the pruned model.
    Finetune(Overrides),
    /// Evaluate every stage and write summary.json.
    Eval(Overrides),
    /// Compare evaluated runs in report.csv and report.txt.
    Report {
        /// Directory receiving the report files.
        #[arg(long)]
        out: PathBuf,
        runs: Vec<PathBuf>,
    },
    /// Train the arrangement, g and G ablation cells.
    Sweep {
        #[command(flatten)]
        o: Overrides,
        /// One epoch per cell.
        #[arg(long)]
        smoke: bool,
    },
    /// Train, collect, prune, fine-tune and evaluate in one go.
    Pipeline(Overrides),
    /// Write a small synthetic dataset in the CIFAR binary layout.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "cifar10")]
        dataset: String,
        #[arg(long, default_value_t = 50)]
        train_per_class: usize,
        #[arg(long, default_value_t = 10)]
        test_per_class: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write an example config.
    Init {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "data")]
        data_root: PathBuf,
    },
}

fn load_config(o: &Overrides) -> Result<ExperimentConfig> {
    let path = o.config.as_ref().ok_or_else(|| CliError::Usage("--config is required".into()))?;
    let mut cfg = ExperimentConfig::read(path)?;
    if let Some(out) = &o.out {
        cfg.out_dir = out.clone();
    }
    if let Some(s) = o.seed {
        cfg.set_seed(s);
    }
    if let Some(n) = o.subset {
        cfg.dataset.subset = Some(n);
    }
    if let Some(s) = o.scorer {
        cfg.prune.get_or_insert_with(|| PruneConfig::new(s, 0.0)).scorer = s;
    }
    if let Some(r) = ratios(o)? {
        let p =
            cfg.prune.as_mut().ok_or_else(|| CliError::Usage("--ratio needs a [prune] section or --scorer".into()))?;
        p.ratio = r.uniform;
        p.overrides = r.overrides;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn ratios(o: &Overrides) -> Result<Option<Ratios>> {
    if let Some(r) = o.ratio {
        return Ok(Some(Ratios::uniform(r)));
    }
    match &o.ratios {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            Ok(Some(toml::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?))
        }
        None => Ok(None),
    }
}

/// Run directory of a later stage: `--out`, else the config's `out_dir`.
fn run_dir(o: &Overrides) -> Result<PathBuf> {
    match (&o.out, &o.config) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(c)) => Ok(ExperimentConfig::read(c)?.out_dir),
        (None, None) => Err(CliError::Usage("give --out RUN_DIR or --config PATH".into())),
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(o) => {
            let run = pipeline::cmd_train(&load_config(&o)?)?;
            println!("trained: {}", run.display());
        }
        Command::Collect(o) => {
            let t = pipeline::cmd_collect(&run_dir(&o)?, o.scorer)?;
            println!("scored {} layers with {}", t.layers.len(), t.scorer);
        }
        Command::Prune(o) => {
            let run = run_dir(&o)?;
            if let Some(s) = o.scorer {
                let cfg = pipeline::run_config(&run)?;
                if cfg.prune.as_ref().map(|p| p.scorer) != Some(s) {
                    return Err(CliError::Usage(format!(
                        "run was collected for another scorer; run `cpsca collect --scorer {s}`"
                    )));
                }
            }
            let c = pipeline::cmd_prune(&run, ratios(&o)?)?;
            println!(
                "params {} -> {}, GFLOPs {:.5} -> {:.5}",
                c.before.params,
                c.after.params,
                c.before.gflops(),
                c.after.gflops()
            );
        }
        Command::Finetune(o) => {
            let m = pipeline::cmd_finetune(&run_dir(&o)?)?;
            match m.metrics.get("test_accuracy") {
                Some(acc) => println!("fine-tuned, test accuracy {:.2}%", acc * 100.0),
                None => println!("fine-tuned"),
            }
        }
        Command::Eval(o) => {
            let s = pipeline::cmd_eval(&run_dir(&o)?)?;
            print!("{}", report::human_table(&report::rows(&[s])).to_text());
        }
        Command::Report { out, runs } => {
            let rows = cmd_report(&runs, &out)?;
            print!("{}", report::human_table(&rows).to_text());
        }
        Command::Sweep { o, smoke } => {
            let r = sweep::cmd_sweep(&load_config(&o)?, smoke)?;
            for t in [&r.arrangements, &r.groups, &r.gn_groups] {
                println!("{}", t.to_text());
            }
        }
        Command::Pipeline(o) => {
            let s = pipeline::cmd_pipeline(&load_config(&o)?)?;
            print!("{}", report::human_table(&report::rows(&[s])).to_text());
        }
        Command::Synth { out, dataset, train_per_class, test_per_class, seed } => {
            let name: DatasetName = serde_json::from_value(serde_json::Value::String(dataset.clone()))
                .map_err(|_| CliError::Usage(format!("unknown dataset `{dataset}`; expected cifar10 or cifar100")))?;
            write_synthetic(name, &out, train_per_class, test_per_class, seed)?;
            println!("wrote {}", out.display());
        }
        Command::Init { out, data_root } => {
            let cfg = ExperimentConfig::example(PathBuf::from("runs/resnet20-cpsca"), data_root);
            std::fs::write(&out, cfg.to_toml()?).map_err(|e| CliError::io(&out, e))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
