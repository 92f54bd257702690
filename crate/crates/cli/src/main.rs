use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use deyo_cli::config::RunConfig;
use deyo_cli::runner;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "deyo",
    about = "Online test-time adaptation experiments: entropy + prediction-drop \
             sample selection on distribution-shifted streams",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Shipped preset: mild, label-shift, bs1, biased, or ablation.
    #[arg(long)]
    preset: Option<String>,
    /// Flat key=value config file (dotted keys, # comments).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Single key=value override; repeatable, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Comma-separated seed list (shorthand for --set seeds=...).
    #[arg(long)]
    seeds: Option<String>,
    /// Model checkpoint to adapt instead of pretraining per seed.
    #[arg(long)]
    model: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.preset {
            Some(name) => RunConfig::preset(name)?,
            None => RunConfig::default(),
        };
        if let Some(path) = &self.config {
            let contents = std::fs::read_to_string(path)
                .with_context(|| format!("reading config file {}", path.display()))?;
            cfg.apply_file(&contents)?;
        }
        for entry in &self.sets {
            let (key, value) = entry
                .split_once('=')
                .with_context(|| format!("--set '{entry}' must be KEY=VALUE"))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(seeds) = &self.seeds {
            cfg.set("seeds", seeds)?;
        }
        if let Some(model) = &self.model {
            cfg.model.checkpoint = Some(model.clone());
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured method over the test stream and write
    /// summary.json, diagnostics.csv, and rc_curve.csv.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for the artifacts.
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Re-run the configured method across values of one hyperparameter and
    /// write sweep.csv.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// One of: tau_plpd, patch_grid, transform_kind, tau_ent, ent0.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long)]
        values: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run all 16 component combinations and write ablation.csv.
    Ablation {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Check the harmful-sample condition against the brute-force
    /// mean-logit-gap oracle; nonzero exit on any counterexample.
    VerifyTheory {
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Pretrain on the configured train split and save a checkpoint.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        /// Checkpoint output path.
        #[arg(long)]
        out: PathBuf,
        /// Seed for data, initialization, and shuffling.
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, out } => {
            let cfg = config.resolve()?;
            let artifacts = runner::run(&cfg, &out)?;
            let agg = &artifacts.summary.aggregate;
            println!(
                "{} on {} ({} seeds): mean avg acc {:.4}, mean worst-group acc {:.4}",
                artifacts.summary.config.method,
                artifacts.summary.config.dataset,
                cfg.seeds.len(),
                agg.mean_avg_acc,
                agg.mean_worst_group_acc
            );
            println!(
                "wrote {}, {}, {}",
                artifacts.summary_path.display(),
                artifacts.diagnostics_path.display(),
                artifacts.rc_curve_path.display()
            );
        }
        Command::Sweep {
            config,
            param,
            values,
            out,
        } => {
            let cfg = config.resolve()?;
            let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
            let rows = runner::sweep(&cfg, &param, &values, &out)?;
            for row in &rows {
                println!(
                    "{}={}: avg acc {:.4}, worst-group acc {:.4}, selected {:.1}",
                    row.param, row.value, row.avg_acc, row.worst_group_acc, row.selected
                );
            }
            println!("wrote {}", out.join("sweep.csv").display());
        }
        Command::Ablation { config, out } => {
            let cfg = config.resolve()?;
            let rows = runner::ablation(&cfg, &out)?;
            for row in &rows {
                println!(
                    "{:<22} avg acc {:.4}, worst-group acc {:.4}",
                    row.label, row.avg_acc, row.worst_group_acc
                );
            }
            println!("wrote {}", out.join("ablation.csv").display());
        }
        Command::VerifyTheory { trials, seed, out } => {
            let report = runner::verify_theory(trials, seed, &out)?;
            println!(
                "{} valid trials, {} agreements, {} disagreements, max route gap {:.3e}",
                report.valid_trials, report.agreements, report.disagreements, report.max_route_gap
            );
            println!("wrote {}", out.join("theory_report.json").display());
            if !report.all_agree() {
                bail!("sign agreement failed: {} counterexamples", report.disagreements);
            }
        }
        Command::Pretrain { config, out, seed } => {
            let cfg = config.resolve()?;
            let acc = runner::pretrain_to_checkpoint(&cfg, seed, &out)?;
            println!(
                "pretrained on {} (seed {seed}): train accuracy {:.4}; wrote {}",
                cfg.dataset.name(),
                acc,
                out.display()
            );
        }
    }
    Ok(())
}
