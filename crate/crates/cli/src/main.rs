//! Command-line front end for training, pruning and sweeping.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use guided_prune::experiments::{
    self, apply_prune_spec, export_heatmap, history_csv, load_checkpoint, load_datasets, prune_table, read_json,
    save_checkpoint, sweep_csv, DatasetSource, ExperimentConfig, Overrides, PruneSpec, SweepResult,
};
use guided_prune::nn::Network;
use guided_prune::pruning::PruneReport;
use guided_prune::regularizers::RegularizerKind;
use guided_prune::training::{evaluate_accuracy, fine_tune};

#[derive(Parser)]
#[command(name = "guided-prune", version, about = "Guided regularization and threshold pruning for small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment configuration (TOML)
    #[arg(long)]
    config: Option<PathBuf>,

    #[arg(long)]
    seed: Option<u64>,

    /// Fixed pruning threshold factor in [0, 1]
    #[arg(long, conflicts_with = "target_ratio")]
    alpha: Option<f64>,

    /// Regularizer penalty factor
    #[arg(long)]
    lambda: Option<f64>,

    /// none | l1 | l2 | guided-l1 | guided-l2
    #[arg(long)]
    regularizer: Option<RegularizerKind>,

    /// Prune at the smallest grid alpha reaching this compression ratio
    #[arg(long)]
    target_ratio: Option<f64>,

    #[arg(long)]
    out_dir: Option<PathBuf>,

    /// mnist-idx:<dir> | blobs:n=..,classes=..,dim=..,sep=..
    #[arg(long)]
    dataset: Option<DatasetSource>,

    /// Use only the first K training samples
    #[arg(long)]
    subset: Option<usize>,
}

impl Common {
    fn overrides(&self) -> Overrides {
        Overrides {
            seed: self.seed,
            alpha: self.alpha,
            lambda: self.lambda,
            regularizer: self.regularizer,
            target_ratio: self.target_ratio,
            out_dir: self.out_dir.clone(),
            dataset: self.dataset.clone(),
            subset: self.subset,
        }
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        let Some(path) = &self.config else { bail!("--config is required for this command") };
        let mut config = ExperimentConfig::load(path)?;
        self.overrides().apply(&mut config);
        Ok(config)
    }

    fn out_dir(&self, config: Option<&ExperimentConfig>) -> PathBuf {
        self.out_dir.clone().or_else(|| config.map(|c| c.out_dir.clone())).unwrap_or_else(|| PathBuf::from("."))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Pre-train with the configured regularizer
    Train {
        #[command(flatten)]
        common: Common,
    },
    /// Remove low-scoring neurons/channels from a checkpoint
    Prune {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out-dir>/pretrained.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain a (reduced) checkpoint without a penalty
    Finetune {
        #[command(flatten)]
        common: Common,
        /// Defaults to <out-dir>/reduced.ckpt
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Pre-train, prune, fine-tune and evaluate in one go
    Pipeline {
        #[command(flatten)]
        common: Common,
    },
    /// Pre-train once, then prune and fine-tune at every grid alpha
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated alphas; defaults to the config grid
        #[arg(long, value_delimiter = ',')]
        grid: Option<Vec<f64>>,
    },
    /// Export |W| of one dense layer as CSV and PGM
    Heatmap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Layer index (counting every layer, including flatten/pool)
        #[arg(long)]
        layer: usize,
        /// Output path without extension; defaults to <out-dir>/heatmap-layer<N>
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Rebuild sweep.csv and prune_report.txt from a run's JSON results
    Report {
        #[command(flatten)]
        common: Common,
        /// Directory holding sweep.json and prune_report.json
        #[arg(long)]
        input: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common } => train(&common),
        Command::Prune { common, checkpoint } => prune(&common, checkpoint),
        Command::Finetune { common, checkpoint } => finetune(&common, checkpoint),
        Command::Pipeline { common } => pipeline(&common),
        Command::Sweep { common, grid } => sweep(&common, grid),
        Command::Heatmap { common, checkpoint, layer, output } => heatmap(&common, &checkpoint, layer, output),
        Command::Report { common, input } => report(&common, &input),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(common: &Common) -> Result<()> {
    let config = common.experiment()?;
    create_dir(&config.out_dir)?;
    let (net, history, _, test_set) = experiments::pretrain(&config)?;
    save_checkpoint(&net, config.out_dir.join("pretrained.ckpt"))?;
    write(&config.out_dir.join("pretrain_history.csv"), &history_csv(&history))?;
    println!("parameters: {}", net.param_count());
    println!("test accuracy: {}", evaluate_accuracy(&net, &test_set)?);
    Ok(())
}

fn prune(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let config = common.config.as_ref().map(|_| common.experiment()).transpose()?;
    let out_dir = common.out_dir(config.as_ref());
    let spec = match &config {
        Some(c) => c.prune.clone(),
        None => {
            if common.alpha.is_none() && common.target_ratio.is_none() {
                bail!("prune needs --alpha, --target-ratio or a --config with a [prune] table");
            }
            PruneSpec { alpha: common.alpha, target_ratio: common.target_ratio, ..PruneSpec::default() }
        }
    };
    let input = checkpoint.unwrap_or_else(|| out_dir.join("pretrained.ckpt"));
    let net = load_checkpoint(&input)?;
    let (alpha, reduced, report) = apply_prune_spec(&spec, &net)?;
    create_dir(&out_dir)?;
    save_checkpoint(&reduced, out_dir.join("reduced.ckpt"))?;
    let table = prune_table(&report);
    write(&out_dir.join("prune_report.txt"), &table)?;
    write(&out_dir.join("prune_report.json"), &serde_json::to_string_pretty(&report)?)?;
    println!("alpha: {alpha}");
    print!("{table}");
    Ok(())
}

fn finetune(common: &Common, checkpoint: Option<PathBuf>) -> Result<()> {
    let config = common.experiment()?;
    let input = checkpoint.unwrap_or_else(|| config.out_dir.join("reduced.ckpt"));
    let net = load_checkpoint(&input)?;
    let (train_set, test_set) = load_datasets(&config)?;
    let before = evaluate_accuracy(&net, &test_set)?;
    let (net, history) = fine_tune(net, &train_set, &config.finetune, Some(&test_set))?;
    create_dir(&config.out_dir)?;
    save_checkpoint(&net, config.out_dir.join("finetuned.ckpt"))?;
    write(&config.out_dir.join("finetune_history.csv"), &history_csv(&history))?;
    println!("test accuracy before: {before}");
    println!("test accuracy after:  {}", evaluate_accuracy(&net, &test_set)?);
    Ok(())
}

fn pipeline(common: &Common) -> Result<()> {
    let config = common.experiment()?;
    let out = experiments::run_pipeline(&config)?;
    print!("{}", prune_table(&out.report));
    println!("alpha: {}", out.row.alpha);
    println!("test accuracy before fine-tune: {}", out.row.accuracy_before_finetune);
    println!("test accuracy after fine-tune:  {}", out.row.accuracy_after_finetune);
    println!("outputs: {}", config.out_dir.display());
    Ok(())
}

fn sweep(common: &Common, grid: Option<Vec<f64>>) -> Result<()> {
    let config = common.experiment()?;
    let grid = grid.unwrap_or_else(|| config.prune.grid());
    let result = experiments::sweep(&config, &grid)?;
    print!("{}", sweep_csv(&result));
    Ok(())
}

fn heatmap(common: &Common, checkpoint: &Path, layer: usize, output: Option<PathBuf>) -> Result<()> {
    let net: Network = load_checkpoint(checkpoint)?;
    let weight = net
        .layer(layer)
        .and_then(|l| l.weight())
        .with_context(|| format!("layer {layer} has no weight matrix"))?;
    let out_dir = common.out_dir(None);
    let stem = output.unwrap_or_else(|| out_dir.join(format!("heatmap-layer{layer}")));
    if let Some(parent) = stem.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let files = export_heatmap(weight, &stem)?;
    println!("{}", files.csv.display());
    println!("{}", files.pgm.display());
    Ok(())
}

fn report(common: &Common, input: &Path) -> Result<()> {
    let result: SweepResult = read_json(input.join("sweep.json"))?;
    let prune: PruneReport = read_json(input.join("prune_report.json"))?;
    let out_dir = common.out_dir.clone().unwrap_or_else(|| input.to_path_buf());
    let files = experiments::report(&result, &prune, out_dir)?;
    println!("{}", files.sweep_csv.display());
    println!("{}", files.prune_table.display());
    Ok(())
}
