//! Experiment orchestration: configuration files, the
//! train / prune / fine-tune pipeline, alpha sweeps and their artifacts.
//!
//! Configuration is TOML:
//!
//! ```toml
//! seed = 1
//! dataset = "mnist-idx:data/mnist"      # or "blobs:n=200,classes=4,dim=8,sep=3"
//! train_subset = 10000
//! test_subset = 2000
//! out_dir = "out/experiment-1"
//!
//! [architecture]
//! input_shape = [1, 28, 28]
//! layers = [
//!     { kind = "flatten" },
//!     { kind = "dense", units = 200, activation = "relu" },
//!     { kind = "dense", units = 200, activation = "relu" },
//!     { kind = "dense", units = 10, activation = "softmax" },
//! ]
//!
//! [pretrain]
//! epochs = 15
//! batch_size = 256
//! optimizer = { kind = "sgd-nesterov", learning_rate = 1e-3, momentum = 0.9 }
//! regularizer = { kind = "guided-l1", lambda = 1e-2, target_layers = [2] }
//!
//! [finetune]
//! epochs = 5
//! batch_size = 256
//! optimizer = { kind = "adam", learning_rate = 1e-3, beta1 = 0.9, beta2 = 0.99 }
//!
//! [prune]
//! target_ratio = 2.0          # or: alpha = 0.5
//! prunable_layers = [1, 2]    # default: every hidden dense/conv layer
//! # alpha_grid = [0.0, 0.5, 1.0]
//! ```
//!
//! `seed` drives weight initialization, synthetic data and (unless a stage
//! sets its own `seed`) the mini-batch order of both training stages.

mod checkpoint;
mod heatmap;
mod report;

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use heatmap::{export_heatmap, pgm_bytes, quadrant_mass_ratio, HeatmapFiles};
pub use report::{history_csv, prune_table, report, sweep_csv, ReportFiles, SWEEP_HEADER};

use crate::data::{load_mnist, shuffled_batches, synthetic_blobs, Dataset, Split};
use crate::error::{Error, Result};
use crate::nn::{Architecture, Network};
use crate::pruning::{default_alpha_grid, prune_network, smallest_alpha_for_ratio, PruneConfig, PruneReport, RatioSearch};
use crate::regularizers::{RegularizerConfig, RegularizerKind};
use crate::training::{evaluate_accuracy, fine_tune, train, TrainConfig, TrainHistory};

use report::write_text;

/// Where the samples come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum DatasetSource {
    /// Directory holding the four uncompressed MNIST IDX files.
    MnistIdx(PathBuf),
    Blobs(BlobSpec),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub dim: usize,
    pub separation: f64,
}

impl FromStr for DatasetSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if let Some(dir) = s.strip_prefix("mnist-idx:") {
            if dir.is_empty() {
                return Err(Error::Config("mnist-idx needs a directory".into()));
            }
            return Ok(Self::MnistIdx(PathBuf::from(dir)));
        }
        let Some(spec) = s.strip_prefix("blobs:") else {
            return Err(Error::Config(format!("unknown dataset '{s}' (expected mnist-idx:<dir> or blobs:<spec>)")));
        };
        let mut blob = BlobSpec { n_per_class: 0, classes: 0, dim: 0, separation: 3.0 };
        for pair in spec.split(',').filter(|p| !p.is_empty()) {
            let (key, value) =
                pair.split_once('=').ok_or_else(|| Error::Config(format!("blob option '{pair}' is not key=value")))?;
            let bad = |_| Error::Config(format!("bad value for blob option '{key}': {value}"));
            match key.trim() {
                "n" => blob.n_per_class = value.trim().parse().map_err(bad)?,
                "classes" => blob.classes = value.trim().parse().map_err(bad)?,
                "dim" => blob.dim = value.trim().parse().map_err(bad)?,
                "sep" => blob.separation = value.trim().parse().map_err(|_| Error::Config(format!("bad sep: {value}")))?,
                other => return Err(Error::Config(format!("unknown blob option '{other}' (n, classes, dim, sep)"))),
            }
        }
        if blob.n_per_class == 0 || blob.classes == 0 || blob.dim == 0 {
            return Err(Error::Config(format!("blobs need positive n, classes and dim: '{s}'")));
        }
        Ok(Self::Blobs(blob))
    }
}

impl fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::MnistIdx(dir) => write!(f, "mnist-idx:{}", dir.display()),
            Self::Blobs(b) => write!(f, "blobs:n={},classes={},dim={},sep={}", b.n_per_class, b.classes, b.dim, b.separation),
        }
    }
}

impl TryFrom<String> for DatasetSource {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<DatasetSource> for String {
    fn from(d: DatasetSource) -> String {
        d.to_string()
    }
}

/// How the pruning threshold is chosen.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    /// Smallest grid alpha reaching this compression ratio.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_ratio: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prunable_layers: Option<BTreeSet<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha_grid: Option<Vec<f64>>,
}

impl PruneSpec {
    pub fn grid(&self) -> Vec<f64> {
        self.alpha_grid.clone().unwrap_or_else(default_alpha_grid)
    }

    pub fn layers(&self, net: &Network) -> Result<BTreeSet<usize>> {
        match &self.prunable_layers {
            Some(set) => Ok(set.clone()),
            None => Ok(PruneConfig::all_hidden(net, 0.0)?.prunable_layers),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_subset: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_subset: Option<usize>,
    pub out_dir: PathBuf,
    pub architecture: Architecture,
    /// Pre-training; its `regularizer` is the experiment's penalty.
    pub pretrain: TrainConfig,
    /// Penalty-free retraining of the reduced network.
    pub finetune: TrainConfig,
    #[serde(default)]
    pub prune: PruneSpec,
}

impl ExperimentConfig {
    /// Parses TOML, filling each stage's `seed` from the top-level seed when
    /// the stage does not set one.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut table: toml::Table = text.parse().map_err(|e| Error::Config(format!("config is not valid TOML: {e}")))?;
        let seed = table.get("seed").cloned().unwrap_or(toml::Value::Integer(0));
        for stage in ["pretrain", "finetune"] {
            if let Some(toml::Value::Table(t)) = table.get_mut(stage) {
                t.entry("seed").or_insert_with(|| seed.clone());
            }
        }
        table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(detail) => Error::format(path, detail),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config does not serialize: {e}")))
    }

    pub fn regularizer(&self) -> &RegularizerConfig {
        &self.pretrain.regularizer
    }

    /// Sets the experiment seed and both stage seeds.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.pretrain.seed = seed;
        self.finetune.seed = seed;
    }

    /// Checks everything that can be checked before any data is loaded.
    pub fn validate(&self) -> Result<()> {
        let net = self.architecture.build(self.seed)?;
        let reg = self.regularizer();
        reg.validate(&net)?;
        if reg.kind != RegularizerKind::None && reg.lambda > 0.0 && reg.target_layers.is_empty() {
            return Err(Error::Config(format!("regularizer {} has no target layers", reg.kind)));
        }
        if self.finetune.regularizer.kind != RegularizerKind::None {
            return Err(Error::Config("the fine-tune stage must not carry a regularizer".into()));
        }
        match (self.prune.alpha, self.prune.target_ratio) {
            (Some(_), Some(_)) => return Err(Error::Config("prune: set either alpha or target_ratio, not both".into())),
            (None, Some(r)) if !(r.is_finite() && r >= 1.0) => {
                return Err(Error::Config(format!("target ratio must be >= 1, got {r}")))
            }
            _ => {}
        }
        let grid = self.prune.grid();
        if grid.is_empty() || grid.iter().any(|a| !(0.0..=1.0).contains(a)) {
            return Err(Error::Config("alpha grid must be non-empty with values in [0, 1]".into()));
        }
        PruneConfig::new(self.prune.alpha.unwrap_or(0.0), self.prune.layers(&net)?)?.validate(&net)?;
        if let DatasetSource::MnistIdx(dir) = &self.dataset {
            for split in ["train", "t10k"] {
                for kind in ["images-idx3", "labels-idx1"] {
                    let file = dir.join(format!("{split}-{kind}-ubyte"));
                    if !file.is_file() {
                        return Err(Error::Config(format!("dataset file {} does not exist", file.display())));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Command-line style overrides applied on top of a loaded config.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub alpha: Option<f64>,
    pub lambda: Option<f64>,
    pub regularizer: Option<RegularizerKind>,
    pub target_ratio: Option<f64>,
    pub out_dir: Option<PathBuf>,
    pub dataset: Option<DatasetSource>,
    pub subset: Option<usize>,
}

impl Overrides {
    /// `alpha` and `target_ratio` replace each other; `subset` limits the
    /// training set.
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(seed) = self.seed {
            config.set_seed(seed);
        }
        if let Some(alpha) = self.alpha {
            config.prune.alpha = Some(alpha);
            config.prune.target_ratio = None;
        }
        if let Some(ratio) = self.target_ratio {
            config.prune.target_ratio = Some(ratio);
            config.prune.alpha = None;
        }
        if let Some(lambda) = self.lambda {
            config.pretrain.regularizer.lambda = lambda;
        }
        if let Some(kind) = self.regularizer {
            config.pretrain.regularizer.kind = kind;
        }
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(dataset) = &self.dataset {
            config.dataset = dataset.clone();
        }
        if let Some(k) = self.subset {
            config.train_subset = Some(k);
        }
    }
}

/// Train and test sets for `config`, cut to the configured subset sizes.
pub fn load_datasets(config: &ExperimentConfig) -> Result<(Dataset, Dataset)> {
    let (train, test) = match &config.dataset {
        DatasetSource::MnistIdx(dir) => (load_mnist(dir, Split::Train)?, load_mnist(dir, Split::Test)?),
        DatasetSource::Blobs(b) => {
            // Blobs are generated grouped by class, so shuffle before any subsetting.
            let make = |seed: u64| -> Result<Dataset> {
                let d = synthetic_blobs(b.n_per_class, b.classes, b.dim, b.separation, seed)?;
                let order = shuffled_batches(d.len(), d.len(), seed, 0).remove(0);
                let (inputs, labels) = d.gather(&order);
                Dataset::new(inputs, labels, d.class_count())
            };
            (make(config.seed)?, make(config.seed.wrapping_add(1))?)
        }
    };
    let cut = |d: Dataset, k: Option<usize>| match k {
        Some(k) => d.subset(k),
        None => Ok(d),
    };
    Ok((cut(train, config.train_subset)?, cut(test, config.test_subset)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub compression_ratio: f64,
    pub accuracy_before_finetune: f64,
    pub accuracy_after_finetune: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub pretrained: Network,
    /// Pruned network before fine-tuning.
    pub reduced: Network,
    pub finetuned: Network,
    pub report: PruneReport,
    pub row: SweepRow,
    pub pretrain_history: TrainHistory,
    pub finetune_history: TrainHistory,
}

/// Marker present in an output directory until every artifact is written.
pub const INCOMPLETE_MARKER: &str = "INCOMPLETE";

struct OutputDir {
    root: PathBuf,
}

impl OutputDir {
    fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
        let dir = Self { root: root.to_path_buf() };
        write_text(&dir.marker(), "running\n")?;
        Ok(dir)
    }

    fn marker(&self) -> PathBuf {
        self.root.join(INCOMPLETE_MARKER)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Records the failure in the marker and passes the error through.
    fn fail(&self, err: Error) -> Error {
        let _ = fs::write(self.marker(), format!("{err}\n"));
        err
    }

    fn finish(self) -> Result<()> {
        let marker = self.marker();
        fs::remove_file(&marker).map_err(|e| Error::io(marker, e))
    }
}

fn staged<T>(stage: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage))
}

/// Pre-trains with the configured penalty and returns the train/test data
/// alongside, so callers need not reload it.
pub fn pretrain(config: &ExperimentConfig) -> Result<(Network, TrainHistory, Dataset, Dataset)> {
    staged("config", config.validate())?;
    let (train_set, test_set) = staged("data", load_datasets(config))?;
    let net = staged("build", config.architecture.build(config.seed))?;
    let (net, history) = staged("pretrain", train(net, &train_set, &config.pretrain, Some(&test_set)))?;
    Ok((net, history, train_set, test_set))
}

/// Prunes `net` at the spec's fixed alpha, or at the smallest grid alpha
/// reaching its target ratio. Returns the alpha used.
pub fn apply_prune_spec(spec: &PruneSpec, net: &Network) -> Result<(f64, Network, PruneReport)> {
    let layers = spec.layers(net)?;
    if let Some(target) = spec.target_ratio {
        let mut grid = spec.grid();
        grid.sort_by(f64::total_cmp);
        return match smallest_alpha_for_ratio(net, &layers, target, &grid)? {
            RatioSearch::Found { alpha, reduced, report } => Ok((alpha, reduced, report)),
            RatioSearch::Unreachable { best_alpha, best_ratio } => Err(Error::Config(format!(
                "compression ratio {target} is unreachable on the alpha grid (best {best_ratio} at alpha {best_alpha})"
            ))),
        };
    }
    let alpha = spec.alpha.unwrap_or(0.0);
    let (reduced, report) = prune_network(net, &PruneConfig::new(alpha, layers)?)?;
    Ok((alpha, reduced, report))
}

/// Prunes a pre-trained network at `alpha` and fine-tunes the result.
fn prune_and_finetune(
    config: &ExperimentConfig,
    pretrained: &Network,
    alpha: f64,
    train_set: &Dataset,
    test_set: &Dataset,
) -> Result<(Network, Network, PruneReport, SweepRow, TrainHistory)> {
    let layers = staged("prune", config.prune.layers(pretrained))?;
    let (reduced, report) = staged("prune", PruneConfig::new(alpha, layers).and_then(|c| prune_network(pretrained, &c)))?;
    let before = staged("evaluate", evaluate_accuracy(&reduced, test_set))?;
    let (finetuned, history) = staged("finetune", fine_tune(reduced.clone(), train_set, &config.finetune, Some(test_set)))?;
    let after = staged("evaluate", evaluate_accuracy(&finetuned, test_set))?;
    let row = SweepRow {
        alpha,
        compression_ratio: report.compression_ratio,
        accuracy_before_finetune: before,
        accuracy_after_finetune: after,
    };
    Ok((reduced, finetuned, report, row, history))
}

/// Runs pre-train, threshold prune, fine-tune and evaluation, writing
/// checkpoints, histories, the pruning table and a one-row CSV to
/// `config.out_dir`. An `INCOMPLETE` file holds the failure message if
/// any stage fails.
pub fn run_pipeline(config: &ExperimentConfig) -> Result<PipelineOutput> {
    let out = OutputDir::open(&config.out_dir)?;
    pipeline_inner(config, &out).map_err(|e| out.fail(e)).and_then(|o| {
        out.finish()?;
        Ok(o)
    })
}

fn pipeline_inner(config: &ExperimentConfig, out: &OutputDir) -> Result<PipelineOutput> {
    write_text(&out.path("config.toml"), &config.to_toml_string()?)?;
    let (pretrained, pretrain_history, train_set, test_set) = pretrain(config)?;
    staged("save", save_checkpoint(&pretrained, out.path("pretrained.ckpt")))?;
    write_text(&out.path("pretrain_history.csv"), &history_csv(&pretrain_history))?;

    let (alpha, _, _) = staged("prune", apply_prune_spec(&config.prune, &pretrained))?;
    let (reduced, finetuned, report, row, finetune_history) =
        prune_and_finetune(config, &pretrained, alpha, &train_set, &test_set)?;

    staged("save", save_checkpoint(&reduced, out.path("reduced.ckpt")))?;
    staged("save", save_checkpoint(&finetuned, out.path("finetuned.ckpt")))?;
    write_text(&out.path("finetune_history.csv"), &history_csv(&finetune_history))?;
    let result = SweepResult { rows: vec![row] };
    staged("report", report::report(&result, &report, &out.root))?;
    write_json(&out.path("prune_report.json"), &report)?;
    write_json(&out.path("sweep.json"), &result)?;
    Ok(PipelineOutput { pretrained, reduced, finetuned, report, row, pretrain_history, finetune_history })
}

/// Pre-trains once, then prunes and fine-tunes independently at every
/// alpha in `grid`. Each grid point's artifacts go to
/// `out_dir/sweep/point-NN`; the table rows follow grid order.
pub fn sweep(config: &ExperimentConfig, grid: &[f64]) -> Result<SweepResult> {
    let out = OutputDir::open(&config.out_dir)?;
    sweep_inner(config, grid, &out).map_err(|e| out.fail(e)).and_then(|r| {
        out.finish()?;
        Ok(r)
    })
}

fn sweep_inner(config: &ExperimentConfig, grid: &[f64], out: &OutputDir) -> Result<SweepResult> {
    write_text(&out.path("config.toml"), &config.to_toml_string()?)?;
    let (pretrained, history, train_set, test_set) = pretrain(config)?;
    staged("save", save_checkpoint(&pretrained, out.path("pretrained.ckpt")))?;
    write_text(&out.path("pretrain_history.csv"), &history_csv(&history))?;
    let result = sweep_from(config, &pretrained, grid, &train_set, &test_set, Some(&out.path("sweep")))?;
    write_text(&out.path("sweep.csv"), &sweep_csv(&result))?;
    write_json(&out.path("sweep.json"), &result)?;
    Ok(result)
}

/// Sweep over an already pre-trained network. The network is only read;
/// every grid point starts from the same weights.
pub fn sweep_from(
    config: &ExperimentConfig,
    pretrained: &Network,
    grid: &[f64],
    train_set: &Dataset,
    test_set: &Dataset,
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    let mut result = SweepResult::default();
    for (k, &alpha) in grid.iter().enumerate() {
        let (_, finetuned, report, row, history) = prune_and_finetune(config, pretrained, alpha, train_set, test_set)?;
        if let Some(dir) = out_dir {
            let point = dir.join(format!("point-{k:02}"));
            fs::create_dir_all(&point).map_err(|e| Error::io(&point, e))?;
            staged("save", save_checkpoint(&finetuned, point.join("finetuned.ckpt")))?;
            write_text(&point.join("prune_report.txt"), &prune_table(&report))?;
            write_text(&point.join("finetune_history.csv"), &history_csv(&history))?;
        }
        result.rows.push(row);
    }
    Ok(result)
}

pub(crate) fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Internal(format!("json: {e}")))?;
    write_text(path, &(text + "\n"))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}
