//! Threshold-based removal of whole neurons (dense rows) and channels
//! (conv output channels).
//!
//! Each unit is scored by the absolute sum of its incoming weights (for
//! conv, the sum of its kernels' L1 norms). A layer's threshold is
//! `alpha * max_score`; units scoring strictly below it are removed along
//! with their bias entries and the matching input columns of the next
//! parameterized layer. Surviving weights are copied unchanged.
//!
//! Row and column indices in this module are 0-based.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Dense, Layer, Network};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct RowScores {
    pub layer_index: usize,
    pub scores: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneDecision {
    pub layer_index: usize,
    pub eta_max: f64,
    pub tau: f64,
    pub removed_rows: Vec<usize>,
    pub kept_rows: Vec<usize>,
}

impl PruneDecision {
    pub fn rows_before(&self) -> usize {
        self.removed_rows.len() + self.kept_rows.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub decisions: Vec<PruneDecision>,
    pub original_param_count: usize,
    pub reduced_param_count: usize,
    pub compression_ratio: f64,
}

impl PruneReport {
    pub fn removed_units(&self) -> usize {
        self.decisions.iter().map(|d| d.removed_rows.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub alpha: f64,
    /// Dense/conv layers whose units may be removed. Never the output layer.
    pub prunable_layers: BTreeSet<usize>,
}

impl PruneConfig {
    pub fn new(alpha: f64, prunable_layers: impl IntoIterator<Item = usize>) -> Result<Self> {
        let cfg = Self { alpha, prunable_layers: prunable_layers.into_iter().collect() };
        check_alpha(alpha)?;
        Ok(cfg)
    }

    /// Every dense/conv layer except the last one.
    pub fn all_hidden(net: &Network, alpha: f64) -> Result<Self> {
        let mut params = net.parameterized_indices();
        params.pop();
        Self::new(alpha, params)
    }

    pub fn validate(&self, net: &Network) -> Result<()> {
        check_alpha(self.alpha)?;
        let output = net.parameterized_indices().last().copied();
        for &idx in &self.prunable_layers {
            match net.layer(idx) {
                Some(l) if l.is_parameterized() => {}
                Some(_) => return Err(Error::Config(format!("prunable layer {idx} has no weights (pool/flatten)"))),
                None => return Err(Error::Config(format!("prunable layer {idx} out of range"))),
            }
            if Some(idx) == output {
                return Err(Error::Config(format!("layer {idx} is the output layer and cannot be pruned")));
            }
        }
        Ok(())
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

/// Per-row absolute sums of a 2-D weight, or summed kernel L1 norms of a
/// 4-D conv weight (which is the absolute sum of the whole output slice).
pub fn row_scores(weight: &Tensor, layer_index: usize) -> RowScores {
    assert!(matches!(weight.ndim(), 2 | 4), "row scores need a 2-D or 4-D weight");
    let row = weight.row_len();
    let scores = if row == 0 {
        vec![0.0; weight.shape()[0]]
    } else {
        weight.data().chunks_exact(row).map(|r| r.iter().map(|v| v.abs()).sum()).collect()
    };
    RowScores { layer_index, scores }
}

/// Largest row score. Panics on an empty score list.
pub fn eta_max(scores: &RowScores) -> f64 {
    assert!(!scores.scores.is_empty(), "eta_max of an empty score list");
    scores.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Removes rows scoring strictly below `alpha * eta_max`. An argmax row
/// always survives since `alpha <= 1`.
pub fn select_removed_rows(scores: &RowScores, alpha: f64) -> PruneDecision {
    assert!((0.0..=1.0).contains(&alpha), "alpha must lie in [0, 1], got {alpha}");
    let eta = eta_max(scores);
    let tau = alpha * eta;
    let (removed_rows, kept_rows) = (0..scores.scores.len()).partition(|&i| scores.scores[i] < tau);
    PruneDecision { layer_index: scores.layer_index, eta_max: eta, tau, removed_rows, kept_rows }
}

/// Builds the reduced network. Layers are processed from input to output;
/// each prunable layer is scored on its own trained weights, and the kept
/// unit indices are carried forward (through pooling and flattening) to
/// drop the matching input columns of the next dense/conv layer.
pub fn prune_network(net: &Network, config: &PruneConfig) -> Result<(Network, PruneReport)> {
    config.validate(net)?;

    let mut layers = Vec::with_capacity(net.layers().len());
    let mut decisions = Vec::new();
    // Kept indices along axis 1 of the current activation, when any were removed.
    let mut carried: Option<Vec<usize>> = None;

    for (idx, layer) in net.layers().iter().enumerate() {
        let decision = config
            .prunable_layers
            .contains(&idx)
            .then(|| select_removed_rows(&row_scores(layer.weight().expect("validated"), idx), config.alpha));
        let kept_rows = decision.as_ref().filter(|d| !d.removed_rows.is_empty()).map(|d| d.kept_rows.clone());

        let new_layer = match layer {
            Layer::Dense(d) => {
                let mut weight = d.weight().clone();
                let mut bias = d.bias().clone();
                if let Some(cols) = carried.take() {
                    weight = weight.select_axis1(&cols);
                }
                if let Some(rows) = &kept_rows {
                    weight = weight.select_rows(rows);
                    bias = bias.select_rows(rows);
                }
                carried = kept_rows;
                Layer::Dense(Dense::new(weight, bias, d.activation())?)
            }
            Layer::Conv2d(c) => {
                let mut weight = c.weight().clone();
                let mut bias = c.bias().clone();
                if let Some(channels) = carried.take() {
                    weight = weight.select_axis1(&channels);
                }
                if let Some(rows) = &kept_rows {
                    weight = weight.select_rows(rows);
                    bias = bias.select_rows(rows);
                }
                carried = kept_rows;
                Layer::Conv2d(Conv2d::new(weight, bias, c.stride(), c.padding(), c.activation())?)
            }
            Layer::MaxPool(p) => Layer::MaxPool(*p),
            Layer::Flatten => {
                if let Some(channels) = carried.take() {
                    let input_shape = if idx == 0 { net.input_shape() } else { net.output_shape_of(idx - 1) };
                    let block: usize = input_shape[1..].iter().product();
                    carried = Some(channels.iter().flat_map(|&c| c * block..(c + 1) * block).collect());
                }
                Layer::Flatten
            }
        };
        layers.push(new_layer);
        decisions.extend(decision);
    }
    if carried.is_some() {
        return Err(Error::Internal("pruned units were not consumed by a downstream layer".into()));
    }

    let reduced = Network::new(net.input_shape().to_vec(), layers)
        .map_err(|e| Error::Internal(format!("reduced network is inconsistent: {e}")))?;
    let original_param_count = net.param_count();
    let reduced_param_count = reduced.param_count();
    let report = PruneReport {
        decisions,
        original_param_count,
        reduced_param_count,
        compression_ratio: original_param_count as f64 / reduced_param_count as f64,
    };
    Ok((reduced, report))
}

/// Learnable-parameter count of `original` divided by that of `reduced`.
pub fn compression_ratio(original: &Network, reduced: &Network) -> f64 {
    let reduced_count = reduced.param_count();
    assert!(reduced_count > 0, "reduced network has no parameters");
    original.param_count() as f64 / reduced_count as f64
}

/// `{0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2, 0.05, 0.10, ..., 1.00}`
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid = vec![0.0, 1e-6, 1e-5, 1e-4, 1e-3, 1e-2];
    grid.extend((1..=20).map(|k| k as f64 / 20.0));
    grid
}

#[derive(Debug, Clone)]
pub enum RatioSearch {
    Found { alpha: f64, reduced: Network, report: PruneReport },
    Unreachable { best_alpha: f64, best_ratio: f64 },
}

/// First alpha in `grid` (ascending) whose pruned network reaches
/// `target_ratio`.
pub fn smallest_alpha_for_ratio(
    net: &Network,
    prunable_layers: &BTreeSet<usize>,
    target_ratio: f64,
    grid: &[f64],
) -> Result<RatioSearch> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Config("alpha grid must be non-empty and ascending".into()));
    }
    let mut best = (grid[0], f64::NEG_INFINITY);
    for &alpha in grid {
        let config = PruneConfig::new(alpha, prunable_layers.iter().copied())?;
        let (reduced, report) = prune_network(net, &config)?;
        if report.compression_ratio >= target_ratio {
            return Ok(RatioSearch::Found { alpha, reduced, report });
        }
        if report.compression_ratio > best.1 {
            best = (alpha, report.compression_ratio);
        }
    }
    Ok(RatioSearch::Unreachable { best_alpha: best.0, best_ratio: best.1 })
}
