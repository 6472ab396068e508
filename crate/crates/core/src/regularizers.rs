//! Standard and guided L1/L2 weight penalties.
//!
//! Guided penalties scale the contribution of weight `(i, j)` (1-based) by
//! `(i + j) / (m + n)` for an `m x n` weight matrix, so high-index rows and
//! columns are pushed toward zero hardest. For convolution weights
//! `[k_out, k_in, d1, d2]` the same coefficient is applied to the L1 norm
//! (or squared L2 norm) of each `d1 x d2` kernel. Biases are never penalized.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Layer, Network, ParamGradients};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RegularizerKind {
    #[default]
    None,
    L1,
    L2,
    GuidedL1,
    GuidedL2,
}

impl RegularizerKind {
    pub const ALL: [RegularizerKind; 5] = [Self::None, Self::L1, Self::L2, Self::GuidedL1, Self::GuidedL2];

    pub fn is_guided(self) -> bool {
        matches!(self, Self::GuidedL1 | Self::GuidedL2)
    }

    fn is_l1(self) -> bool {
        matches!(self, Self::L1 | Self::GuidedL1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::None => "none",
            Self::L1 => "l1",
            Self::L2 => "l2",
            Self::GuidedL1 => "guided-l1",
            Self::GuidedL2 => "guided-l2",
        }
    }
}

impl fmt::Display for RegularizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegularizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown regularizer '{s}' (expected none|l1|l2|guided-l1|guided-l2)")))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct RegularizerConfig {
    pub kind: RegularizerKind,
    /// Penalty factor; must be finite and non-negative.
    #[serde(default)]
    pub lambda: f64,
    /// Indices of the dense/conv layers whose weights are penalized.
    #[serde(default)]
    pub target_layers: BTreeSet<usize>,
}

impl RegularizerConfig {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(kind: RegularizerKind, lambda: f64, target_layers: impl IntoIterator<Item = usize>) -> Result<Self> {
        let cfg = Self { kind, lambda, target_layers: target_layers.into_iter().collect() };
        cfg.check_lambda()?;
        Ok(cfg)
    }

    /// True when the penalty is identically zero.
    pub fn is_inactive(&self) -> bool {
        self.kind == RegularizerKind::None || self.lambda == 0.0 || self.target_layers.is_empty()
    }

    fn check_lambda(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        Ok(())
    }

    /// Checks that every target layer exists and carries weights.
    pub fn validate(&self, net: &Network) -> Result<()> {
        self.check_lambda()?;
        for &idx in &self.target_layers {
            match net.layer(idx) {
                Some(layer) if layer.is_parameterized() => {}
                Some(_) => {
                    return Err(Error::Config(format!(
                        "regularizer target layer {idx} has no weights (pool/flatten)"
                    )))
                }
                None => {
                    return Err(Error::Config(format!(
                        "regularizer target layer {idx} out of range ({} layers)",
                        net.layers().len()
                    )))
                }
            }
        }
        Ok(())
    }
}

/// `(i + j) / (m + n)` for 1-based `i <= m`, `j <= n`.
///
/// Panics if an index is out of range.
pub fn guided_coefficient(i: usize, j: usize, m: usize, n: usize) -> f64 {
    assert!((1..=m).contains(&i), "row index {i} outside 1..={m}");
    assert!((1..=n).contains(&j), "column index {j} outside 1..={n}");
    (i + j) as f64 / (m + n) as f64
}

/// Weight tensors viewed as `rows x cols` units of `unit_len` elements each
/// (1 for dense, `d1 * d2` for conv).
struct UnitLayout {
    rows: usize,
    cols: usize,
    unit_len: usize,
}

impl UnitLayout {
    fn of(weight: &Tensor) -> Self {
        match *weight.shape() {
            [rows, cols] => Self { rows, cols, unit_len: 1 },
            [rows, cols, d1, d2] => Self { rows, cols, unit_len: d1 * d2 },
            ref s => panic!("regularized weights must be 2-D or 4-D, got {s:?}"),
        }
    }

    /// Coefficient for 0-based storage position `(i, j)`.
    #[inline]
    fn coefficient(&self, kind: RegularizerKind, i: usize, j: usize) -> f64 {
        if kind.is_guided() {
            (i + j + 2) as f64 / (self.rows + self.cols) as f64
        } else {
            1.0
        }
    }
}

fn penalty(weight: &Tensor, config: &RegularizerConfig) -> f64 {
    if config.kind == RegularizerKind::None || config.lambda == 0.0 {
        return 0.0;
    }
    let layout = UnitLayout::of(weight);
    let l1 = config.kind.is_l1();
    let mut units = weight.data().chunks_exact(layout.unit_len);
    let mut total = 0.0;
    for i in 0..layout.rows {
        for j in 0..layout.cols {
            let unit = units.next().expect("unit count matches layout");
            let norm: f64 = if l1 {
                unit.iter().map(|v| v.abs()).sum()
            } else {
                unit.iter().map(|v| v * v).sum()
            };
            total += layout.coefficient(config.kind, i, j) * norm;
        }
    }
    config.lambda * total
}

/// Penalty of a dense weight `[m, n]`.
pub fn dense_penalty(weight: &Tensor, config: &RegularizerConfig) -> f64 {
    assert_eq!(weight.ndim(), 2, "dense_penalty expects a 2-D weight");
    penalty(weight, config)
}

/// Penalty of a conv weight `[k_out, k_in, d1, d2]`, using kernel norms.
pub fn conv_penalty(weight: &Tensor, config: &RegularizerConfig) -> f64 {
    assert_eq!(weight.ndim(), 4, "conv_penalty expects a 4-D weight");
    penalty(weight, config)
}

/// Gradient of [`dense_penalty`] or [`conv_penalty`] with respect to the
/// weight. The L1 sub-gradient at exactly zero is taken as zero.
pub fn penalty_grad(weight: &Tensor, config: &RegularizerConfig) -> Tensor {
    let mut grad = Tensor::zeros(weight.shape());
    accumulate_grad(weight, config, grad.data_mut());
    grad
}

fn accumulate_grad(weight: &Tensor, config: &RegularizerConfig, out: &mut [f64]) {
    if config.kind == RegularizerKind::None || config.lambda == 0.0 {
        return;
    }
    let layout = UnitLayout::of(weight);
    let l1 = config.kind.is_l1();
    let mut pairs = weight.data().chunks_exact(layout.unit_len).zip(out.chunks_exact_mut(layout.unit_len));
    for i in 0..layout.rows {
        for j in 0..layout.cols {
            let (unit, g) = pairs.next().expect("unit count matches layout");
            let scale = config.lambda * layout.coefficient(config.kind, i, j);
            for (gv, &w) in g.iter_mut().zip(unit) {
                *gv += if l1 {
                    // signum() maps 0.0 to 1.0; keep exact zeros at zero.
                    if w == 0.0 { 0.0 } else { scale * w.signum() }
                } else {
                    scale * 2.0 * w
                };
            }
        }
    }
}

/// Sum of the penalties of every targeted layer.
pub fn total_penalty(net: &Network, config: &RegularizerConfig) -> Result<f64> {
    config.validate(net)?;
    Ok(config
        .target_layers
        .iter()
        .filter_map(|&idx| net.layers()[idx].weight())
        .map(|w| penalty(w, config))
        .sum())
}

/// Adds the penalty gradient of every targeted layer to `grads`.
pub fn add_penalty_grad(net: &Network, config: &RegularizerConfig, grads: &mut ParamGradients) -> Result<()> {
    config.validate(net)?;
    if config.is_inactive() {
        return Ok(());
    }
    for &idx in &config.target_layers {
        let weight = match &net.layers()[idx] {
            Layer::Dense(d) => d.weight(),
            Layer::Conv2d(c) => c.weight(),
            _ => unreachable!("validated above"),
        };
        let g = grads
            .layer_mut(idx)
            .ok_or_else(|| Error::Internal(format!("no gradient slot for layer {idx}")))?;
        accumulate_grad(weight, config, g.weight.data_mut());
    }
    Ok(())
}
