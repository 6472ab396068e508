//! Mini-batch optimizers and the training / fine-tuning loops.

use serde::{Deserialize, Serialize};

use crate::data::{batches, Dataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_loss, Network, ParamGradients};
use crate::regularizers::{add_penalty_grad, total_penalty, RegularizerConfig, RegularizerKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum OptimizerConfig {
    SgdNesterov {
        learning_rate: f64,
        #[serde(default = "default_momentum")]
        momentum: f64,
    },
    Adam {
        learning_rate: f64,
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_epsilon")]
        epsilon: f64,
    },
}

fn default_momentum() -> f64 {
    0.9
}

fn default_beta1() -> f64 {
    0.9
}

fn default_beta2() -> f64 {
    0.99
}

fn default_epsilon() -> f64 {
    1e-8
}

impl OptimizerConfig {
    pub fn sgd_nesterov(learning_rate: f64, momentum: f64) -> Self {
        Self::SgdNesterov { learning_rate, momentum }
    }

    /// Adam with `beta1 = 0.9`, `beta2 = 0.99`, `epsilon = 1e-8`.
    pub fn adam(learning_rate: f64) -> Self {
        Self::Adam {
            learning_rate,
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must lie in [0, 1), got {v}")))
            }
        };
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} must be positive, got {v}")))
            }
        };
        match *self {
            Self::SgdNesterov { learning_rate, momentum } => {
                positive("learning rate", learning_rate)?;
                unit("momentum", momentum)
            }
            Self::Adam { learning_rate, beta1, beta2, epsilon } => {
                positive("learning rate", learning_rate)?;
                unit("beta1", beta1)?;
                unit("beta2", beta2)?;
                positive("epsilon", epsilon)
            }
        }
    }
}

/// One Nesterov momentum update.
///
/// The stored parameters are the look-ahead point, so `grads` is the
/// gradient evaluated there: `v <- mu*v - lr*g`, then
/// `p <- p + mu*v - lr*g`. This is the usual reparametrization of
/// `v <- mu*v - lr*grad(p + mu*v); p <- p + v`.
pub fn sgd_nesterov_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], learning_rate: f64, momentum: f64) {
    assert!(params.len() == grads.len() && params.len() == velocity.len(), "optimizer buffer length mismatch");
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v - learning_rate * g;
        *p += momentum * *v - learning_rate * g;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamMoments {
    pub first: Vec<f64>,
    pub second: Vec<f64>,
}

impl AdamMoments {
    pub fn zeros(len: usize) -> Self {
        Self { first: vec![0.0; len], second: vec![0.0; len] }
    }
}

/// One bias-corrected Adam update; `step_count` starts at 1.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    moments: &mut AdamMoments,
    step_count: u64,
    learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
) {
    assert!(step_count >= 1, "Adam step count starts at 1");
    assert!(
        params.len() == grads.len() && params.len() == moments.first.len() && params.len() == moments.second.len(),
        "optimizer buffer length mismatch"
    );
    let t = i32::try_from(step_count).unwrap_or(i32::MAX);
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut moments.first).zip(&mut moments.second) {
        *m = beta1 * *m + (1.0 - beta1) * g;
        *v = beta2 * *v + (1.0 - beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= learning_rate * m_hat / (v_hat.sqrt() + epsilon);
    }
}

/// Optimizer state for every parameter tensor of one network.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    steps: u64,
    state: Vec<Slot>,
}

#[derive(Debug, Clone)]
enum Slot {
    Velocity(Vec<f64>),
    Moments(AdamMoments),
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, net: &Network) -> Result<Self> {
        config.validate()?;
        let state = net
            .params()
            .into_iter()
            .map(|p| match config {
                OptimizerConfig::SgdNesterov { .. } => Slot::Velocity(vec![0.0; p.len()]),
                OptimizerConfig::Adam { .. } => Slot::Moments(AdamMoments::zeros(p.len())),
            })
            .collect();
        Ok(Self { config, steps: 0, state })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, net: &mut Network, grads: &ParamGradients) -> Result<()> {
        let grads = grads.tensors();
        let mut params = net.params_mut();
        if grads.len() != params.len() || params.len() != self.state.len() {
            return Err(Error::Internal(format!(
                "optimizer tracks {} tensors, network has {}, gradients {}",
                self.state.len(),
                params.len(),
                grads.len()
            )));
        }
        self.steps += 1;
        for ((p, g), slot) in params.iter_mut().zip(grads).zip(&mut self.state) {
            match (self.config, slot) {
                (OptimizerConfig::SgdNesterov { learning_rate, momentum }, Slot::Velocity(v)) => {
                    sgd_nesterov_step(p, g.data(), v, learning_rate, momentum)
                }
                (OptimizerConfig::Adam { learning_rate, beta1, beta2, epsilon }, Slot::Moments(m)) => {
                    adam_step(p, g.data(), m, self.steps, learning_rate, beta1, beta2, epsilon)
                }
                _ => unreachable!("slot kind fixed at construction"),
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub regularizer: RegularizerConfig,
}

impl TrainConfig {
    fn validate(&self, net: &Network, data: &Dataset) -> Result<()> {
        self.optimizer.validate()?;
        self.regularizer.validate(net)?;
        if self.batch_size == 0 || self.batch_size > data.len() {
            return Err(Error::Config(format!(
                "batch size {} must lie in 1..={} (dataset size)",
                self.batch_size,
                data.len()
            )));
        }
        if data.sample_shape() != net.input_shape() {
            return Err(Error::shape(
                0,
                format!("dataset samples {:?} do not match network input {:?}", data.sample_shape(), net.input_shape()),
            ));
        }
        if data.class_count() > net.output_dim() {
            return Err(Error::Config(format!(
                "{} classes but the network has {} outputs",
                data.class_count(),
                net.output_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Sample-weighted mean data loss over the epoch's batches.
    pub loss: f64,
    /// Regularizer penalty at the end of the epoch.
    pub penalty: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Minimizes data loss plus the configured penalty. Accuracy in the history
/// is measured on `eval` when given, otherwise on `data`.
pub fn train(mut net: Network, data: &Dataset, config: &TrainConfig, eval: Option<&Dataset>) -> Result<(Network, TrainHistory)> {
    config.validate(&net, data)?;
    let mut optimizer = Optimizer::new(config.optimizer, &net)?;
    let mut history = TrainHistory::default();
    let mut step = 0usize;

    for epoch in 0..config.epochs {
        let mut loss_sum = 0.0;
        for batch in batches(data, config.batch_size, config.seed, epoch as u64) {
            let (inputs, labels) = data.gather(&batch);
            let (outputs, trace) = net.forward(&inputs)?;
            let loss = cross_entropy_loss(&outputs, &labels);
            if let Some(layer) = trace.first_non_finite_layer() {
                return Err(Error::NonFinite { step, layer });
            }
            if !loss.is_finite() {
                return Err(Error::NonFinite { step, layer: net.layers().len() - 1 });
            }
            let mut grads = net.backward(&trace, &labels)?;
            add_penalty_grad(&net, &config.regularizer, &mut grads)?;
            if let Some(layer) = grads.layers.iter().position(|g| g.as_ref().is_some_and(|g| !g.weight.is_finite() || !g.bias.is_finite())) {
                return Err(Error::NonFinite { step, layer });
            }
            optimizer.step(&mut net, &grads)?;
            loss_sum += loss * batch.len() as f64;
            step += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            loss: loss_sum / data.len() as f64,
            penalty: total_penalty(&net, &config.regularizer)?,
            accuracy: evaluate_accuracy(&net, eval.unwrap_or(data))?,
        });
    }
    Ok((net, history))
}

/// Penalty-free retraining; rejects any configured regularizer.
pub fn fine_tune(net: Network, data: &Dataset, config: &TrainConfig, eval: Option<&Dataset>) -> Result<(Network, TrainHistory)> {
    if config.regularizer.kind != RegularizerKind::None {
        return Err(Error::Config(format!(
            "fine-tuning uses the plain data loss; got regularizer {}",
            config.regularizer.kind
        )));
    }
    train(net, data, config, eval)
}

const EVAL_CHUNK: usize = 1000;

/// Fraction of samples whose highest-scoring output is the label. Ties go
/// to the lowest class index.
pub fn evaluate_accuracy(net: &Network, data: &Dataset) -> Result<f64> {
    let mut correct = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_CHUNK) {
        let (inputs, labels) = data.gather(chunk);
        let outputs = net.predict(&inputs)?;
        let classes = outputs.row_len();
        for (row, &label) in outputs.data().chunks_exact(classes).zip(&labels) {
            if argmax(row) == label {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
