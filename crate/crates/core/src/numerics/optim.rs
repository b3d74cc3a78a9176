use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::{Error, Result};

/// Update rule.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    /// Plain gradient descent.
    Sgd,
    /// Gradient descent with per-parameter first and second moment scaling.
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Cosine decay from the base rate to `min_factor · base` over
    /// `total_steps`, constant afterwards.
    Cosine { total_steps: u64, min_factor: f64 },
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule::Constant
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    #[serde(default = "OptimizerKind::adam")]
    pub kind: OptimizerKind,
    pub lr: f64,
    #[serde(default = "LrSchedule::constant")]
    pub schedule: LrSchedule,
}

impl OptimizerConfig {
    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::adam(),
            lr,
            schedule: LrSchedule::Constant,
        }
    }

    pub fn with_cosine(mut self, total_steps: u64, min_factor: f64) -> Self {
        self.schedule = LrSchedule::Cosine {
            total_steps,
            min_factor,
        };
        self
    }
}

/// Optimizer state: step count plus moment accumulators shaped like the
/// parameters they track.
#[derive(Clone, Debug)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    shapes: Vec<Vec<usize>>,
}

impl Optimizer {
    /// A learning rate of exactly zero is accepted and turns every step into
    /// a no-op.
    pub fn new(config: OptimizerConfig, params: &[&Tensor]) -> Result<Self> {
        if !(config.lr >= 0.0) || !config.lr.is_finite() {
            return Err(Error::Config(format!("learning rate {} must be >= 0", config.lr)));
        }
        let adaptive = matches!(config.kind, OptimizerKind::Adam { .. });
        let zeros = |p: &&Tensor| if adaptive { vec![0.0; p.len()] } else { Vec::new() };
        Ok(Self {
            config,
            step: 0,
            first: params.iter().map(zeros).collect(),
            second: params.iter().map(zeros).collect(),
            shapes: params.iter().map(|p| p.shape().to_vec()).collect(),
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Learning rate that the next call to [`Optimizer::step`] will use.
    pub fn current_lr(&self) -> f64 {
        match self.config.schedule {
            LrSchedule::Constant => self.config.lr,
            LrSchedule::Cosine {
                total_steps,
                min_factor,
            } => {
                let progress = if total_steps == 0 {
                    1.0
                } else {
                    (self.step as f64 / total_steps as f64).min(1.0)
                };
                let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.config.lr * (min_factor + (1.0 - min_factor) * cos)
            }
        }
    }

    /// Applies one update in place.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) -> Result<()> {
        if params.len() != self.shapes.len() || grads.len() != self.shapes.len() {
            return Err(Error::Dimension(format!(
                "optimizer tracks {} tensors, got {} params and {} grads",
                self.shapes.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), shape) in params.iter().zip(grads).zip(&self.shapes) {
            if p.shape() != shape.as_slice() || g.shape() != shape.as_slice() {
                return Err(Error::Dimension(format!(
                    "optimizer expected shape {shape:?}, got param {:?} grad {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        if lr == 0.0 {
            return Ok(());
        }
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(grads) {
                    for (w, d) in p.data_mut().iter_mut().zip(g.data()) {
                        *w -= lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for (j, (w, d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                        m[j] = beta1 * m[j] + (1.0 - beta1) * d;
                        v[j] = beta2 * v[j] + (1.0 - beta2) * d * d;
                        let mhat = m[j] / c1;
                        let vhat = v[j] / c2;
                        *w -= lr * mhat / (vhat.sqrt() + eps);
                    }
                }
            }
        }
        if params.iter().any(|p| !p.all_finite()) {
            return Err(Error::NonFinite("parameter update diverged".into()));
        }
        Ok(())
    }
}
