use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of a per-channel batch normalization layer.
///
/// The affine `gamma`/`beta` pair is learnable and therefore lives with the
/// other parameters; it is passed to [`batch_norm`] as graph nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub epsilon: f64,
    pub mode: Mode,
}

impl BatchNormState {
    pub fn new(channels: usize, momentum: f64, epsilon: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("batch-norm momentum must be in (0,1), got {momentum}")));
        }
        if epsilon <= 0.0 {
            return Err(Error::Config("batch-norm epsilon must be positive".into()));
        }
        Ok(Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum,
            epsilon,
            mode: Mode::Train,
        })
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Normalizes `x` per channel (last axis) over every other axis.
///
/// Train mode uses batch statistics and folds them into the running
/// estimates (unbiased variance); eval mode only reads the running
/// estimates, so it is deterministic in its input.
pub fn batch_norm(g: &mut Graph, x: Var, gamma: Var, beta: Var, state: &mut BatchNormState) -> Result<Var> {
    let (rows, cols) = (g.value(x).rows(), g.value(x).cols());
    if cols != state.channels() {
        return Err(Error::Dimension(format!(
            "batch norm expects {} channels, input has {cols}",
            state.channels()
        )));
    }
    let normalized = match state.mode {
        Mode::Train => {
            if rows < 2 {
                return Err(Error::Config(format!(
                    "train-mode batch norm needs at least 2 positions per channel, got {rows}"
                )));
            }
            let (xhat, mean, var) = g.normalize_columns(x, state.epsilon)?;
            let m = state.momentum;
            let unbias = rows as f64 / (rows as f64 - 1.0);
            for c in 0..cols {
                state.running_mean[c] = (1.0 - m) * state.running_mean[c] + m * mean[c];
                state.running_var[c] = (1.0 - m) * state.running_var[c] + m * var[c] * unbias;
            }
            xhat
        }
        Mode::Eval => {
            let scale: Vec<f64> = state.running_var.iter().map(|v| 1.0 / (v + state.epsilon).sqrt()).collect();
            let shift: Vec<f64> = state.running_mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            g.column_affine(x, &scale, &shift)?
        }
    };
    let scaled = g.mul(normalized, gamma)?;
    g.add(scaled, beta)
}
