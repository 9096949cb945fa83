use log::{error, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{forward, Activity, Model};
use super::optim::{clip_grad_norm, Adam, AdamConfig};
use super::scaler::Scaler;
use super::{metrics, mse_loss};
use crate::data::Window;
use crate::encoder::EventSeries;
use crate::error::{Error, Result};
use crate::neuron::SpikeMode;
use crate::numerics::{Graph, Mode};
use crate::params::Bindings;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Joint gradient-norm cap; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { adam: AdamConfig::default(), batch_size: 16, epochs: 50, seed: 0, grad_clip: None }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if c <= 0.0 {
                return Err(Error::Config(format!("gradient clip must be positive, got {c}")));
            }
        }
        self.adam.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub val_mae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the lowest validation MSE (training loss
    /// when there is no validation split).
    pub model: Model,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub mae: f64,
    pub n_queries: usize,
}

pub fn flatten(nested: &[Vec<Vec<f64>>]) -> Vec<f64> {
    nested.iter().flatten().flatten().copied().collect()
}

fn truths(windows: &[Window]) -> Vec<f64> {
    windows.iter().flat_map(|w| w.truths.iter().flatten().copied()).collect()
}

/// Fits the target scaler on `train`, then runs seeded minibatch Adam.
pub fn train(mut model: Model, train: &[Window], val: &[Window], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    model.scaler = Scaler::fit(train)?;
    let scaled = train.iter().map(|w| model.scaler.apply(w)).collect::<Result<Vec<_>>>()?;
    let mut adam = Adam::new(cfg.adam)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, Model)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        model.norms.set_mode(Mode::Train);
        let mut total = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EventSeries> = chunk.iter().map(|&i| &scaled[i].history).collect();
            let queries: Vec<&[Vec<f64>]> = chunk.iter().map(|&i| scaled[i].queries.as_slice()).collect();
            let target: Vec<f64> = chunk.iter().flat_map(|&i| scaled[i].truths.iter().flatten().copied()).collect();
            let (loss, g, p) = match run_step(&mut model, &batch, &queries, &target) {
                Ok(r) => r,
                Err(e) => {
                    error!("epoch {epoch}, batch {bi}: training step aborted: {e}");
                    return Err(e);
                }
            };
            let mut grads = p.grads(&g);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(&mut grads, c);
            }
            adam.step(&mut model.params, &grads)?;
            total += loss;
            batches += 1;
        }
        let train_loss = total / batches as f64;
        let (val_mse, val_mae) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            let m = evaluate(&mut model, val, cfg.batch_size)?;
            (m.mse, m.mae)
        };
        info!("epoch {epoch}: train loss {train_loss:.6}, val mse {val_mse:.6}, val mae {val_mae:.6}");
        history.push(EpochRecord { epoch, train_loss, val_mse, val_mae });
        let score = if val.is_empty() { train_loss } else { val_mse };
        if best.as_ref().is_none_or(|(s, _, _)| score < *s) {
            best = Some((score, epoch, model.clone()));
        }
    }
    let (best_epoch, model) = match best {
        Some((_, e, m)) => (e, m),
        None => (0, model),
    };
    Ok(TrainOutcome { model, history, best_epoch })
}

fn run_step(
    model: &mut Model,
    batch: &[&EventSeries],
    queries: &[&[Vec<f64>]],
    target: &[f64],
) -> Result<(f64, Graph, Bindings)> {
    let mut g = Graph::new();
    let p = Bindings::bind(&mut g, &model.params)?;
    let out = forward(&mut g, &p, &model.config, &mut model.norms, batch, queries, SpikeMode::Exact)?;
    let loss = mse_loss(&mut g, out.predictions, target, &out.queries.counts)?;
    g.backward(loss)?;
    Ok((g.value(loss).item(), g, p))
}

/// Eval-mode forecasts in data units, `[window][variate][query]`.
pub fn predict_windows(
    model: &mut Model,
    windows: &[Window],
    batch_size: usize,
) -> Result<(Vec<Vec<Vec<f64>>>, Activity)> {
    let mut out = Vec::with_capacity(windows.len());
    let mut activity = Activity::default();
    for chunk in windows.chunks(batch_size.max(1)) {
        let scaled = chunk.iter().map(|w| model.scaler.apply(w)).collect::<Result<Vec<_>>>()?;
        let batch: Vec<&EventSeries> = scaled.iter().map(|w| &w.history).collect();
        let queries: Vec<&[Vec<f64>]> = chunk.iter().map(|w| w.queries.as_slice()).collect();
        let (pred, act) = model.predict_scaled(&batch, &queries)?;
        activity.merge(&act);
        for per_window in pred {
            out.push(
                per_window
                    .into_iter()
                    .enumerate()
                    .map(|(v, qs)| qs.into_iter().map(|z| model.scaler.inverse(v, z)).collect())
                    .collect(),
            );
        }
    }
    Ok((out, activity))
}

/// Flat MSE/MAE of the model over every query of `windows`, in data units.
pub fn evaluate(model: &mut Model, windows: &[Window], batch_size: usize) -> Result<Metrics> {
    let (pred, _) = predict_windows(model, windows, batch_size)?;
    let pred = flatten(&pred);
    let (mse, mae) = metrics(&pred, &truths(windows))?;
    Ok(Metrics { mse, mae, n_queries: pred.len() })
}

/// Naive forecasters the model is compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    /// Last observed history value of the variate.
    Persistence,
    /// Mean of the variate's observed history values.
    Mean,
}

impl Baseline {
    pub const ALL: [Baseline; 2] = [Baseline::Persistence, Baseline::Mean];

    pub fn name(self) -> &'static str {
        match self {
            Baseline::Persistence => "persistence",
            Baseline::Mean => "mean",
        }
    }
}

/// Constant per-variate forecasts; a variate unobserved in a window falls
/// back to `fallback`'s mean.
pub fn baseline_forecasts(kind: Baseline, windows: &[Window], fallback: &Scaler) -> Vec<Vec<Vec<f64>>> {
    windows
        .iter()
        .map(|w| {
            let h = &w.history;
            w.queries
                .iter()
                .enumerate()
                .map(|(v, qs)| {
                    let observed: Vec<f64> =
                        (0..h.len()).filter(|&k| h.mask.at(&[k, v]) == 1.0).map(|k| h.values.at(&[k, v])).collect();
                    let value = match (kind, observed.last()) {
                        (_, None) => fallback.variates.get(v).map_or(0.0, |s| s.mean),
                        (Baseline::Persistence, Some(&last)) => last,
                        (Baseline::Mean, Some(_)) => observed.iter().sum::<f64>() / observed.len() as f64,
                    };
                    vec![value; qs.len()]
                })
                .collect()
        })
        .collect()
}

/// Metrics of a baseline over `windows`.
pub fn baseline_metrics(kind: Baseline, windows: &[Window], fallback: &Scaler) -> Result<Metrics> {
    let pred = flatten(&baseline_forecasts(kind, windows, fallback));
    let (mse, mae) = metrics(&pred, &truths(windows))?;
    Ok(Metrics { mse, mae, n_queries: pred.len() })
}
