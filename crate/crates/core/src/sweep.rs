//! One-at-a-time hyperparameter sweeps around a base configuration.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::data::Splits;
use crate::error::{Error, Result};
use crate::head::{evaluate, train, Metrics, Model, ModelConfig, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepParam {
    Tau,
    Stride,
    Blocks,
    Dim,
}

impl SweepParam {
    pub const ALL: [SweepParam; 4] = [SweepParam::Tau, SweepParam::Stride, SweepParam::Blocks, SweepParam::Dim];

    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Tau => "tau",
            SweepParam::Stride => "stride",
            SweepParam::Blocks => "blocks",
            SweepParam::Dim => "dim",
        }
    }

    /// Default grid for the parameter.
    pub fn grid(self) -> Vec<f64> {
        match self {
            SweepParam::Tau => vec![1.0, 2.0, 3.0, 4.0],
            SweepParam::Stride => vec![2.0, 4.0, 8.0, 16.0],
            SweepParam::Blocks => vec![1.0, 2.0, 3.0, 4.0],
            SweepParam::Dim => vec![16.0, 32.0, 64.0, 128.0],
        }
    }

    /// `base` with this parameter set to `value`.
    pub fn apply(self, base: &ModelConfig, value: f64) -> Result<ModelConfig> {
        let mut cfg = base.clone();
        let count = |v: f64| {
            if v >= 1.0 && v.fract() == 0.0 {
                Ok(v as usize)
            } else {
                Err(Error::Config(format!("{} must be a positive integer, got {v}", self.name())))
            }
        };
        match self {
            SweepParam::Tau => {
                if !(value >= 1.0 && value.is_finite()) {
                    return Err(Error::Config(format!("tau must be at least 1, got {value}")));
                }
                cfg.set_tau(value);
            }
            SweepParam::Stride => cfg.stride = count(value)?,
            SweepParam::Blocks => cfg.backbone.blocks = count(value)?,
            SweepParam::Dim => cfg.backbone.dim = count(value)?,
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

impl fmt::Display for SweepParam {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SweepParam {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepParam::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown sweep parameter `{s}` (tau, stride, blocks, dim)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepAxis {
    pub param: SweepParam,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub axes: Vec<SweepAxis>,
    /// Initialization seed of every cell's model.
    pub model_seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            axes: SweepParam::ALL.into_iter().map(|param| SweepAxis { param, values: param.grid() }).collect(),
            model_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub param: SweepParam,
    pub value: f64,
    pub mse: f64,
    pub mae: f64,
    pub n_queries: usize,
    pub best_epoch: usize,
    pub seconds: f64,
}

/// Trains one model on `splits` and scores it on the test split.
pub fn run_cell(cfg: &ModelConfig, train_cfg: &TrainConfig, seed: u64, splits: &Splits) -> Result<(Metrics, usize)> {
    let model = Model::new(cfg.clone(), seed)?;
    let out = train(model, &splits.train, &splits.val, train_cfg)?;
    let mut model = out.model;
    let m = evaluate(&mut model, &splits.test, train_cfg.batch_size)?;
    Ok((m, out.best_epoch))
}

/// Varies each axis in turn, holding every other setting at the base.
/// `on_cell` sees each finished cell, e.g. to stream it to disk.
pub fn run_sweep(cfg: &SweepConfig, splits: &Splits, mut on_cell: impl FnMut(&SweepCell) -> Result<()>) -> Result<Vec<SweepCell>> {
    // fail on a bad grid before any training starts
    let plans = cfg
        .axes
        .iter()
        .flat_map(|a| a.values.iter().map(move |&v| (a.param, v)))
        .map(|(p, v)| Ok((p, v, p.apply(&cfg.model, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let mut cells = Vec::with_capacity(plans.len());
    for (param, value, model) in plans {
        let t0 = Instant::now();
        let (m, best_epoch) = run_cell(&model, &cfg.train, cfg.model_seed, splits)?;
        let cell = SweepCell {
            param,
            value,
            mse: m.mse,
            mae: m.mae,
            n_queries: m.n_queries,
            best_epoch,
            seconds: t0.elapsed().as_secs_f64(),
        };
        info!("sweep {param}={value}: test mse {:.6}, mae {:.6}", cell.mse, cell.mae);
        on_cell(&cell)?;
        cells.push(cell);
    }
    Ok(cells)
}

pub const SWEEP_COLUMNS: [&str; 7] = ["param", "value", "mse", "mae", "n_queries", "best_epoch", "seconds"];

/// CSV with one row per cell; `seconds` is left out when `timings` is false
/// so that reruns are byte-identical.
pub fn sweep_csv(cells: &[SweepCell], timings: bool) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let cols = if timings { &SWEEP_COLUMNS[..] } else { &SWEEP_COLUMNS[..6] };
    w.write_record(cols)?;
    for c in cells {
        let mut row =
            vec![c.param.to_string(), c.value.to_string(), c.mse.to_string(), c.mae.to_string(), c.n_queries.to_string(), c.best_epoch.to_string()];
        if timings {
            row.push(format!("{:.3}", c.seconds));
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare_synthetic, PrepareConfig, SynthConfig};

    #[test]
    fn apply_sets_one_field() {
        let base = ModelConfig::default();
        let c = SweepParam::Stride.apply(&base, 16.0).unwrap();
        assert_eq!(c.stride, 16);
        assert_eq!(c.backbone, base.backbone);
        let c = SweepParam::Tau.apply(&base, 3.0).unwrap();
        assert_eq!(c.backbone.filter_tau, 3.0);
        assert!(SweepParam::Dim.apply(&base, 30.0).is_err());
        assert!(SweepParam::Blocks.apply(&base, 1.5).is_err());
        assert!(SweepParam::Tau.apply(&base, 0.5).is_err());
        assert_eq!("dim".parse::<SweepParam>().unwrap(), SweepParam::Dim);
        assert!("heads".parse::<SweepParam>().is_err());
    }

    #[test]
    fn tiny_sweep_emits_one_row_per_cell() {
        let synth = SynthConfig { series: 2, variates: 2, length: 200, ..Default::default() };
        let ds = prepare_synthetic(&synth, &PrepareConfig::default()).unwrap();
        let cfg = SweepConfig {
            model: ModelConfig {
                variates: 2,
                backbone: crate::backbone::BackboneConfig { dim: 8, heads: 2, blocks: 1, ..Default::default() },
                ..Default::default()
            },
            train: TrainConfig { epochs: 1, ..Default::default() },
            axes: vec![SweepAxis { param: SweepParam::Stride, values: vec![2.0, 16.0] }],
            model_seed: 0,
        };
        let mut seen = 0;
        let cells = run_sweep(&cfg, &ds.splits, |_| {
            seen += 1;
            Ok(())
        })
        .unwrap();
        assert_eq!((cells.len(), seen), (2, 2));
        assert!(cells.iter().all(|c| c.mse.is_finite()));
        let text = sweep_csv(&cells, false).unwrap();
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("param,value,mse,mae,n_queries,best_epoch\n"));
    }
}
