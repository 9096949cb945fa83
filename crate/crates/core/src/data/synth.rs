//! Seeded synthetic daily suites with known structure.

use std::f64::consts::PI;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::clean::series_rng;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    /// Per-variate sinusoids with per-series amplitude, phase, and trend.
    #[default]
    Sinusoid,
    /// Sparse rectangular bursts of a few days on a flat baseline.
    Pulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub kind: SynthKind,
    pub series: usize,
    pub variates: usize,
    pub length: usize,
    pub noise: f64,
    /// Burst width in days (pulse suite).
    pub pulse_width: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { kind: SynthKind::Sinusoid, series: 8, variates: 4, length: 720, noise: 0.05, pulse_width: 3, seed: 0 }
    }
}

/// Periods (days) assigned to variates in turn.
pub const PERIODS: [f64; 4] = [10.0, 15.0, 30.0, 20.0];

/// Clean daily trajectories `[series][variate][day]`.
pub fn synth_suite(cfg: &SynthConfig) -> Result<Vec<(String, Vec<Vec<f64>>)>> {
    if cfg.series == 0 || cfg.variates == 0 || cfg.length == 0 {
        return Err(Error::Config("synthetic suite needs series, variates, and days".into()));
    }
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut out = Vec::with_capacity(cfg.series);
    for s in 0..cfg.series {
        // distinct stream from the masking streams of the same seed
        let mut rng = series_rng(cfg.seed.wrapping_add(0x5eed_0000), s as u64);
        let variates = match cfg.kind {
            SynthKind::Sinusoid => {
                let amp = rng.random_range(0.5..2.0);
                let phase = rng.random_range(0.0..2.0 * PI);
                let slope = rng.random_range(-0.5..0.5) / cfg.length as f64;
                let level = rng.random_range(-1.0..1.0);
                (0..cfg.variates)
                    .map(|v| {
                        let period = PERIODS[v % PERIODS.len()];
                        let offset = 2.0 * PI * v as f64 / cfg.variates as f64;
                        (0..cfg.length)
                            .map(|t| {
                                let t = t as f64;
                                level + slope * t + amp * (2.0 * PI * t / period + phase + offset).sin()
                                    + noise.sample(&mut rng)
                            })
                            .collect()
                    })
                    .collect()
            }
            SynthKind::Pulse => (0..cfg.variates)
                .map(|_| {
                    let period = 30;
                    let offset = rng.random_range(0..period);
                    (0..cfg.length)
                        .map(|t| {
                            let on = (t + period - offset) % period < cfg.pulse_width;
                            f64::from(u8::from(on)) + noise.sample(&mut rng)
                        })
                        .collect()
                })
                .collect(),
        };
        out.push((format!("synth{s}"), variates));
    }
    Ok(out)
}
