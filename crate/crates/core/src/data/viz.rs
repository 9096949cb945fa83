//! Single-channel two-phase dataset and the three spike encoders compared
//! on it: threshold-on-difference, convolve-and-threshold, and the
//! event-aligned LIF on irregular stamps.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{ealif_step, eta_for_tau, EaLifConfig, NeuronState};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VizConfig {
    pub horizon: f64,
    /// End of the sparse phase.
    pub split: f64,
    pub sparse: usize,
    pub dense: usize,
    pub noise: f64,
    pub delta_threshold: f64,
    pub kernel: Vec<f64>,
    pub conv_threshold: f64,
    pub grid: usize,
    pub tau: f64,
    pub gain: f64,
    pub offset: f64,
    pub v_th: f64,
    pub seed: u64,
}

impl Default for VizConfig {
    fn default() -> Self {
        Self {
            horizon: 100.0,
            split: 60.0,
            sparse: 10,
            dense: 60,
            noise: 0.02,
            delta_threshold: 0.15,
            kernel: vec![0.25, 0.5, 0.25],
            conv_threshold: 1.0,
            grid: 101,
            tau: 2.0,
            gain: 1.5,
            offset: 0.0,
            v_th: 1.0,
            seed: 7,
        }
    }
}

impl VizConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sparse == 0 || self.dense == 0 {
            return Err(Error::Config("both phases need at least one sample".into()));
        }
        if !(0.0 < self.split && self.split < self.horizon) {
            return Err(Error::Config("phase split must lie inside the horizon".into()));
        }
        if self.grid < 2 || self.kernel.is_empty() {
            return Err(Error::Config("grid needs two points and the kernel one tap".into()));
        }
        if self.noise < 0.0 {
            return Err(Error::Config("noise must be non-negative".into()));
        }
        Ok(())
    }
}

fn bump(t: f64, center: f64, width: f64) -> f64 {
    (-(t - center).powi(2) / (2.0 * width * width)).exp()
}

/// Slow sinusoid plus two unit-height Gaussian bursts at days 70 and 85.
pub fn baseline(t: f64) -> f64 {
    0.5 * (2.0 * PI * t / 40.0).sin() + bump(t, 70.0, 3.0) + bump(t, 85.0, 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sampled {
    pub times: Vec<f64>,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizSeries {
    pub irregular: Sampled,
    pub grid: Sampled,
}

/// Uniform draws on the sparse and dense phases plus a regular grid, all
/// perturbed by Gaussian noise.
pub fn synth_viz_series(cfg: &VizConfig) -> Result<VizSeries> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(format!("noise: {e}")))?;
    let mut times: Vec<f64> = (0..cfg.sparse).map(|_| rng.random_range(0.0..=cfg.split)).collect();
    times.extend((0..cfg.dense).map(|_| {
        // (split, horizon]
        cfg.horizon - rng.random_range(0.0..cfg.horizon - cfg.split)
    }));
    times.sort_by(f64::total_cmp);
    times.dedup();
    let values = times.iter().map(|&t| baseline(t) + noise.sample(&mut rng)).collect();
    let step = cfg.horizon / (cfg.grid - 1) as f64;
    let grid_t: Vec<f64> = (0..cfg.grid).map(|k| k as f64 * step).collect();
    let grid_v = grid_t.iter().map(|&t| baseline(t) + noise.sample(&mut rng)).collect();
    Ok(VizSeries { irregular: Sampled { times, values }, grid: Sampled { times: grid_t, values: grid_v } })
}

/// `1(|x_k - x_{k-1}| >= threshold)`; the first sample never fires.
pub fn delta_encode(values: &[f64], threshold: f64) -> Vec<u8> {
    let mut out = vec![0; values.len()];
    for k in 1..values.len() {
        out[k] = u8::from((values[k] - values[k - 1]).abs() >= threshold);
    }
    out
}

/// Centered convolution with zero padding, z-scored, then thresholded.
pub fn conv_encode(values: &[f64], kernel: &[f64], threshold: f64) -> Vec<u8> {
    let n = values.len();
    let r = kernel.len() / 2;
    let y: Vec<f64> = (0..n)
        .map(|k| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(j, w)| {
                    let src = (k + j).checked_sub(r)?;
                    values.get(src).map(|x| w * x)
                })
                .sum()
        })
        .collect();
    let mean = y.iter().sum::<f64>() / n as f64;
    let std = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if std == 0.0 {
        return vec![0; n];
    }
    y.iter().map(|v| u8::from((v - mean) / std >= threshold)).collect()
}

/// Event-aligned LIF on irregular stamps with current `gain * (x - offset)`.
pub fn sedse_encode(times: &[f64], values: &[f64], cfg: &VizConfig) -> Result<Vec<u8>> {
    if times.len() != values.len() {
        return Err(Error::Dimension("times and values differ in length".into()));
    }
    let neuron = EaLifConfig { eta: eta_for_tau(cfg.tau), v_th: cfg.v_th, ..EaLifConfig::default() };
    let mut state = NeuronState::zeros(&[1]);
    let mut out = Vec::with_capacity(times.len());
    for k in 0..times.len() {
        let dt = if k == 0 { 0.0 } else { times[k] - times[k - 1] };
        let current = Tensor::vector(vec![cfg.gain * (values[k] - cfg.offset)]);
        let step = ealif_step(&mut state, &current, dt, &neuron)?;
        out.push(step.s.item() as u8);
    }
    Ok(out)
}

/// One encoder's output on its own time axis.
#[derive(Debug, Clone, PartialEq)]
pub struct SpikeTrain {
    pub encoder: &'static str,
    pub times: Vec<f64>,
    pub spikes: Vec<u8>,
}

impl SpikeTrain {
    pub fn spike_times(&self) -> Vec<f64> {
        self.times.iter().zip(&self.spikes).filter(|(_, &s)| s == 1).map(|(&t, _)| t).collect()
    }
}

pub fn baseline_encoders(series: &VizSeries, cfg: &VizConfig) -> Result<[SpikeTrain; 3]> {
    let g = &series.grid;
    let ir = &series.irregular;
    Ok([
        SpikeTrain { encoder: "delta", times: g.times.clone(), spikes: delta_encode(&g.values, cfg.delta_threshold) },
        SpikeTrain { encoder: "conv", times: g.times.clone(), spikes: conv_encode(&g.values, &cfg.kernel, cfg.conv_threshold) },
        SpikeTrain { encoder: "sedse", times: ir.times.clone(), spikes: sedse_encode(&ir.times, &ir.values, cfg)? },
    ])
}

impl VizSeries {
    fn of(&self, train: &SpikeTrain) -> &Sampled {
        if train.encoder == "sedse" {
            &self.irregular
        } else {
            &self.grid
        }
    }
}

/// Long-format raster: `encoder, t, x, spike`, one row per encoder step.
pub fn raster_csv(series: &VizSeries, trains: &[SpikeTrain]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["encoder", "t", "x", "spike"])?;
    for train in trains {
        let input = series.of(train);
        for ((t, x), s) in input.times.iter().zip(&input.values).zip(&train.spikes) {
            w.write_record([train.encoder.to_string(), t.to_string(), x.to_string(), s.to_string()])?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    String::from_utf8(bytes).map_err(|e| Error::Data(e.to_string()))
}

const WIDTH: f64 = 900.0;
const ROW: f64 = 120.0;
const MARGIN: f64 = 60.0;

/// One row per encoder: the input series as a polyline with a vertical tick
/// at every spike.
pub fn raster_svg(series: &VizSeries, trains: &[SpikeTrain], cfg: &VizConfig) -> String {
    let height = 2.0 * MARGIN + ROW * trains.len() as f64;
    let span = WIDTH - 2.0 * MARGIN;
    let x_of = |t: f64| MARGIN + span * t / cfg.horizon;
    let all: Vec<f64> = series.grid.values.iter().chain(&series.irregular.values).copied().collect();
    let lo = all.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = all.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = if hi > lo { hi - lo } else { 1.0 };
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for (r, train) in trains.iter().enumerate() {
        let top = MARGIN + ROW * r as f64;
        let y_of = |x: f64| top + 10.0 + (ROW - 30.0) * (1.0 - (x - lo) / range);
        let input = series.of(train);
        let _ = writeln!(s, r#"<g class="row" data-encoder="{}">"#, train.encoder);
        let _ = writeln!(s, r#"<text x="5" y="{:.2}" font-size="12" font-family="sans-serif">{}</text>"#, top + ROW / 2.0, train.encoder);
        let points: Vec<String> =
            input.times.iter().zip(&input.values).map(|(&t, &x)| format!("{:.2},{:.2}", x_of(t), y_of(x))).collect();
        let _ = writeln!(s, r##"<polyline fill="none" stroke="#999999" stroke-width="1" points="{}"/>"##, points.join(" "));
        let base = top + ROW - 15.0;
        let _ = writeln!(
            s,
            r##"<line x1="{MARGIN}" y1="{base:.2}" x2="{:.2}" y2="{base:.2}" stroke="#cccccc"/>"##,
            WIDTH - MARGIN
        );
        for t in train.spike_times() {
            let x = x_of(t);
            let _ = writeln!(
                s,
                r##"<line class="spike" data-t="{t}" x1="{x:.2}" y1="{:.2}" x2="{x:.2}" y2="{base:.2}" stroke="#c0392b" stroke-width="1.5"/>"##,
                base - 20.0
            );
        }
        let _ = writeln!(s, "</g>");
    }
    let _ = writeln!(s, "</svg>");
    s
}

/// Generates the dataset, runs the three encoders, and writes `spikes.csv`
/// and `raster.svg` into `dir`.
pub fn write_viz(cfg: &VizConfig, dir: &Path) -> Result<(VizSeries, [SpikeTrain; 3])> {
    let series = synth_viz_series(cfg)?;
    let trains = baseline_encoders(&series, cfg)?;
    fs::create_dir_all(dir)?;
    fs::write(dir.join("spikes.csv"), raster_csv(&series, &trains)?)?;
    fs::write(dir.join("raster.svg"), raster_svg(&series, &trains, cfg))?;
    Ok((series, trains))
}
