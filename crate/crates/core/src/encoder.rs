//! Event-aligned spike encoder.
//!
//! Observations are placed on the union of all variates' timestamps, passed
//! through a per-variate depthwise convolution and batch norm, scaled by a
//! gate on the elapsed gap, turned into a synaptic current, and finally
//! spiked by an event-aligned LIF that advances only at event times.

use std::ops::Range;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{ealif_spike_scan, event_gaps, EaLifConfig, FirstGap, ScanLayout, SpikeMode};
use crate::numerics::{batch_norm, sigmoid, softplus, softplus_inv, BatchNormState, Graph, Tensor, Var};
use crate::params::{Bindings, ParamStore};

/// Lower bound added to the gate's learnable time scale.
pub const RHO_FLOOR: f64 = 1e-3;

/// Irregular multivariate series on its global event grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventSeries {
    pub times: Vec<f64>,
    /// `[K, D]`; zero wherever the mask is zero.
    pub values: Tensor,
    /// `[K, D]` with entries in {0, 1}.
    pub mask: Tensor,
}

impl EventSeries {
    /// Validates the triple and zeroes unobserved values.
    pub fn new(times: Vec<f64>, values: Tensor, mask: Tensor) -> Result<Self> {
        let k = times.len();
        if values.shape().len() != 2 || values.shape()[0] != k || mask.shape() != values.shape() {
            return Err(Error::Dimension(format!(
                "values {:?} and mask {:?} must both be [{k}, D]",
                values.shape(),
                mask.shape()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) {
            return Err(Error::Data("event times must be finite".into()));
        }
        if times.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Data("event times must be nondecreasing".into()));
        }
        if mask.data().iter().any(|&m| m != 0.0 && m != 1.0) {
            return Err(Error::Data("mask entries must be 0 or 1".into()));
        }
        if !values.is_finite() {
            return Err(Error::Data("event values must be finite".into()));
        }
        let d = values.shape()[1];
        for row in 0..k {
            if d > 0 && mask.row(row).iter().all(|&m| m == 0.0) {
                return Err(Error::Data(format!("event {row} has no observed variate")));
            }
        }
        let values = values.zip_map(&mask, |x, m| x * m)?;
        Ok(Self { times, values, mask })
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn variates(&self) -> usize {
        self.values.shape()[1]
    }

    /// Number of observed `(event, variate)` entries.
    pub fn observed(&self) -> usize {
        self.mask.data().iter().filter(|&&m| m == 1.0).count()
    }

    pub fn shifted(&self, offset: f64) -> Self {
        Self { times: self.times.iter().map(|t| t + offset).collect(), ..self.clone() }
    }
}

/// Merges per-variate `(time, value)` lists onto the sorted union of their
/// timestamps.
pub fn align_events(raw: &[Vec<(f64, f64)>]) -> Result<EventSeries> {
    let d = raw.len();
    let mut times: Vec<f64> = Vec::new();
    for (v, events) in raw.iter().enumerate() {
        if events.is_empty() {
            debug!("variate {v} has no observations");
        }
        for w in events.windows(2) {
            if w[1].0 == w[0].0 {
                return Err(Error::Data(format!("variate {v} observes time {} twice", w[0].0)));
            }
            if w[1].0 < w[0].0 {
                return Err(Error::Data(format!("events of variate {v} are not time-sorted")));
            }
        }
        times.extend(events.iter().map(|e| e.0));
    }
    if times.iter().any(|t| !t.is_finite()) {
        return Err(Error::Data("event times must be finite".into()));
    }
    times.sort_by(f64::total_cmp);
    times.dedup();
    let k = times.len();
    let mut values = Tensor::zeros(&[k, d]);
    let mut mask = Tensor::zeros(&[k, d]);
    for (v, events) in raw.iter().enumerate() {
        for &(t, x) in events {
            let row = times.partition_point(|&u| u < t);
            values.set(&[row, v], x);
            mask.set(&[row, v], 1.0);
        }
    }
    EventSeries::new(times, values, mask)
}

/// Gap gate `sig(a * ln(1 + dt / rho) + b)` for every event.
pub fn interval_gate(dt: &[f64], rho: f64, a: f64, b: f64) -> Vec<f64> {
    dt.iter().map(|&t| sigmoid(a * (t / rho).ln_1p() + b)).collect()
}

/// `gamma * (gate_k * x_local[k, d, c] - theta[c])` for a `[K, D, C]` input.
pub fn synaptic_current(x_local: &Tensor, gate: &[f64], gamma: f64, theta: &[f64]) -> Result<Tensor> {
    let shape = x_local.shape();
    if shape.len() != 3 || shape[0] != gate.len() || shape[2] != theta.len() {
        return Err(Error::Dimension(format!(
            "current input {shape:?} does not match {} gates and {} offsets",
            gate.len(),
            theta.len()
        )));
    }
    let per_event = shape[1] * shape[2];
    let c = shape[2];
    let data = x_local
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| gamma * (gate[i / per_event] * x - theta[i % c]))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub channels: usize,
    pub kernel: usize,
    pub neuron: EaLifConfig,
    pub first_gap: FirstGap,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            channels: 8,
            kernel: 3,
            neuron: EaLifConfig::default(),
            first_gap: FirstGap::Zero,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 {
            return Err(Error::Config("encoder needs at least one channel".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config(format!("encoder kernel size must be odd, got {}", self.kernel)));
        }
        self.neuron.validate()
    }

    pub fn batch_norm(&self) -> Result<BatchNormState> {
        BatchNormState::new(self.channels, self.bn_momentum, self.bn_epsilon)
    }
}

/// Adds the encoder's parameters under `encoder.*`.
pub fn init_params(store: &mut ParamStore, variates: usize, cfg: &EncoderConfig, rng: &mut impl Rng) {
    let (c, k) = (cfg.channels, cfg.kernel);
    let bound = 1.0 / (k as f64).sqrt();
    let kernels = (0..variates * c * k).map(|_| rng.random_range(-bound..bound)).collect();
    store.insert("encoder.conv", Tensor::new(vec![variates, c, k], kernels).expect("kernel shape"));
    store.insert("encoder.bn_gamma", Tensor::ones(&[c]));
    store.insert("encoder.bn_beta", Tensor::zeros(&[c]));
    store.insert("encoder.rho_hat", Tensor::scalar(softplus_inv(1.0 - RHO_FLOOR)));
    store.insert("encoder.gate_a", Tensor::scalar(1.0));
    store.insert("encoder.gate_b", Tensor::scalar(0.0));
    store.insert("encoder.gamma_hat", Tensor::scalar(softplus_inv(1.0)));
    store.insert("encoder.theta", Tensor::zeros(&[c]));
    store.insert("encoder.eta", Tensor::scalar(cfg.neuron.eta));
}

/// Current gate time scale `softplus(rho_hat) + floor`.
pub fn gate_scale(store: &ParamStore) -> Result<f64> {
    Ok(softplus(store.get("encoder.rho_hat")?.item()) + RHO_FLOOR)
}

/// Encoder output for a batch laid out back to back along rows.
#[derive(Debug, Clone)]
pub struct EncodedBatch {
    /// `[sum K, D * C]`, row `k` holding `[D, C]` spikes of one event.
    pub spikes: Var,
    pub segments: Vec<Range<usize>>,
}

/// Records the full encoder on the tape for every series of `batch`.
pub fn encode_batch(
    g: &mut Graph,
    p: &Bindings,
    cfg: &EncoderConfig,
    bn: &mut BatchNormState,
    batch: &[&EventSeries],
    mode: SpikeMode,
) -> Result<EncodedBatch> {
    cfg.validate()?;
    let first = batch.first().ok_or_else(|| Error::Data("empty batch".into()))?;
    let d = first.variates();
    let c = cfg.channels;
    let mut rows = Vec::new();
    let mut dt_all = Vec::new();
    let mut gaps = Vec::with_capacity(batch.len());
    let mut segments = Vec::with_capacity(batch.len());
    let mut start = 0;
    for s in batch {
        if s.is_empty() {
            return Err(Error::Data("cannot encode a series with no events".into()));
        }
        if s.variates() != d {
            return Err(Error::Dimension("all series in a batch must share the variate count".into()));
        }
        rows.extend_from_slice(s.values.data());
        let dt = event_gaps(&s.times, cfg.first_gap)?;
        dt_all.extend_from_slice(&dt);
        gaps.push(dt);
        segments.push(start..start + s.len());
        start += s.len();
    }
    let total = start;
    let x = g.constant(Tensor::matrix(total, d, rows)?)?;
    let conv = g.depthwise_conv1d(x, p.get("encoder.conv")?, &segments)?;
    let per_channel = g.reshape(conv, &[total * d, c])?;
    let (gamma_bn, beta_bn) = (p.get("encoder.bn_gamma")?, p.get("encoder.bn_beta")?);
    let local = batch_norm(g, per_channel, gamma_bn, beta_bn, bn)?;
    let local = g.reshape(local, &[total, d * c])?;

    // gap gate, one scalar per event
    let dt = g.constant(Tensor::matrix(total, 1, dt_all)?)?;
    let rho = g.softplus(p.get("encoder.rho_hat")?)?;
    let rho = g.add_const(rho, RHO_FLOOR)?;
    let ratio = g.div(dt, rho)?;
    let ratio = g.add_const(ratio, 1.0)?;
    let log_gap = g.ln(ratio)?;
    let z = g.mul(log_gap, p.get("encoder.gate_a")?)?;
    let z = g.add(z, p.get("encoder.gate_b")?)?;
    let gate = g.sigmoid(z)?;
    let gated = g.mul(local, gate)?;

    let gated = g.reshape(gated, &[total * d, c])?;
    let shifted = g.sub(gated, p.get("encoder.theta")?)?;
    let gain = g.softplus(p.get("encoder.gamma_hat")?)?;
    let current = g.mul(shifted, gain)?;
    let current = g.reshape(current, &[total, d * c])?;

    let layout = ScanLayout::new(d * c, &gaps)?;
    let spikes = ealif_spike_scan(g, current, p.get("encoder.eta")?, &layout, &cfg.neuron, mode)?;
    Ok(EncodedBatch { spikes, segments })
}

/// Spikes `[K, D, C]` of a single series.
pub fn encode(
    series: &EventSeries,
    store: &ParamStore,
    cfg: &EncoderConfig,
    bn: &mut BatchNormState,
    mode: SpikeMode,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = Bindings::bind(&mut g, store)?;
    let out = encode_batch(&mut g, &p, cfg, bn, &[series], mode)?;
    g.value(out.spikes).reshape(&[series.len(), series.variates(), cfg.channels])
}
