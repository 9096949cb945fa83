//! Operation counting and 45 nm energy estimates for the forecaster and a
//! grid-bound dense reference with the same layer widths.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{Activity, ModelConfig};

/// Per-operation energies in pJ.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    pub e_mac: f64,
    pub e_add: f64,
    pub e_acc: f64,
    pub e_cmp: f64,
    pub e_rd: f64,
    pub e_wr: f64,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_mac: 4.6, e_add: 0.9, e_acc: 0.9, e_cmp: 0.1, e_rd: 5.0, e_wr: 5.0 }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let all = [self.e_mac, self.e_add, self.e_acc, self.e_cmp, self.e_rd, self.e_wr];
        if all.iter().any(|e| !(e.is_finite() && *e >= 0.0)) {
            return Err(Error::Config("operation energies must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Energy of one synaptic operation.
    pub fn sop(&self) -> f64 {
        self.e_acc + self.e_cmp + self.e_rd + self.e_wr
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    pub n_mac: u64,
    pub n_add: u64,
    pub n_rd: u64,
    pub n_wr: u64,
    pub sop: u64,
    /// Weights fetched once by a spiking layer.
    pub params: u64,
}

/// Dense layer `d_in -> d_out` applied at `t_eff` positions.
pub fn count_ann_layer(d_in: u64, d_out: u64, t_eff: u64) -> OpCounts {
    if t_eff == 0 {
        return OpCounts::default();
    }
    OpCounts {
        n_mac: d_in * d_out * t_eff,
        n_add: d_out * d_in.saturating_sub(1) * t_eff,
        n_rd: d_in * d_out + d_in * t_eff,
        n_wr: d_out * t_eff,
        ..Default::default()
    }
}

/// Spike-driven layer: `round(rate * events * d_out)` synaptic operations.
pub fn count_snn_layer(rate: f64, events: u64, d_out: u64, params: u64) -> Result<OpCounts> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Data(format!("firing rate must lie in [0,1], got {rate}")));
    }
    Ok(OpCounts { sop: (rate * events as f64 * d_out as f64).round() as u64, params, ..Default::default() })
}

pub fn layer_energy(c: &OpCounts, m: &EnergyModel) -> f64 {
    let terms = [
        (c.n_mac, m.e_mac),
        (c.n_add, m.e_add),
        (c.n_rd, m.e_rd),
        (c.n_wr, m.e_wr),
        (c.sop, m.sop()),
        (c.params, m.e_rd),
    ];
    // Whole-femtojoule constants are summed as integers so decimal inputs
    // give decimal-exact totals (100 MACs at 4.6 pJ is 460, not 459.99...).
    let fj: Option<Vec<u128>> = terms
        .iter()
        .map(|&(_, e)| {
            let scaled = (e * 1000.0).round();
            ((e * 1000.0 - scaled).abs() < 1e-6 && (0.0..1e15).contains(&scaled)).then_some(scaled as u128)
        })
        .collect();
    match fj {
        Some(fj) => {
            let total: u128 = terms.iter().zip(&fj).map(|(&(n, _), &e)| u128::from(n) * e).sum();
            total as f64 / 1000.0
        }
        None => terms.iter().map(|&(n, e)| n as f64 * e).sum(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    /// Dense arithmetic over event-aligned positions.
    Event,
    /// Dense arithmetic over every calendar grid step.
    Grid,
    /// Spike-driven accumulation.
    Spiking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub name: String,
    pub kind: LayerKind,
    pub counts: OpCounts,
    pub energy_pj: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub model: EnergyModel,
    /// Marks `e_acc`, `e_cmp`, `e_rd`, `e_wr` as configured values.
    pub note: String,
    pub encoder_rate: f64,
    pub pooled_rate: f64,
    pub observed_events: usize,
    pub layers: Vec<LayerReport>,
    pub total_pj: f64,
    pub reference_layers: Vec<LayerReport>,
    pub reference_total_pj: f64,
    /// `reference_total_pj / total_pj`.
    pub ratio: f64,
}

pub const CONFIGURED_NOTE: &str = "e_mac and e_add from the 45 nm model; e_acc, e_cmp, e_rd, e_wr are configured values, not measurements";

fn layer(name: &str, kind: LayerKind, counts: OpCounts, m: &EnergyModel) -> LayerReport {
    LayerReport { name: name.to_string(), kind, counts, energy_pj: layer_energy(&counts, m) }
}

/// Layers of the forecaster for one measured pass.
///
/// The encoder convolution runs once per observed entry; the token
/// projection is spike-driven with the measured pooled firing rate; every
/// later dense layer runs once per pooled token (or query).
pub fn forecaster_layers(cfg: &ModelConfig, a: &Activity, m: &EnergyModel) -> Result<Vec<LayerReport>> {
    let (c, k) = (cfg.encoder.channels as u64, cfg.encoder.kernel as u64);
    let d = cfg.backbone.dim as u64;
    let heads = cfg.backbone.heads as u64;
    let dh = d / heads;
    let tokens = a.tokens as u64;
    let queries = a.queries as u64;
    let mut out = vec![layer("encoder.conv", LayerKind::Event, count_ann_layer(k, c, a.observed as u64), m)];
    // every pooled (step, variate) slot with an observed event carries C spike lanes
    let lanes = a.pooled_observed as u64 * c;
    out.push(layer("embed.proj", LayerKind::Spiking, count_snn_layer(a.pooled_rate(), lanes, d, c * d)?, m));
    for l in 0..cfg.backbone.blocks {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            out.push(layer(&format!("block{l}.{w}"), LayerKind::Event, count_ann_layer(d, d, tokens), m));
        }
        // k^T v and q (k^T v), per head
        out.push(layer(&format!("block{l}.attention"), LayerKind::Event, count_ann_layer(dh, dh, 2 * tokens * heads), m));
        out.push(layer(&format!("block{l}.ffn1"), LayerKind::Event, count_ann_layer(d, 2 * d, tokens), m));
        out.push(layer(&format!("block{l}.ffn2"), LayerKind::Event, count_ann_layer(2 * d, d, tokens), m));
    }
    out.extend(decoder_layers(d, queries, m));
    Ok(out)
}

fn decoder_layers(d: u64, queries: u64, m: &EnergyModel) -> Vec<LayerReport> {
    vec![
        layer("decoder.w1", LayerKind::Event, count_ann_layer(2 * d, 2 * d, queries), m),
        layer("decoder.w2", LayerKind::Event, count_ann_layer(2 * d, 2 * d, queries), m),
        layer("decoder.w3", LayerKind::Event, count_ann_layer(2 * d, 1, queries), m),
    ]
}

/// Dense transformer of the same widths run on the full calendar grid:
/// `grid_steps` per series times `D` variate tokens, no pooling.
pub fn grid_reference_layers(cfg: &ModelConfig, series: usize, grid_steps: usize, queries: usize, m: &EnergyModel) -> Vec<LayerReport> {
    let (c, k) = (cfg.encoder.channels as u64, cfg.encoder.kernel as u64);
    let d = cfg.backbone.dim as u64;
    let heads = cfg.backbone.heads as u64;
    let dh = d / heads;
    let slots = (series * grid_steps * cfg.variates) as u64;
    let mut out = vec![
        layer("encoder.conv", LayerKind::Grid, count_ann_layer(k, c, slots), m),
        layer("embed.proj", LayerKind::Grid, count_ann_layer(c, d, slots), m),
    ];
    for l in 0..cfg.backbone.blocks {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            out.push(layer(&format!("block{l}.{w}"), LayerKind::Grid, count_ann_layer(d, d, slots), m));
        }
        out.push(layer(&format!("block{l}.attention"), LayerKind::Grid, count_ann_layer(dh, dh, 2 * slots * heads), m));
        out.push(layer(&format!("block{l}.ffn1"), LayerKind::Grid, count_ann_layer(d, 2 * d, slots), m));
        out.push(layer(&format!("block{l}.ffn2"), LayerKind::Grid, count_ann_layer(2 * d, d, slots), m));
    }
    out.extend(decoder_layers(d, queries as u64, m));
    out
}

pub fn total(layers: &[LayerReport]) -> f64 {
    layers.iter().map(|l| l.energy_pj).sum()
}

/// Full report for a measured pass over `series` windows of `grid_steps` days.
pub fn energy_report(cfg: &ModelConfig, a: &Activity, grid_steps: usize, m: &EnergyModel) -> Result<EnergyReport> {
    m.validate()?;
    let layers = forecaster_layers(cfg, a, m)?;
    let reference_layers = grid_reference_layers(cfg, a.series, grid_steps, a.queries, m);
    let (total_pj, reference_total_pj) = (total(&layers), total(&reference_layers));
    Ok(EnergyReport {
        model: *m,
        note: CONFIGURED_NOTE.to_string(),
        encoder_rate: a.encoder_rate(),
        pooled_rate: a.pooled_rate(),
        observed_events: a.observed,
        layers,
        total_pj,
        reference_layers,
        reference_total_pj,
        ratio: if total_pj > 0.0 { reference_total_pj / total_pj } else { f64::INFINITY },
    })
}

impl EnergyReport {
    /// Plain-text table of both layer lists.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# {}", self.note);
        let _ = writeln!(
            s,
            "# firing rate: encoder {:.4}, pooled {:.4}; observed entries {}",
            self.encoder_rate, self.pooled_rate, self.observed_events
        );
        for (title, layers, total) in
            [("forecaster", &self.layers, self.total_pj), ("grid reference", &self.reference_layers, self.reference_total_pj)]
        {
            let _ = writeln!(s, "\n{title}");
            let _ = writeln!(
                s,
                "{:<18} {:<8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>16}",
                "layer", "kind", "mac", "add", "rd", "wr", "sop", "energy_pj"
            );
            for l in layers {
                let c = &l.counts;
                let kind = match l.kind {
                    LayerKind::Event => "event",
                    LayerKind::Grid => "grid",
                    LayerKind::Spiking => "spiking",
                };
                let _ = writeln!(
                    s,
                    "{:<18} {:<8} {:>12} {:>12} {:>12} {:>12} {:>12} {:>16.1}",
                    l.name, kind, c.n_mac, c.n_add, c.n_rd, c.n_wr, c.sop, l.energy_pj
                );
            }
            let _ = writeln!(s, "{:<18} {:>101.1}", "total", total);
        }
        let _ = writeln!(s, "\nreference / forecaster energy ratio: {:.2}", self.ratio);
        s
    }
}
