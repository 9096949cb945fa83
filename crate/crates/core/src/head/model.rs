use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::scaler::Scaler;
use super::{decode, init_decoder};
use crate::backbone::{self, block_forward, embed_tokens, masked_time_aggregation, BackboneConfig, BlockNorms, TokenLayout};
use crate::downsample::{pool_mask, pool_times, pooled_len};
use crate::encoder::{self, encode_batch, EncoderConfig, EventSeries};
use crate::error::{Error, Result};
use crate::neuron::{eta_for_tau, event_gaps, SpikeMode};
use crate::numerics::{BatchNormState, Graph, Mode, Tensor, Var};
use crate::params::{Bindings, ParamStore};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variates: usize,
    pub encoder: EncoderConfig,
    /// Pooling stride over events.
    pub stride: usize,
    pub backbone: BackboneConfig,
    /// Decoder reuses the backbone's time embedding.
    pub share_time_embedding: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variates: 4,
            encoder: EncoderConfig::default(),
            stride: 4,
            backbone: BackboneConfig::default(),
            share_time_embedding: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variates == 0 {
            return Err(Error::Config("model needs at least one variate".into()));
        }
        if self.stride == 0 {
            return Err(Error::Config("pooling stride must be at least 1".into()));
        }
        self.encoder.validate()?;
        self.backbone.validate()
    }

    /// Initial time constant of the encoder neurons and the attention filters.
    pub fn set_tau(&mut self, tau: f64) {
        self.encoder.neuron.eta = eta_for_tau(tau);
        self.backbone.filter_tau = tau;
    }

    pub fn te_prefix(&self) -> &'static str {
        if self.share_time_embedding {
            "te"
        } else {
            "decoder.te"
        }
    }
}

/// Running statistics of every batch norm in the model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Norms {
    pub encoder: BatchNormState,
    /// Five per block, in `block_norms` order.
    pub blocks: Vec<(String, BatchNormState)>,
}

impl Norms {
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Ok(Self { encoder: cfg.encoder.batch_norm()?, blocks: backbone::init_norm_states(&cfg.backbone)? })
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.encoder.mode = mode;
        self.blocks.iter_mut().for_each(|(_, s)| s.mode = mode);
    }

    fn block(&mut self, l: usize) -> Result<BlockNorms<'_>> {
        let Some([a, q, k, v, f]) = self.blocks.get_mut(l * 5..l * 5 + 5) else {
            return Err(Error::Config(format!("no batch-norm states for block {l}")));
        };
        Ok(BlockNorms { pre_attn: &mut a.1, q: &mut q.1, k: &mut k.1, v: &mut v.1, pre_ffn: &mut f.1 })
    }
}

/// Flat query order of a batch: item, then variate, then query.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryLayout {
    /// Summary row (`item * D + variate`) of every query.
    pub rows: Vec<usize>,
    pub times: Vec<f64>,
    /// `counts[item][variate]`.
    pub counts: Vec<Vec<usize>>,
}

impl QueryLayout {
    pub fn new(queries: &[&[Vec<f64>]], variates: usize) -> Result<Self> {
        let mut rows = Vec::new();
        let mut times = Vec::new();
        let mut counts = Vec::with_capacity(queries.len());
        for (b, per_variate) in queries.iter().enumerate() {
            if per_variate.len() != variates {
                return Err(Error::Dimension(format!(
                    "batch item {b} has queries for {} variates, expected {variates}",
                    per_variate.len()
                )));
            }
            for (v, qs) in per_variate.iter().enumerate() {
                rows.extend(std::iter::repeat_n(b * variates + v, qs.len()));
                times.extend_from_slice(qs);
            }
            counts.push(per_variate.iter().map(Vec::len).collect());
        }
        Ok(Self { rows, times, counts })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Splits a flat prediction vector back into `[item][variate][query]`.
    pub fn unflatten(&self, flat: &[f64]) -> Vec<Vec<Vec<f64>>> {
        let mut it = flat.iter().copied();
        self.counts.iter().map(|per| per.iter().map(|&n| it.by_ref().take(n).collect()).collect()).collect()
    }
}

/// Event and spike counts of one forward pass.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub series: usize,
    pub events: usize,
    /// Observed `(event, variate)` entries.
    pub observed: usize,
    pub encoder_spikes: f64,
    pub encoder_slots: usize,
    pub pooled_steps: usize,
    pub pooled_observed: usize,
    pub pooled_spikes: f64,
    pub pooled_slots: usize,
    pub tokens: usize,
    pub queries: usize,
}

impl Activity {
    pub fn encoder_rate(&self) -> f64 {
        rate(self.encoder_spikes, self.encoder_slots)
    }

    pub fn pooled_rate(&self) -> f64 {
        rate(self.pooled_spikes, self.pooled_slots)
    }

    pub fn merge(&mut self, other: &Activity) {
        self.series += other.series;
        self.events += other.events;
        self.observed += other.observed;
        self.encoder_spikes += other.encoder_spikes;
        self.encoder_slots += other.encoder_slots;
        self.pooled_steps += other.pooled_steps;
        self.pooled_observed += other.pooled_observed;
        self.pooled_spikes += other.pooled_spikes;
        self.pooled_slots += other.pooled_slots;
        self.tokens += other.tokens;
        self.queries += other.queries;
    }
}

fn rate(spikes: f64, slots: usize) -> f64 {
    if slots == 0 {
        0.0
    } else {
        spikes / slots as f64
    }
}

pub struct Forward {
    /// `[queries, 1]` in [`QueryLayout`] order.
    pub predictions: Var,
    pub queries: QueryLayout,
    pub activity: Activity,
}

/// Records encode -> pool -> blocks -> masked aggregation -> decode for a batch.
pub fn forward(
    g: &mut Graph,
    p: &Bindings,
    cfg: &ModelConfig,
    norms: &mut Norms,
    batch: &[&EventSeries],
    queries: &[&[Vec<f64>]],
    mode: SpikeMode,
) -> Result<Forward> {
    cfg.validate()?;
    let d = cfg.variates;
    if batch.len() != queries.len() {
        return Err(Error::Dimension(format!("{} series but {} query sets", batch.len(), queries.len())));
    }
    for s in batch {
        if s.variates() != d {
            return Err(Error::Dimension(format!("series has {} variates, model expects {d}", s.variates())));
        }
        pooled_len(s.len(), cfg.stride)?;
    }
    let enc = encode_batch(g, p, &cfg.encoder, &mut norms.encoder, batch, mode)?;
    let (pooled, _) = g.max_pool_rows(enc.spikes, cfg.stride, &enc.segments)?;

    let mut times = Vec::new();
    let mut gaps = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for s in batch {
        let t = pool_times(&s.times, cfg.stride)?;
        gaps.push(event_gaps(&t, cfg.encoder.first_gap)?);
        masks.push(pool_mask(&s.mask, cfg.stride)?);
        times.extend(t);
    }
    let layout = TokenLayout::new(d, gaps);
    let span = cfg.backbone.span;
    let mut x = embed_tokens(g, p, pooled, &times, d, span)?;
    for l in 0..cfg.backbone.blocks {
        let mut bn = norms.block(l)?;
        x = block_forward(g, p, l, &cfg.backbone, x, &layout, &mut bn)?;
    }
    let mask_refs: Vec<&Tensor> = masks.iter().collect();
    let summaries = masked_time_aggregation(g, x, &mask_refs, &layout)?;
    let ql = QueryLayout::new(queries, d)?;
    let predictions = decode(g, p, summaries, &ql.rows, &ql.times, cfg.te_prefix(), span)?;

    let activity = Activity {
        series: batch.len(),
        events: batch.iter().map(|s| s.len()).sum(),
        observed: batch.iter().map(|s| s.observed()).sum(),
        encoder_spikes: g.value(enc.spikes).sum(),
        encoder_slots: g.value(enc.spikes).len(),
        pooled_steps: times.len(),
        pooled_observed: masks.iter().map(|m| m.sum() as usize).sum(),
        pooled_spikes: g.value(pooled).sum(),
        pooled_slots: g.value(pooled).len(),
        tokens: layout.total_tokens(),
        queries: ql.len(),
    };
    Ok(Forward { predictions, queries: ql, activity })
}

/// Parameters, normalization statistics, and target scaling of a forecaster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub norms: Norms,
    pub scaler: Scaler,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    #[serde(flatten)]
    model: Model,
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        encoder::init_params(&mut params, config.variates, &config.encoder, &mut rng);
        backbone::init_params(&mut params, config.encoder.channels, &config.backbone, &mut rng);
        init_decoder(&mut params, config.backbone.dim, !config.share_time_embedding, &mut rng);
        let norms = Norms::new(&config)?;
        let scaler = Scaler::identity(config.variates);
        Ok(Self { config, params, norms, scaler })
    }

    /// Eval-mode forecasts in the model's (scaled) units as
    /// `[item][variate][query]`, plus the activity of the pass.
    pub fn predict_scaled(
        &mut self,
        batch: &[&EventSeries],
        queries: &[&[Vec<f64>]],
    ) -> Result<(Vec<Vec<Vec<f64>>>, Activity)> {
        self.norms.set_mode(Mode::Eval);
        let mut g = Graph::new();
        let p = Bindings::bind(&mut g, &self.params)?;
        let out = forward(&mut g, &p, &self.config, &mut self.norms, batch, queries, SpikeMode::Exact)?;
        let flat = g.value(out.predictions).data().to_vec();
        Ok((out.queries.unflatten(&flat), out.activity))
    }

    /// Path of the JSON config written next to a checkpoint.
    pub fn sidecar(path: &Path) -> PathBuf {
        path.with_extension("config.json")
    }

    /// Writes the checkpoint and its config sidecar.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir)?;
        }
        let ck = Checkpoint { version: CHECKPOINT_VERSION, model: self.clone() };
        fs::write(path, serde_json::to_string(&ck)? + "\n")?;
        fs::write(Self::sidecar(path), serde_json::to_string_pretty(&self.config)? + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::Usage(format!("checkpoint {} does not exist", path.display())));
        }
        let ck: Checkpoint = serde_json::from_str(&fs::read_to_string(path)?)?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!("unsupported checkpoint version {}", ck.version)));
        }
        let m = ck.model;
        m.config.validate()?;
        let fresh = Model::new(m.config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            if m.params.get(name)?.shape() != t.shape() {
                return Err(Error::Data(format!("checkpoint parameter `{name}` has the wrong shape")));
            }
        }
        if fresh.params.len() != m.params.len() {
            return Err(Error::Data("checkpoint has unexpected parameters".into()));
        }
        Ok(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::align_events;
    use crate::head::mse_loss;
    use crate::numerics::gradcheck::{check_gradients, GradCheckConfig};
    use rand::Rng;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            variates: 2,
            encoder: EncoderConfig { channels: 2, ..Default::default() },
            stride: 2,
            backbone: BackboneConfig { dim: 4, heads: 2, blocks: 1, span: 10.0, ..Default::default() },
            share_time_embedding: true,
        }
    }

    fn toy_series(seed: u64, k: usize) -> EventSeries {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = 0.0;
        let mut raw = vec![Vec::new(), Vec::new()];
        for _ in 0..k {
            t += rng.random_range(0.2..2.0);
            let v = rng.random_range(0..3usize);
            for (d, r) in raw.iter_mut().enumerate() {
                if v == 2 || v == d {
                    r.push((t, rng.random_range(-2.0..2.0)));
                }
            }
        }
        align_events(&raw).unwrap()
    }

    fn toy_queries(s: &EventSeries) -> Vec<Vec<f64>> {
        let last = *s.times.last().unwrap();
        vec![vec![last + 1.0, last + 2.5], vec![last + 0.5]]
    }

    #[test]
    fn output_shape_and_activity() {
        let mut m = Model::new(tiny_config(), 0).unwrap();
        let (a, b) = (toy_series(1, 9), toy_series(2, 6));
        let (qa, qb) = (toy_queries(&a), toy_queries(&b));
        let (pred, act) = m.predict_scaled(&[&a, &b], &[&qa, &qb]).unwrap();
        assert_eq!(pred.len(), 2);
        assert_eq!(pred[0][0].len(), 2);
        assert_eq!(pred[1][1].len(), 1);
        assert!(pred.iter().flatten().flatten().all(|x| x.is_finite()));
        assert_eq!(act.events, a.len() + b.len());
        assert_eq!(act.pooled_steps, a.len() / 2 + b.len() / 2);
        assert_eq!(act.tokens, act.pooled_steps * 2);
        assert_eq!(act.queries, 6);
        assert!((0.0..=1.0).contains(&act.encoder_rate()));
        assert!(act.pooled_rate() >= act.encoder_rate());
    }

    #[test]
    fn stride_longer_than_series_rejected() {
        let mut m = Model::new(ModelConfig { stride: 8, ..tiny_config() }, 0).unwrap();
        let s = toy_series(3, 4);
        let q = toy_queries(&s);
        assert!(matches!(m.predict_scaled(&[&s], &[&q]), Err(Error::Config(_))));
    }

    #[test]
    fn separate_decoder_time_embedding() {
        let cfg = ModelConfig { share_time_embedding: false, ..tiny_config() };
        let m = Model::new(cfg, 0).unwrap();
        assert!(m.params.contains("decoder.te.omega"));
        assert!(!Model::new(tiny_config(), 0).unwrap().params.contains("decoder.te.omega"));
    }

    #[test]
    fn save_load_round_trip() {
        let mut m = Model::new(tiny_config(), 4).unwrap();
        m.scaler.variates[1].mean = 3.25;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck").join("model.json");
        m.save(&path).unwrap();
        assert!(Model::sidecar(&path).exists());
        let back = Model::load(&path).unwrap();
        assert_eq!(back, m);
        assert!(matches!(Model::load(&dir.path().join("missing.json")), Err(Error::Usage(_))));
    }

    /// Whole-pipeline loss as a function of every parameter tensor.
    fn pipeline_check(seed: u64) -> f64 {
        let cfg = tiny_config();
        let m = Model::new(cfg.clone(), seed).unwrap();
        let (a, b) = (toy_series(seed * 7 + 1, 8), toy_series(seed * 7 + 2, 7));
        let (qa, qb) = (toy_queries(&a), toy_queries(&b));
        let truth = [0.3, -0.2, 1.0, 0.0, 0.5, -1.0];
        let inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
        let report = check_gradients(
            &inputs,
            |g, vars| {
                let p = Bindings::from_vars(&m.params, vars)?;
                let mut norms = m.norms.clone();
                let out = forward(g, &p, &cfg, &mut norms, &[&a, &b], &[&qa, &qb], SpikeMode::Smoothed)?;
                mse_loss(g, out.predictions, &truth, &out.queries.counts)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        report.max_rel_err
    }

    #[test]
    fn pipeline_gradients_match_finite_differences() {
        for seed in 0..3 {
            let err = pipeline_check(seed);
            assert!(err < 1e-4, "seed {seed}: max relative error {err}");
        }
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let mut m = Model::new(tiny_config(), 5).unwrap();
        m.norms.set_mode(Mode::Train);
        let (a, b) = (toy_series(11, 12), toy_series(12, 10));
        let (qa, qb) = (toy_queries(&a), toy_queries(&b));
        let mut g = Graph::new();
        let p = Bindings::bind(&mut g, &m.params).unwrap();
        let out = forward(&mut g, &p, &m.config, &mut m.norms, &[&a, &b], &[&qa, &qb], SpikeMode::Exact).unwrap();
        let loss = mse_loss(&mut g, out.predictions, &[1.0, -1.0, 0.5, 2.0, 0.0, 1.0], &out.queries.counts).unwrap();
        g.backward(loss).unwrap();
        let grads = p.grads(&g);
        let nonzero = grads.values().filter(|t| t.norm() > 0.0).count();
        let missing: Vec<_> = grads.iter().filter(|(_, t)| t.norm() == 0.0).map(|(n, _)| n.clone()).collect();
        assert!(nonzero as f64 >= 0.95 * grads.len() as f64, "no gradient: {missing:?}");
    }
}
