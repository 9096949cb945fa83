//! Spiking transformer backbone over pooled event tokens.
//!
//! Tokens of a batch live in one `[N, d]` matrix with `N = sum_b K'_b * D`;
//! row `u * D + v` of a series is variate `v` at pooled step `u`, so every
//! pooled step is one contiguous run of `D * d` values and the interval
//! filters can scan it directly.

use std::f64::consts::PI;
use std::ops::Range;

use log::debug;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::{ealif_filter, eta_for_tau, ScanLayout};
use crate::numerics::{batch_norm, BatchNormState, Graph, Tensor, Var};
use crate::params::{Bindings, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    /// Time span that maps to one unit of normalized time in the embedding.
    pub span: f64,
    /// Floor of the attention normalizer.
    pub attn_epsilon: f64,
    /// Initial time constant of the attention filters.
    pub filter_tau: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            heads: 4,
            blocks: 2,
            span: 90.0,
            attn_epsilon: 1e-6,
            filter_tau: 2.0,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(Error::Config(format!("hidden dimension must be at least 2, got {}", self.dim)));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!("dimension {} is not divisible by {} heads", self.dim, self.heads)));
        }
        if self.span <= 0.0 || !self.span.is_finite() {
            return Err(Error::Config(format!("time span must be positive, got {}", self.span)));
        }
        if self.attn_epsilon <= 0.0 {
            return Err(Error::Config("attention epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Names of the batch norms inside block `l`.
pub fn block_norms(l: usize) -> [String; 5] {
    ["pre_attn", "q", "k", "v", "pre_ffn"].map(|n| format!("block{l}.bn_{n}"))
}

fn insert_norm(store: &mut ParamStore, name: &str, channels: usize) {
    store.insert(format!("{name}.gamma"), Tensor::ones(&[channels]));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[channels]));
}

/// Adds a time embedding under `{prefix}.*`.
///
/// Frequencies are spread geometrically from half a cycle to 24 cycles per
/// span; phases are random.
pub fn init_time_embedding(store: &mut ParamStore, prefix: &str, dim: usize, rng: &mut impl Rng) {
    let n = dim - 1;
    let omega: Vec<f64> = (0..n)
        .map(|i| {
            let frac = if n > 1 { i as f64 / (n - 1) as f64 } else { 0.0 };
            2.0 * PI * 0.5 * 48f64.powf(frac)
        })
        .collect();
    let phi = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    store.insert(format!("{prefix}.w"), Tensor::matrix(1, 1, vec![1.0]).expect("scalar"));
    store.insert(format!("{prefix}.omega"), Tensor::matrix(1, n, omega).expect("row"));
    store.insert(format!("{prefix}.phi"), Tensor::vector(phi));
}

/// Adds the embedding projection, shared time embedding `te.*`, and all
/// block parameters.
pub fn init_params(store: &mut ParamStore, channels: usize, cfg: &BackboneConfig, rng: &mut impl Rng) {
    let d = cfg.dim;
    store.init_xavier("embed.proj", channels, d, rng);
    init_time_embedding(store, "te", d, rng);
    for l in 0..cfg.blocks {
        for w in ["w_q", "w_k", "w_v", "w_o"] {
            store.init_xavier(&format!("block{l}.{w}"), d, d, rng);
        }
        for name in block_norms(l) {
            insert_norm(store, &name, d);
        }
        for stream in ["q", "k", "v"] {
            store.insert(format!("block{l}.eta_{stream}"), Tensor::scalar(eta_for_tau(cfg.filter_tau)));
        }
        store.init_xavier(&format!("block{l}.ffn_w1"), d, 2 * d, rng);
        store.insert(format!("block{l}.ffn_b1"), Tensor::zeros(&[2 * d]));
        store.init_xavier(&format!("block{l}.ffn_w2"), 2 * d, d, rng);
        store.insert(format!("block{l}.ffn_b2"), Tensor::zeros(&[d]));
    }
}

/// Batch-norm running statistics for every block.
pub fn init_norm_states(cfg: &BackboneConfig) -> Result<Vec<(String, BatchNormState)>> {
    let mut out = Vec::new();
    for l in 0..cfg.blocks {
        for name in block_norms(l) {
            out.push((name, BatchNormState::new(cfg.dim, cfg.bn_momentum, cfg.bn_epsilon)?));
        }
    }
    Ok(out)
}

/// `[w t / span, sin(omega_i t / span + phi_i)]` evaluated directly.
pub fn time_embedding(t: f64, store: &ParamStore, prefix: &str, span: f64) -> Result<Vec<f64>> {
    let w = store.get(&format!("{prefix}.w"))?.item();
    let omega = store.get(&format!("{prefix}.omega"))?;
    let phi = store.get(&format!("{prefix}.phi"))?;
    let x = t / span;
    let mut out = vec![w * x];
    out.extend(omega.data().iter().zip(phi.data()).map(|(o, p)| (o * x + p).sin()));
    Ok(out)
}

/// Time embedding of every entry of `times`, as an `[len, d]` node.
pub fn embed_times(g: &mut Graph, p: &Bindings, prefix: &str, times: &[f64], span: f64) -> Result<Var> {
    let x = Tensor::matrix(times.len(), 1, times.iter().map(|t| t / span).collect())?;
    let x = g.constant(x)?;
    let linear = g.matmul(x, p.get(&format!("{prefix}.w"))?)?;
    let angle = g.matmul(x, p.get(&format!("{prefix}.omega"))?)?;
    let angle = g.add(angle, p.get(&format!("{prefix}.phi"))?)?;
    let periodic = g.sin(angle)?;
    g.concat_cols(&[linear, periodic])
}

/// `E s[u, v, :] + TE(t_u)` for pooled spikes `[sum K', D * C]`.
pub fn embed_tokens(
    g: &mut Graph,
    p: &Bindings,
    spikes: Var,
    times: &[f64],
    variates: usize,
    span: f64,
) -> Result<Var> {
    let steps = times.len();
    let sv = g.value(spikes);
    if sv.rows() != steps || variates == 0 || !sv.cols().is_multiple_of(variates) {
        return Err(Error::Dimension(format!(
            "pooled spikes {:?} do not match {steps} steps of {variates} variates",
            sv.shape()
        )));
    }
    let channels = sv.cols() / variates;
    let per_variate = g.reshape(spikes, &[steps * variates, channels])?;
    let projected = g.matmul(per_variate, p.get("embed.proj")?)?;
    let te = embed_times(g, p, "te", times, span)?;
    let te = g.repeat_rows(te, variates)?;
    g.add(projected, te)
}

/// Row ranges and scan layout of a token batch.
#[derive(Debug, Clone)]
pub struct TokenLayout {
    pub variates: usize,
    /// Pooled-step ranges of each series.
    pub steps: Vec<Range<usize>>,
    /// Pooled gaps of each series.
    pub gaps: Vec<Vec<f64>>,
}

impl TokenLayout {
    pub fn new(variates: usize, gaps: Vec<Vec<f64>>) -> Self {
        let mut steps = Vec::with_capacity(gaps.len());
        let mut start = 0;
        for g in &gaps {
            steps.push(start..start + g.len());
            start += g.len();
        }
        Self { variates, steps, gaps }
    }

    pub fn token_rows(&self, series: usize) -> Range<usize> {
        let r = &self.steps[series];
        r.start * self.variates..r.end * self.variates
    }

    pub fn total_tokens(&self) -> usize {
        self.steps.last().map_or(0, |r| r.end) * self.variates
    }

    pub fn scan(&self, dim: usize) -> Result<ScanLayout> {
        ScanLayout::new(self.variates * dim, &self.gaps)
    }
}

/// Mutable batch-norm states of one block.
pub struct BlockNorms<'a> {
    pub pre_attn: &'a mut BatchNormState,
    pub q: &'a mut BatchNormState,
    pub k: &'a mut BatchNormState,
    pub v: &'a mut BatchNormState,
    pub pre_ffn: &'a mut BatchNormState,
}

fn norm(g: &mut Graph, p: &Bindings, name: &str, x: Var, st: &mut BatchNormState) -> Result<Var> {
    let gamma = p.get(&format!("{name}.gamma"))?;
    let beta = p.get(&format!("{name}.beta"))?;
    batch_norm(g, x, gamma, beta, st)
}

/// Membrane-filtered linear attention of block `l` over all tokens of each
/// series (non-causal).
pub fn sed_attention(
    g: &mut Graph,
    p: &Bindings,
    l: usize,
    cfg: &BackboneConfig,
    x: Var,
    layout: &TokenLayout,
    norms: &mut BlockNorms<'_>,
) -> Result<Var> {
    let names = block_norms(l);
    let q = g.matmul(x, p.get(&format!("block{l}.w_q"))?)?;
    let q = norm(g, p, &names[1], q, norms.q)?;
    let k = g.matmul(x, p.get(&format!("block{l}.w_k"))?)?;
    let k = norm(g, p, &names[2], k, norms.k)?;
    let v = g.matmul(x, p.get(&format!("block{l}.w_v"))?)?;
    let v = norm(g, p, &names[3], v, norms.v)?;

    let scan = layout.scan(cfg.dim)?;
    let phi_q = ealif_filter(g, q, p.get(&format!("block{l}.eta_q"))?, &scan, true)?;
    let phi_k = ealif_filter(g, k, p.get(&format!("block{l}.eta_k"))?, &scan, true)?;
    let v_mem = ealif_filter(g, v, p.get(&format!("block{l}.eta_v"))?, &scan, false)?;
    let heads = linear_attention(g, phi_q, phi_k, v_mem, layout, cfg)?;
    g.matmul(heads, p.get(&format!("block{l}.w_o"))?)
}

/// Per series and head: `(q KV) / (q . k_sum + eps)` with
/// `KV = k^T v` and `k_sum` the column sums of `k`.
pub fn linear_attention(
    g: &mut Graph,
    phi_q: Var,
    phi_k: Var,
    v: Var,
    layout: &TokenLayout,
    cfg: &BackboneConfig,
) -> Result<Var> {
    let dh = cfg.head_dim();
    let mut series_out = Vec::with_capacity(layout.steps.len());
    for b in 0..layout.steps.len() {
        let rows = layout.token_rows(b);
        let (qb, kb, vb) = (
            g.slice_rows(phi_q, rows.clone())?,
            g.slice_rows(phi_k, rows.clone())?,
            g.slice_rows(v, rows)?,
        );
        let mut head_out = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let cols = h * dh..(h + 1) * dh;
            let qh = g.slice_cols(qb, cols.clone())?;
            let kh = g.slice_cols(kb, cols.clone())?;
            let vh = g.slice_cols(vb, cols)?;
            let kt = g.transpose(kh)?;
            let kv = g.matmul(kt, vh)?;
            let ksum = g.sum_rows(kh)?;
            let ksum = g.transpose(ksum)?;
            let num = g.matmul(qh, kv)?;
            let den = g.matmul(qh, ksum)?;
            let den = g.add_const(den, cfg.attn_epsilon)?;
            head_out.push(g.div(num, den)?);
        }
        series_out.push(g.concat_cols(&head_out)?);
    }
    g.concat_rows(&series_out)
}

/// Pre-norm residual block: attention then a position-wise FFN.
pub fn block_forward(
    g: &mut Graph,
    p: &Bindings,
    l: usize,
    cfg: &BackboneConfig,
    x: Var,
    layout: &TokenLayout,
    norms: &mut BlockNorms<'_>,
) -> Result<Var> {
    let names = block_norms(l);
    let h = norm(g, p, &names[0], x, norms.pre_attn)?;
    let a = sed_attention(g, p, l, cfg, h, layout, norms)?;
    let x = g.add(x, a)?;
    let h = norm(g, p, &names[4], x, norms.pre_ffn)?;
    let h = g.matmul(h, p.get(&format!("block{l}.ffn_w1"))?)?;
    let h = g.add(h, p.get(&format!("block{l}.ffn_b1"))?)?;
    let h = g.relu(h)?;
    let h = g.matmul(h, p.get(&format!("block{l}.ffn_w2"))?)?;
    let h = g.add(h, p.get(&format!("block{l}.ffn_b2"))?)?;
    g.add(x, h)
}

/// Row weights of the observed-only time mean: `weights[b * D + v][row]`.
///
/// `masks` holds the pooled `[K', D]` mask of every series.
pub fn aggregation_weights(masks: &[&Tensor], layout: &TokenLayout) -> Result<Tensor> {
    let d = layout.variates;
    let n = layout.total_tokens();
    let mut w = Tensor::zeros(&[masks.len() * d, n]);
    for (b, m) in masks.iter().enumerate() {
        let steps = layout.steps[b].clone();
        if m.shape() != [steps.len(), d] {
            return Err(Error::Dimension(format!("pooled mask {:?} does not match the token layout", m.shape())));
        }
        let base = layout.token_rows(b).start;
        for v in 0..d {
            let count: f64 = (0..steps.len()).map(|u| m.at(&[u, v])).sum();
            if count == 0.0 {
                debug!("variate {v} of batch item {b} has no observed pooled step; its summary is zero");
                continue;
            }
            for u in 0..steps.len() {
                if m.at(&[u, v]) == 1.0 {
                    w.set(&[b * d + v, base + u * d + v], 1.0 / count);
                }
            }
        }
    }
    Ok(w)
}

/// Observed-only mean over pooled steps: `[B * D, d]` summaries.
pub fn masked_time_aggregation(g: &mut Graph, x: Var, masks: &[&Tensor], layout: &TokenLayout) -> Result<Var> {
    let w = g.constant(aggregation_weights(masks, layout)?)?;
    g.matmul(w, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neuron::event_gaps;
    use crate::neuron::FirstGap;
    use crate::numerics::Mode;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(cfg: &BackboneConfig, seed: u64) -> (ParamStore, Vec<(String, BatchNormState)>) {
        let mut s = ParamStore::new();
        init_params(&mut s, 3, cfg, &mut ChaCha8Rng::seed_from_u64(seed));
        (s, init_norm_states(cfg).unwrap())
    }

    fn norms_of(states: &mut [(String, BatchNormState)], l: usize) -> BlockNorms<'_> {
        let [a, q, k, v, f] = &mut states[l * 5..l * 5 + 5] else { panic!() };
        BlockNorms { pre_attn: &mut a.1, q: &mut q.1, k: &mut k.1, v: &mut v.1, pre_ffn: &mut f.1 }
    }

    #[test]
    fn time_embedding_examples() {
        let mut s = ParamStore::new();
        s.insert("te.w", Tensor::matrix(1, 1, vec![0.0]).unwrap());
        s.insert("te.omega", Tensor::zeros(&[1, 3]));
        s.insert("te.phi", Tensor::zeros(&[3]));
        assert_eq!(time_embedding(17.0, &s, "te", 90.0).unwrap(), vec![0.0; 4]);
        s.insert("te.phi", Tensor::vector(vec![PI / 2.0; 3]));
        let e = time_embedding(0.0, &s, "te", 90.0).unwrap();
        assert!(e[1..].iter().all(|x| (x - 1.0).abs() < 1e-15));

        let mut s = ParamStore::new();
        init_time_embedding(&mut s, "te", 6, &mut ChaCha8Rng::seed_from_u64(2));
        let omega = s.get("te.omega").unwrap().data().to_vec();
        let a = time_embedding(3.3, &s, "te", 90.0).unwrap();
        for (i, o) in omega.iter().enumerate() {
            let period = 2.0 * PI * 90.0 / o;
            let b = time_embedding(3.3 + period, &s, "te", 90.0).unwrap();
            assert!((a[i + 1] - b[i + 1]).abs() < 1e-9);
        }
    }

    #[test]
    fn graph_time_embedding_matches_direct() {
        let mut s = ParamStore::new();
        init_time_embedding(&mut s, "te", 5, &mut ChaCha8Rng::seed_from_u64(4));
        let mut g = Graph::new();
        let p = Bindings::bind(&mut g, &s).unwrap();
        let times = [0.0, 12.5, 95.0];
        let te = embed_times(&mut g, &p, "te", &times, 90.0).unwrap();
        for (r, &t) in times.iter().enumerate() {
            let want = time_embedding(t, &s, "te", 90.0).unwrap();
            for (a, b) in g.value(te).row(r).iter().zip(&want) {
                assert!((a - b).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn token_embedding_selects_projection_column() {
        let cfg = BackboneConfig { dim: 4, heads: 2, ..Default::default() };
        let (s, _) = setup(&cfg, 0);
        let mut g = Graph::new();
        let p = Bindings::bind(&mut g, &s).unwrap();
        // 2 steps, 2 variates, 3 channels; variate 1 at step 0 fires channel 2
        let mut spikes = Tensor::zeros(&[2, 6]);
        spikes.set(&[0, 5], 1.0);
        let sv = g.constant(spikes).unwrap();
        let tok = embed_tokens(&mut g, &p, sv, &[3.0, 7.0], 2, 90.0).unwrap();
        let te0 = time_embedding(3.0, &s, "te", 90.0).unwrap();
        let te1 = time_embedding(7.0, &s, "te", 90.0).unwrap();
        let proj = s.get("embed.proj").unwrap();
        let t = g.value(tok);
        for j in 0..4 {
            assert!((t.at(&[0, j]) - te0[j]).abs() < 1e-14);
            assert!((t.at(&[1, j]) - te0[j] - proj.at(&[2, j])).abs() < 1e-14);
            assert!((t.at(&[2, j]) - te1[j]).abs() < 1e-14);
            assert_eq!(t.at(&[2, j]), t.at(&[3, j]));
        }
    }

    /// Quadratic double sum over every (query token, key token) pair.
    fn quadratic_attention(q: &Tensor, k: &Tensor, v: &Tensor, heads: usize, eps: f64) -> Tensor {
        let (n, d) = (q.rows(), q.cols());
        let dh = d / heads;
        let mut out = Tensor::zeros(&[n, d]);
        for h in 0..heads {
            for i in 0..n {
                let mut num = vec![0.0; dh];
                let mut den = 0.0;
                for j in 0..n {
                    let score: f64 = (0..dh).map(|c| q.at(&[i, h * dh + c]) * k.at(&[j, h * dh + c])).sum();
                    den += score;
                    for c in 0..dh {
                        num[c] += score * v.at(&[j, h * dh + c]);
                    }
                }
                for c in 0..dh {
                    out.set(&[i, h * dh + c], num[c] / (den + eps));
                }
            }
        }
        out
    }

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize, lo: f64) -> Tensor {
        Tensor::matrix(r, c, (0..r * c).map(|_| rng.random_range(lo..2.0)).collect()).unwrap()
    }

    #[test]
    fn linear_attention_matches_quadratic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cfg = BackboneConfig { dim: 8, heads: 2, ..Default::default() };
        for _ in 0..20 {
            let (steps, d) = (rng.random_range(1..6), rng.random_range(1..4));
            let n = steps * d;
            let (q, k, v) = (random(&mut rng, n, 8, 0.01), random(&mut rng, n, 8, 0.01), random(&mut rng, n, 8, -2.0));
            let layout = TokenLayout::new(d, vec![vec![0.0; steps]]);
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()).unwrap(), g.constant(k.clone()).unwrap(), g.constant(v.clone()).unwrap());
            let y = linear_attention(&mut g, qv, kv, vv, &layout, &cfg).unwrap();
            let want = quadratic_attention(&q, &k, &v, 2, cfg.attn_epsilon);
            assert!(g.value(y).max_abs_diff(&want) < 1e-10);
        }
    }

    #[test]
    fn constant_values_pass_through() {
        let cfg = BackboneConfig { dim: 4, heads: 1, attn_epsilon: 1e-12, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = random(&mut rng, 6, 4, 0.5);
        let k = random(&mut rng, 6, 4, 0.5);
        let row = [0.3, -1.0, 2.0, 0.0];
        let v = Tensor::from_rows(&vec![row.to_vec(); 6]).unwrap();
        let layout = TokenLayout::new(2, vec![vec![0.0; 3]]);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q).unwrap(), g.constant(k).unwrap(), g.constant(v.clone()).unwrap());
        let y = linear_attention(&mut g, qv, kv, vv, &layout, &cfg).unwrap();
        assert!(g.value(y).max_abs_diff(&v) < 1e-10);
    }

    fn block_tokens(rng: &mut ChaCha8Rng, steps: usize, d: usize, dim: usize) -> (Tensor, TokenLayout) {
        let mut t = 0.0;
        let times: Vec<f64> = (0..steps)
            .map(|_| {
                t += rng.random_range(0.0..3.0);
                t
            })
            .collect();
        let gaps = event_gaps(&times, FirstGap::Zero).unwrap();
        (random(rng, steps * d, dim, -2.0), TokenLayout::new(d, vec![gaps]))
    }

    #[test]
    fn zero_output_layers_make_block_identity() {
        let cfg = BackboneConfig { dim: 8, heads: 2, blocks: 1, ..Default::default() };
        let (mut s, mut states) = setup(&cfg, 5);
        s.insert("block0.w_o", Tensor::zeros(&[8, 8]));
        s.insert("block0.ffn_w2", Tensor::zeros(&[16, 8]));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (x, layout) = block_tokens(&mut rng, 5, 3, 8);
        let mut g = Graph::new();
        let p = Bindings::bind(&mut g, &s).unwrap();
        let xv = g.constant(x.clone()).unwrap();
        let y = block_forward(&mut g, &p, 0, &cfg, xv, &layout, &mut norms_of(&mut states, 0)).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn perturbing_one_token_reaches_others() {
        let cfg = BackboneConfig { dim: 8, heads: 2, blocks: 1, ..Default::default() };
        let (s, mut states) = setup(&cfg, 6);
        for st in states.iter_mut() {
            st.1.mode = Mode::Eval;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, layout) = block_tokens(&mut rng, 4, 2, 8);
        let run = |x: &Tensor, states: &mut Vec<(String, BatchNormState)>| {
            let mut g = Graph::new();
            let p = Bindings::bind(&mut g, &s).unwrap();
            let xv = g.constant(x.clone()).unwrap();
            let y = block_forward(&mut g, &p, 0, &cfg, xv, &layout, &mut norms_of(states, 0)).unwrap();
            g.value(y).clone()
        };
        let a = run(&x, &mut states);
        let mut x2 = x.clone();
        x2.set(&[7, 0], x2.at(&[7, 0]) + 1.0);
        let b = run(&x2, &mut states);
        // the first token is untouched but its output still moves
        assert!((0..8).any(|j| a.at(&[0, j]) != b.at(&[0, j])));
    }

    #[test]
    fn aggregation_examples() {
        let layout = TokenLayout::new(2, vec![vec![0.0; 3]]);
        let x = Tensor::from_rows(&[
            vec![1.0, 2.0],
            vec![10.0, 20.0],
            vec![3.0, 4.0],
            vec![30.0, 40.0],
            vec![5.0, 6.0],
            vec![50.0, 60.0],
        ])
        .unwrap();
        let all = Tensor::ones(&[3, 2]);
        let one = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x).unwrap();
        let z = masked_time_aggregation(&mut g, xv, &[&all, &one], &TokenLayout::new(2, vec![vec![0.0; 3]; 2]));
        assert!(z.is_err());
        let z = masked_time_aggregation(&mut g, xv, &[&all], &layout).unwrap();
        let want = Tensor::matrix(2, 2, vec![3.0, 4.0, 30.0, 40.0]).unwrap();
        assert!(g.value(z).max_abs_diff(&want) < 1e-12);
        let z = masked_time_aggregation(&mut g, xv, &[&one], &layout).unwrap();
        assert_eq!(g.value(z).data(), &[3.0, 4.0, 0.0, 0.0]);
    }

    proptest! {
        #[test]
        fn aggregation_ignores_unobserved(seed in 0u64..500, steps in 1usize..6, d in 1usize..4) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let layout = TokenLayout::new(d, vec![vec![0.0; steps]]);
            let mask = Tensor::matrix(steps, d, (0..steps * d).map(|_| if rng.random_bool(0.5) { 1.0 } else { 0.0 }).collect()).unwrap();
            let x = random(&mut rng, steps * d, 3, -2.0);
            let mut y = x.clone();
            for u in 0..steps {
                for v in 0..d {
                    if mask.at(&[u, v]) == 0.0 {
                        for j in 0..3 {
                            y.set(&[u * d + v, j], rng.random_range(-100.0..100.0));
                        }
                    }
                }
            }
            let mut g = Graph::new();
            let (xv, yv) = (g.constant(x).unwrap(), g.constant(y).unwrap());
            let a = masked_time_aggregation(&mut g, xv, &[&mask], &layout).unwrap();
            let b = masked_time_aggregation(&mut g, yv, &[&mask], &layout).unwrap();
            prop_assert_eq!(g.value(a), g.value(b));
        }
    }
}
