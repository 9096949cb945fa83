//! Leaky integrate-and-fire dynamics.
//!
//! [`lif_step`] is the fixed-leak reference neuron. [`ealif_step`] replaces
//! the constant leak with `exp(-dt / tau)` so the membrane decays by the
//! actual elapsed time between events. The tape-level scans
//! ([`ealif_spike_scan`], [`ealif_filter`]) carry hand-derived backward
//! rules so a whole sequence costs one tape node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{sigmoid, softplus, softplus_inv, CustomOp, Graph, Tensor, Var};

/// Fixed-leak LIF parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifConfig {
    pub alpha: f64,
    pub v_th: f64,
    pub alpha_ste: f64,
}

impl LifConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("LIF leak must lie in [0,1), got {}", self.alpha)));
        }
        check_threshold(self.v_th, self.alpha_ste)
    }
}

/// Event-aligned LIF parameters; `tau = softplus(eta) + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EaLifConfig {
    pub eta: f64,
    pub v_th: f64,
    pub alpha_ste: f64,
}

impl Default for EaLifConfig {
    fn default() -> Self {
        Self { eta: eta_for_tau(2.0), v_th: 1.0, alpha_ste: 4.0 }
    }
}

impl EaLifConfig {
    pub fn with_tau(tau: f64) -> Self {
        Self { eta: eta_for_tau(tau), ..Self::default() }
    }

    pub fn tau(&self) -> f64 {
        tau_of(self.eta)
    }

    pub fn validate(&self) -> Result<()> {
        check_threshold(self.v_th, self.alpha_ste)
    }
}

fn check_threshold(v_th: f64, alpha_ste: f64) -> Result<()> {
    if v_th <= 0.0 {
        return Err(Error::Config(format!("threshold must be positive, got {v_th}")));
    }
    if alpha_ste <= 0.0 {
        return Err(Error::Config(format!("surrogate slope must be positive, got {alpha_ste}")));
    }
    Ok(())
}

pub fn tau_of(eta: f64) -> f64 {
    softplus(eta) + 1.0
}

/// Smallest representable excess over 1 used when a time constant of exactly
/// 1 is requested (the parameterization only reaches it asymptotically).
pub const MIN_TAU_EXCESS: f64 = 1e-3;

/// Inverse of [`tau_of`]; requests for `tau <= 1` are clamped to `1 + MIN_TAU_EXCESS`.
pub fn eta_for_tau(tau: f64) -> f64 {
    softplus_inv((tau - 1.0).max(MIN_TAU_EXCESS))
}

/// Membrane potential carried between steps (post-reset `v`).
#[derive(Debug, Clone, PartialEq)]
pub struct NeuronState {
    pub v: Tensor,
}

impl NeuronState {
    pub fn zeros(shape: &[usize]) -> Self {
        Self { v: Tensor::zeros(shape) }
    }
}

/// Pre-spike membrane, spikes, and post-reset membrane of one update.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub m: Tensor,
    pub s: Tensor,
    pub v: Tensor,
}

/// `H(u) = 1{u >= 0}`.
pub fn heaviside(u: f64) -> f64 {
    if u >= 0.0 {
        1.0
    } else {
        0.0
    }
}

/// STE-sigmoid derivative `a * sig(a u) * (1 - sig(a u))`.
pub fn surrogate_grad(u: f64, alpha_ste: f64) -> f64 {
    let s = sigmoid(alpha_ste * u);
    alpha_ste * s * (1.0 - s)
}

/// Forward behaviour of the spike nonlinearity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum SpikeMode {
    /// Exact Heaviside forward with surrogate backward.
    #[default]
    Exact,
    /// `sig(a u)` forward; its derivative equals the surrogate, which makes
    /// the whole model checkable against finite differences.
    Smoothed,
}

impl SpikeMode {
    pub fn fire(self, u: f64, alpha_ste: f64) -> f64 {
        match self {
            SpikeMode::Exact => heaviside(u),
            SpikeMode::Smoothed => sigmoid(alpha_ste * u),
        }
    }
}

fn integrate_and_fire(v_prev: &Tensor, x: &Tensor, leak: f64, v_th: f64) -> Result<StepOutput> {
    let m = v_prev.zip_map(x, |v, xi| leak * v + (1.0 - leak) * xi)?;
    let s = m.map(|mi| heaviside(mi - v_th));
    let v = m.zip_map(&s, |mi, si| mi - v_th * si)?;
    Ok(StepOutput { m, s, v })
}

/// One fixed-leak step; updates `state` in place.
pub fn lif_step(state: &mut NeuronState, x: &Tensor, cfg: &LifConfig) -> Result<StepOutput> {
    let out = integrate_and_fire(&state.v, x, cfg.alpha, cfg.v_th)?;
    state.v = out.v.clone();
    Ok(out)
}

/// `exp(-dt / tau)` with `tau = softplus(eta) + 1`.
pub fn ealif_leak(dt: f64, eta: f64) -> Result<f64> {
    if dt < 0.0 || !dt.is_finite() {
        return Err(Error::Data(format!("inter-event gap must be finite and non-negative, got {dt}")));
    }
    Ok((-dt / tau_of(eta)).exp())
}

/// `d beta / d eta` for `beta = exp(-dt / tau(eta))`.
fn leak_grad_eta(dt: f64, eta: f64, beta: f64) -> f64 {
    let tau = tau_of(eta);
    beta * dt / (tau * tau) * sigmoid(eta)
}

/// One event-aligned step after a gap `dt`; updates `state` in place.
pub fn ealif_step(state: &mut NeuronState, current: &Tensor, dt: f64, cfg: &EaLifConfig) -> Result<StepOutput> {
    let beta = ealif_leak(dt, cfg.eta)?;
    let out = integrate_and_fire(&state.v, current, beta, cfg.v_th)?;
    state.v = out.v.clone();
    Ok(out)
}

/// How the gap before the first event of a sequence is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FirstGap {
    /// `dt_1 = 0`, so `beta = 1` and the first current is zeroed.
    #[default]
    Zero,
    /// `dt_1` is the median of the remaining gaps.
    Median,
}

/// Inter-event gaps of a nondecreasing timestamp sequence.
pub fn event_gaps(times: &[f64], first: FirstGap) -> Result<Vec<f64>> {
    let mut dt = Vec::with_capacity(times.len());
    for (k, &t) in times.iter().enumerate() {
        if !t.is_finite() {
            return Err(Error::Data(format!("timestamp {k} is not finite")));
        }
        let gap = if k == 0 { 0.0 } else { t - times[k - 1] };
        if gap < 0.0 {
            return Err(Error::Data(format!("timestamps decrease at index {k}")));
        }
        dt.push(gap);
    }
    if first == FirstGap::Median && dt.len() > 1 {
        let mut rest = dt[1..].to_vec();
        rest.sort_by(f64::total_cmp);
        let n = rest.len();
        dt[0] = if n % 2 == 1 { rest[n / 2] } else { 0.5 * (rest[n / 2 - 1] + rest[n / 2]) };
    }
    Ok(dt)
}

/// Step structure of a batch of independent sequences laid out back to back.
///
/// A step is `step_width` contiguous values; the recurrent state is reset to
/// zero at the first step of every sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ScanLayout {
    pub step_width: usize,
    dt: Vec<f64>,
    resets: Vec<bool>,
}

impl ScanLayout {
    pub fn new(step_width: usize, sequences: &[Vec<f64>]) -> Result<Self> {
        let mut dt = Vec::new();
        let mut resets = Vec::new();
        for seq in sequences {
            for (k, &gap) in seq.iter().enumerate() {
                if gap < 0.0 || !gap.is_finite() {
                    return Err(Error::Data(format!("inter-event gap must be non-negative, got {gap}")));
                }
                dt.push(gap);
                resets.push(k == 0);
            }
        }
        Ok(Self { step_width, dt, resets })
    }

    pub fn steps(&self) -> usize {
        self.dt.len()
    }

    fn check(&self, t: &Tensor) -> Result<()> {
        if t.len() != self.steps() * self.step_width {
            return Err(Error::Data(format!(
                "sequence of {} values does not match {} steps of width {}",
                t.len(),
                self.steps(),
                self.step_width
            )));
        }
        Ok(())
    }
}

fn eta_value(g: &Graph, eta: Var) -> Result<f64> {
    let t = g.value(eta);
    if t.len() != 1 {
        return Err(Error::Dimension(format!("eta must be a scalar, got {:?}", t.shape())));
    }
    Ok(t.item())
}

/// Heaviside spike with STE-sigmoid backward (or the smoothed forward).
pub fn surrogate_heaviside(g: &mut Graph, u: Var, alpha_ste: f64, mode: SpikeMode) -> Result<Var> {
    let out = g.value(u).map(|x| mode.fire(x, alpha_ste));
    g.custom(&[u], out, Box::new(SpikeOp { alpha_ste }))
}

struct SpikeOp {
    alpha_ste: f64,
}

impl CustomOp for SpikeOp {
    fn name(&self) -> &'static str {
        "surrogate_heaviside"
    }

    fn backward(&self, inputs: &[&Tensor], _output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let gu = inputs[0].zip_map(grad, |u, g| g * surrogate_grad(u, self.alpha_ste))?;
        Ok(vec![Some(gu)])
    }
}

/// Spiking EA-LIF over every sequence of `layout`; returns the spike train.
///
/// `current` holds `steps * step_width` values and `eta` is a scalar node.
/// The backward pass is BPTT through the reset, with the surrogate standing
/// in for the Heaviside derivative.
pub fn ealif_spike_scan(
    g: &mut Graph,
    current: Var,
    eta: Var,
    layout: &ScanLayout,
    cfg: &EaLifConfig,
    mode: SpikeMode,
) -> Result<Var> {
    cfg.validate()?;
    let input = g.value(current);
    layout.check(input)?;
    let eta_v = eta_value(g, eta)?;
    let w = layout.step_width;
    let mut m = vec![0.0; input.len()];
    let mut s = vec![0.0; input.len()];
    let mut v_prev = vec![0.0; w];
    for u in 0..layout.steps() {
        if layout.resets[u] {
            v_prev.iter_mut().for_each(|x| *x = 0.0);
        }
        let beta = ealif_leak(layout.dt[u], eta_v)?;
        for j in 0..w {
            let i = u * w + j;
            let mi = beta * v_prev[j] + (1.0 - beta) * input.data()[i];
            let si = mode.fire(mi - cfg.v_th, cfg.alpha_ste);
            m[i] = mi;
            s[i] = si;
            v_prev[j] = mi - cfg.v_th * si;
        }
    }
    let out = Tensor::new(input.shape().to_vec(), s)?;
    let op = SpikeScanOp { layout: layout.clone(), eta: eta_v, v_th: cfg.v_th, alpha_ste: cfg.alpha_ste, m };
    g.custom(&[current, eta], out, Box::new(op))
}

struct SpikeScanOp {
    layout: ScanLayout,
    eta: f64,
    v_th: f64,
    alpha_ste: f64,
    m: Vec<f64>,
}

impl CustomOp for SpikeScanOp {
    fn name(&self) -> &'static str {
        "ealif_spike_scan"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let current = inputs[0];
        let w = self.layout.step_width;
        let (x, s, gs) = (current.data(), output.data(), grad.data());
        let mut gx = vec![0.0; x.len()];
        let mut carry = vec![0.0; w];
        let mut g_eta = 0.0;
        for u in (0..self.layout.steps()).rev() {
            let dt = self.layout.dt[u];
            let beta = ealif_leak(dt, self.eta)?;
            let mut g_beta = 0.0;
            for j in 0..w {
                let i = u * w + j;
                let h = surrogate_grad(self.m[i] - self.v_th, self.alpha_ste);
                let gm = gs[i] * h + carry[j] * (1.0 - self.v_th * h);
                let v_prev = if self.layout.resets[u] { 0.0 } else { self.m[i - w] - self.v_th * s[i - w] };
                gx[i] = (1.0 - beta) * gm;
                g_beta += gm * (v_prev - x[i]);
                carry[j] = beta * gm;
            }
            if self.layout.resets[u] {
                carry.iter_mut().for_each(|c| *c = 0.0);
            }
            g_eta += g_beta * leak_grad_eta(dt, self.eta, beta);
        }
        Ok(vec![Some(Tensor::new(current.shape().to_vec(), gx)?), Some(Tensor::scalar(g_eta))])
    }
}

/// Interval-conditioned leaky integration without threshold or reset:
/// `m[u] = beta(dt_u) m[u-1] + (1 - beta(dt_u)) x[u]`, `m[0] = 0`.
///
/// With `squash`, the result is passed through softplus so the features are
/// strictly positive.
pub fn ealif_filter(g: &mut Graph, x: Var, eta: Var, layout: &ScanLayout, squash: bool) -> Result<Var> {
    let input = g.value(x);
    layout.check(input)?;
    let eta_v = eta_value(g, eta)?;
    let w = layout.step_width;
    let mut m = vec![0.0; input.len()];
    for u in 0..layout.steps() {
        let beta = ealif_leak(layout.dt[u], eta_v)?;
        for j in 0..w {
            let i = u * w + j;
            let prev = if layout.resets[u] { 0.0 } else { m[i - w] };
            m[i] = beta * prev + (1.0 - beta) * input.data()[i];
        }
    }
    let out = Tensor::new(input.shape().to_vec(), m)?;
    let op = LeakyScanOp { layout: layout.clone(), eta: eta_v };
    let membrane = g.custom(&[x, eta], out, Box::new(op))?;
    if squash {
        g.softplus(membrane)
    } else {
        Ok(membrane)
    }
}

struct LeakyScanOp {
    layout: ScanLayout,
    eta: f64,
}

impl CustomOp for LeakyScanOp {
    fn name(&self) -> &'static str {
        "ealif_filter"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let x = inputs[0];
        let w = self.layout.step_width;
        let (xd, m, gd) = (x.data(), output.data(), grad.data());
        let mut gx = vec![0.0; xd.len()];
        let mut carry = vec![0.0; w];
        let mut g_eta = 0.0;
        for u in (0..self.layout.steps()).rev() {
            let dt = self.layout.dt[u];
            let beta = ealif_leak(dt, self.eta)?;
            let mut g_beta = 0.0;
            for j in 0..w {
                let i = u * w + j;
                let gm = gd[i] + carry[j];
                let prev = if self.layout.resets[u] { 0.0 } else { m[i - w] };
                gx[i] = (1.0 - beta) * gm;
                g_beta += gm * (prev - xd[i]);
                carry[j] = beta * gm;
            }
            if self.layout.resets[u] {
                carry.iter_mut().for_each(|c| *c = 0.0);
            }
            g_eta += g_beta * leak_grad_eta(dt, self.eta, beta);
        }
        Ok(vec![Some(Tensor::new(x.shape().to_vec(), gx)?), Some(Tensor::scalar(g_eta))])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, GradCheckConfig};
    use std::f64::consts::LN_2;

    fn t(v: &[f64]) -> Tensor {
        Tensor::vector(v.to_vec())
    }

    #[test]
    fn lif_resting_state() {
        let cfg = LifConfig { alpha: 0.5, v_th: 1.0, alpha_ste: 4.0 };
        let mut st = NeuronState::zeros(&[1]);
        let out = lif_step(&mut st, &t(&[0.0]), &cfg).unwrap();
        assert_eq!((out.m.item(), out.s.item(), out.v.item()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn lif_fires_and_resets() {
        let cfg = LifConfig { alpha: 0.5, v_th: 1.0, alpha_ste: 4.0 };
        let mut st = NeuronState { v: t(&[1.0]) };
        let out = lif_step(&mut st, &t(&[1.0]), &cfg).unwrap();
        assert_eq!((out.m.item(), out.s.item(), out.v.item()), (1.0, 1.0, 0.0));
        assert_eq!(st.v.item(), 0.0);
    }

    #[test]
    fn non_leaky_reduction() {
        let cfg = LifConfig { alpha: 0.0, v_th: 10.0, alpha_ste: 4.0 };
        let mut st = NeuronState { v: t(&[3.7, -2.0]) };
        let out = lif_step(&mut st, &t(&[0.4, 1.5]), &cfg).unwrap();
        assert_eq!(out.m.data(), &[0.4, 1.5]);
    }

    #[test]
    fn lif_config_validation() {
        assert!(LifConfig { alpha: 1.0, v_th: 1.0, alpha_ste: 4.0 }.validate().is_err());
        assert!(LifConfig { alpha: 0.2, v_th: 0.0, alpha_ste: 4.0 }.validate().is_err());
        assert!(LifConfig { alpha: 0.2, v_th: 1.0, alpha_ste: 4.0 }.validate().is_ok());
    }

    #[test]
    fn leak_examples() {
        let eta = eta_for_tau(2.0);
        assert!((tau_of(eta) - 2.0).abs() < 1e-12);
        assert_eq!(ealif_leak(0.0, eta).unwrap(), 1.0);
        assert!((ealif_leak(2.0 * LN_2, eta).unwrap() - 0.5).abs() < 1e-12);
        assert!(ealif_leak(200.0, eta).unwrap() < 1e-43);
        assert!(ealif_leak(-1.0, eta).is_err());
    }

    #[test]
    fn tau_is_always_above_one() {
        for eta in [-30.0, -5.0, 0.0, 5.0] {
            assert!(tau_of(eta) > 1.0);
        }
        assert!((tau_of(eta_for_tau(1.0)) - 1.0 - MIN_TAU_EXCESS).abs() < 1e-12);
    }

    #[test]
    fn ealif_fires_at_half_leak() {
        let cfg = EaLifConfig::with_tau(2.0);
        let mut st = NeuronState::zeros(&[1]);
        let out = ealif_step(&mut st, &t(&[2.0]), 2.0 * LN_2, &cfg).unwrap();
        assert!((out.m.item() - 1.0).abs() < 1e-12);
        assert_eq!(out.s.item(), 1.0);
        assert!(out.v.item().abs() < 1e-12);
    }

    #[test]
    fn threshold_boundary_fires() {
        assert_eq!(heaviside(0.0), 1.0);
        assert_eq!(heaviside(-0.3), 0.0);
        assert!((surrogate_grad(0.0, 4.0) - 1.0).abs() < 1e-15);
        assert!(surrogate_grad(60.0, 4.0) < 1e-90 && surrogate_grad(-60.0, 4.0) < 1e-90);
    }

    #[test]
    fn first_gap_policies() {
        let times = [0.0, 1.0, 4.0, 5.0];
        assert_eq!(event_gaps(&times, FirstGap::Zero).unwrap(), vec![0.0, 1.0, 3.0, 1.0]);
        assert_eq!(event_gaps(&times, FirstGap::Median).unwrap()[0], 1.0);
        assert!(event_gaps(&[1.0, 0.5], FirstGap::Zero).is_err());
    }

    #[test]
    fn filter_examples() {
        let layout = ScanLayout::new(2, &[vec![0.0, 1e6, 1e6]]).unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, -1.0, 2.0, 0.5, -3.0, 4.0]).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone()).unwrap();
        let eta = g.constant(Tensor::scalar(eta_for_tau(2.0))).unwrap();
        let raw = ealif_filter(&mut g, xv, eta, &layout, false).unwrap();
        // first step zeroed by beta = 1, later steps memoryless
        assert_eq!(&g.value(raw).data()[..2], &[0.0, 0.0]);
        assert!(g.value(raw).data()[2..].iter().zip(&x.data()[2..]).all(|(a, b)| (a - b).abs() < 1e-12));

        let zeros = g.constant(Tensor::zeros(&[3, 2])).unwrap();
        let sq = ealif_filter(&mut g, zeros, eta, &layout, true).unwrap();
        assert!(g.value(sq).data().iter().all(|v| (v - LN_2).abs() < 1e-15));
    }

    #[test]
    fn filter_rejects_length_mismatch() {
        let layout = ScanLayout::new(1, &[vec![0.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3])).unwrap();
        let eta = g.constant(Tensor::scalar(0.0)).unwrap();
        assert!(ealif_filter(&mut g, x, eta, &layout, true).is_err());
    }

    #[test]
    fn spike_scan_matches_stepwise_neuron() {
        let cfg = EaLifConfig::with_tau(3.0);
        let dts = vec![0.0, 0.5, 2.0, 0.1, 7.0, 0.3];
        let currents: Vec<f64> = vec![1.5, 2.5, 0.2, 3.0, 1.2, 2.2, -1.0, 0.0, 4.0, 4.0, 1.9, 0.3];
        let layout = ScanLayout::new(2, std::slice::from_ref(&dts)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![6, 2], currents.clone()).unwrap()).unwrap();
        let eta = g.constant(Tensor::scalar(cfg.eta)).unwrap();
        let s = ealif_spike_scan(&mut g, x, eta, &layout, &cfg, SpikeMode::Exact).unwrap();
        let mut st = NeuronState::zeros(&[2]);
        for (u, dt) in dts.iter().enumerate() {
            let out = ealif_step(&mut st, &t(&currents[2 * u..2 * u + 2]), *dt, &cfg).unwrap();
            assert_eq!(out.s.data(), &g.value(s).data()[2 * u..2 * u + 2]);
        }
    }

    #[test]
    fn smoothed_scans_match_finite_differences() {
        let cfg = EaLifConfig { eta: 0.3, v_th: 0.6, alpha_ste: 3.0 };
        let layout = ScanLayout::new(3, &[vec![0.0, 0.7, 2.5, 0.2], vec![0.0, 1.1]]).unwrap();
        let x = Tensor::new(vec![6, 3], (0..18).map(|i| ((i * 37 % 17) as f64 / 8.0) - 0.4).collect()).unwrap();
        let cfg_check = GradCheckConfig::default();
        let report = check_gradients(
            &[x.clone(), Tensor::scalar(cfg.eta)],
            |g, v| {
                let s = ealif_spike_scan(g, v[0], v[1], &layout, &cfg, SpikeMode::Smoothed)?;
                let sq = g.square(s)?;
                g.sum_all(sq)
            },
            cfg_check,
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
        for squash in [true, false] {
            let report = check_gradients(
                &[x.clone(), Tensor::scalar(-0.4)],
                |g, v| {
                    let m = ealif_filter(g, v[0], v[1], &layout, squash)?;
                    let sq = g.square(m)?;
                    g.sum_all(sq)
                },
                cfg_check,
            )
            .unwrap();
            assert!(report.passed(1e-4), "{report:?}");
        }
    }
}
