//! Central finite-difference comparison against the tape's gradients.
//!
//! The numeric side only evaluates the forward function, so it stays
//! independent of every backward rule it checks.

use super::{Graph, Tensor, Var};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor: gradients smaller than this are compared absolutely.
    /// At step 1e-5 the round-off of a central difference is about 1e-10.
    pub floor: f64,
    /// Check at most this many entries per input (evenly strided); `None` checks all.
    pub max_entries: Option<usize>,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self { step: 1e-5, rel_tol: 1e-4, floor: 1e-5, max_entries: None }
    }
}

#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub input: usize,
    pub entry: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst: Option<GradMismatch>,
}

impl GradReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.constant(t.clone())).collect::<Result<Vec<_>>>()?;
    let out = f(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Compares reverse-mode gradients of the scalar `f` with central differences
/// at every (or every sampled) input entry.
pub fn check_gradients<F>(inputs: &[Tensor], f: F, cfg: GradCheckConfig) -> Result<GradReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars = inputs.iter().map(|t| g.param(t.clone())).collect::<Result<Vec<_>>>()?;
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| g.grad(v)).collect();

    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.len();
        let stride = match cfg.max_entries {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            work[i].data_mut()[e] = orig + cfg.step;
            let up = eval(&f, &work)?;
            work[i].data_mut()[e] = orig - cfg.step;
            let down = eval(&f, &work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[i].data()[e];
            let err = rel_err(a, numeric, cfg.floor);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                report.worst = Some(GradMismatch { input: i, entry: e, analytic: a, numeric, rel_err: err });
            }
        }
    }
    Ok(report)
}
