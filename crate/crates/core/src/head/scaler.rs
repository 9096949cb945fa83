use serde::{Deserialize, Serialize};

use crate::data::Window;
use crate::encoder::EventSeries;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariateStats {
    pub mean: f64,
    pub std: f64,
}

/// Per-variate standardization fitted on observed training history entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scaler {
    pub variates: Vec<VariateStats>,
}

impl Scaler {
    pub fn identity(variates: usize) -> Self {
        Self { variates: vec![VariateStats { mean: 0.0, std: 1.0 }; variates] }
    }

    /// A variate never observed keeps mean 0; a constant one keeps std 1.
    pub fn fit(windows: &[Window]) -> Result<Self> {
        let d = windows.first().ok_or_else(|| Error::Data("cannot fit a scaler on no windows".into()))?.history.variates();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut n = vec![0usize; d];
        for w in windows {
            let h = &w.history;
            if h.variates() != d {
                return Err(Error::Dimension("windows disagree on the variate count".into()));
            }
            for k in 0..h.len() {
                for v in 0..d {
                    if h.mask.at(&[k, v]) == 1.0 {
                        let x = h.values.at(&[k, v]);
                        sum[v] += x;
                        sq[v] += x * x;
                        n[v] += 1;
                    }
                }
            }
        }
        let variates = (0..d)
            .map(|v| {
                if n[v] == 0 {
                    return VariateStats { mean: 0.0, std: 1.0 };
                }
                let mean = sum[v] / n[v] as f64;
                let var = (sq[v] / n[v] as f64 - mean * mean).max(0.0);
                let std = if var > 1e-24 { var.sqrt() } else { 1.0 };
                VariateStats { mean, std }
            })
            .collect();
        Ok(Self { variates })
    }

    pub fn forward(&self, v: usize, x: f64) -> f64 {
        let s = self.variates[v];
        (x - s.mean) / s.std
    }

    pub fn inverse(&self, v: usize, z: f64) -> f64 {
        let s = self.variates[v];
        z * s.std + s.mean
    }

    fn check(&self, d: usize) -> Result<()> {
        if d != self.variates.len() {
            return Err(Error::Dimension(format!("scaler has {} variates, data has {d}", self.variates.len())));
        }
        Ok(())
    }

    /// Standardized history values and targets; times and mask are kept.
    pub fn apply(&self, w: &Window) -> Result<Window> {
        let h = &w.history;
        self.check(h.variates())?;
        let d = h.variates();
        let mut values = h.values.clone();
        for (i, x) in values.data_mut().iter_mut().enumerate() {
            if h.mask.data()[i] == 1.0 {
                *x = self.forward(i % d, *x);
            }
        }
        let history = EventSeries::new(h.times.clone(), values, h.mask.clone())?;
        let truths = w
            .truths
            .iter()
            .enumerate()
            .map(|(v, ts)| ts.iter().map(|&x| self.forward(v, x)).collect())
            .collect();
        Ok(Window { history, truths, ..w.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::align_events;
    use approx::assert_relative_eq;

    fn window(raw: &[Vec<(f64, f64)>]) -> Window {
        Window {
            series: 0,
            start: 0,
            history: align_events(raw).unwrap(),
            queries: vec![vec![10.0]; raw.len()],
            truths: vec![vec![3.0]; raw.len()],
        }
    }

    #[test]
    fn fit_uses_observed_entries_only() {
        let w = window(&[vec![(0.0, 1.0), (1.0, 3.0)], vec![(2.0, 5.0)]]);
        let s = Scaler::fit(&[w]).unwrap();
        assert_relative_eq!(s.variates[0].mean, 2.0);
        assert_relative_eq!(s.variates[0].std, 1.0);
        // the single observation has no spread
        assert_eq!(s.variates[1], VariateStats { mean: 5.0, std: 1.0 });
    }

    #[test]
    fn apply_then_inverse() {
        let w = window(&[vec![(0.0, 1.0), (1.0, 5.0)], vec![(0.5, -2.0), (2.0, 4.0)]]);
        let s = Scaler::fit(std::slice::from_ref(&w)).unwrap();
        let z = s.apply(&w).unwrap();
        assert_eq!(z.history.mask, w.history.mask);
        for k in 0..w.history.len() {
            for v in 0..2 {
                if w.history.mask.at(&[k, v]) == 1.0 {
                    assert_relative_eq!(s.inverse(v, z.history.values.at(&[k, v])), w.history.values.at(&[k, v]));
                } else {
                    assert_eq!(z.history.values.at(&[k, v]), 0.0);
                }
            }
        }
        assert_relative_eq!(s.inverse(1, z.truths[1][0]), 3.0, epsilon = 1e-12);
    }
}
