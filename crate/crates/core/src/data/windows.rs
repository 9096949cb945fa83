//! Rolling history/horizon windows and the chronological split.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::encoder::{align_events, EventSeries};
use crate::error::{Error, Result};

/// A cleaned multivariate daily series with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSeries {
    pub name: String,
    /// `[D][T]` clean reference values.
    pub reference: Vec<Vec<f64>>,
    /// `[D][T]` keep flags.
    pub mask: Vec<Vec<bool>>,
}

impl MaskedSeries {
    pub fn len(&self) -> usize {
        self.reference.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn variates(&self) -> usize {
        self.reference.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WindowConfig {
    pub history: usize,
    pub horizon: usize,
    pub stride: usize,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { history: 90, horizon: 30, stride: 30 }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history == 0 || self.horizon == 0 || self.stride == 0 {
            return Err(Error::Config("history, horizon, and window stride must be positive".into()));
        }
        Ok(())
    }
}

/// One forecasting instance. Times are days relative to the window start.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub series: usize,
    pub start: usize,
    pub history: EventSeries,
    /// Query times per variate.
    pub queries: Vec<Vec<f64>>,
    /// Targets aligned with `queries`.
    pub truths: Vec<Vec<f64>>,
}

impl Window {
    pub fn num_queries(&self) -> usize {
        self.queries.iter().map(Vec::len).sum()
    }
}

/// Slides `history + horizon` days over every series with the given stride.
///
/// History keeps only kept (observed) days; every horizon day of every
/// variate becomes a query whose truth is the clean reference value.
pub fn make_windows(series: &[MaskedSeries], cfg: &WindowConfig) -> Result<Vec<Window>> {
    cfg.validate()?;
    let span = cfg.history + cfg.horizon;
    let mut out = Vec::new();
    for (si, s) in series.iter().enumerate() {
        if s.mask.len() != s.variates() || s.mask.iter().zip(&s.reference).any(|(m, r)| m.len() != r.len()) {
            return Err(Error::Data(format!("series `{}` has mismatched mask and values", s.name)));
        }
        if s.len() < span {
            warn!("series `{}` has {} days, fewer than {span}; skipped", s.name, s.len());
            continue;
        }
        let mut start = 0;
        while start + span <= s.len() {
            let raw: Vec<Vec<(f64, f64)>> = (0..s.variates())
                .map(|v| {
                    (start..start + cfg.history)
                        .filter(|&t| s.mask[v][t])
                        .map(|t| ((t - start) as f64, s.reference[v][t]))
                        .collect()
                })
                .collect();
            if raw.iter().all(Vec::is_empty) {
                warn!("window at day {start} of `{}` has no observations; dropped", s.name);
            } else {
                let history = align_events(&raw)?;
                let days = start + cfg.history..start + span;
                let queries = vec![days.clone().map(|t| (t - start) as f64).collect::<Vec<_>>(); s.variates()];
                let truths = (0..s.variates()).map(|v| days.clone().map(|t| s.reference[v][t]).collect()).collect();
                out.push(Window { series: si, start, history, queries, truths });
            }
            start += cfg.stride;
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1 }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Splits {
    pub train: Vec<Window>,
    pub val: Vec<Window>,
    pub test: Vec<Window>,
}

/// Chronological per-series split: the earliest windows train, the latest
/// test. Series with at least three windows contribute to every split.
pub fn split_windows(windows: Vec<Window>, frac: SplitFractions) -> Splits {
    let mut by_series: std::collections::BTreeMap<usize, Vec<Window>> = Default::default();
    for w in windows {
        by_series.entry(w.series).or_default().push(w);
    }
    let mut out = Splits::default();
    for (_, mut ws) in by_series {
        ws.sort_by_key(|w| w.start);
        let n = ws.len();
        let mut n_train = (frac.train * n as f64).round() as usize;
        let mut n_val = (frac.val * n as f64).round() as usize;
        if n >= 3 {
            n_val = n_val.max(1);
            n_train = n_train.clamp(1, n - n_val - 1);
        } else {
            n_train = n_train.min(n);
            n_val = n_val.min(n - n_train);
        }
        let test = ws.split_off(n_train + n_val);
        let val = ws.split_off(n_train);
        out.train.extend(ws);
        out.val.extend(val);
        out.test.extend(test);
    }
    out
}
