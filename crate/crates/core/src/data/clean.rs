//! Gap filling, outlier smoothing, and MCAR masking of daily series.

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CleanConfig {
    /// Local-median window (odd).
    pub window: usize,
    /// Longest gap filled by local interpolation.
    pub gap_cap: usize,
    /// Outlier threshold in MAD units.
    pub outlier: f64,
    /// MCAR drop probability.
    pub rate: f64,
    pub seed: u64,
}

impl Default for CleanConfig {
    fn default() -> Self {
        Self { window: 5, gap_cap: 3, outlier: 6.0, rate: 0.5, seed: 0 }
    }
}

impl CleanConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 3 || self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("median window must be odd and at least 3, got {}", self.window)));
        }
        if self.gap_cap == 0 {
            return Err(Error::Config("gap cap must be at least 1".into()));
        }
        if self.outlier <= 0.0 {
            return Err(Error::Config(format!("outlier threshold must be positive, got {}", self.outlier)));
        }
        check_rate(self.rate)
    }
}

pub fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&rate) {
        return Err(Error::Config(format!("sparsifying rate must lie in [0,1], got {rate}")));
    }
    Ok(())
}

/// Maximal runs of missing entries as `(start, end)` half-open ranges.
fn gaps(values: &[Option<f64>]) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < values.len() {
        if values[i].is_none() {
            let s = i;
            while i < values.len() && values[i].is_none() {
                i += 1;
            }
            out.push((s, i));
        } else {
            i += 1;
        }
    }
    out
}

fn lagrange(points: &[(f64, f64)], t: f64) -> f64 {
    let mut acc = 0.0;
    for (i, &(xi, yi)) in points.iter().enumerate() {
        let mut w = 1.0;
        for (j, &(xj, _)) in points.iter().enumerate() {
            if i != j {
                w *= (t - xj) / (xi - xj);
            }
        }
        acc += w * yi;
    }
    acc
}

/// Quadratic interpolation of interior gaps no longer than `cap`, through the
/// two nearest known points on the left and one on the right (one and two
/// when the left side is short). Other entries are left untouched.
pub fn fill_short_gaps(values: &[Option<f64>], cap: usize) -> Vec<Option<f64>> {
    let known: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    let mut out = values.to_vec();
    if known.len() < 3 {
        return out;
    }
    for (s, e) in gaps(values) {
        if s == 0 || e == values.len() || e - s > cap {
            continue;
        }
        // index into `known` of the first known point right of the gap
        let r = known.partition_point(|&k| k < e);
        let anchors: Vec<usize> = if r >= 2 {
            vec![known[r - 2], known[r - 1], known[r]]
        } else {
            vec![known[r - 1], known[r], known[r + 1]]
        };
        let pts: Vec<(f64, f64)> = anchors.iter().map(|&k| (k as f64, values[k].expect("known"))).collect();
        for (t, slot) in out.iter_mut().enumerate().take(e).skip(s) {
            *slot = Some(lagrange(&pts, t as f64));
        }
    }
    out
}

/// Linear ramp across every remaining interior gap.
fn bridge(values: &mut [Option<f64>]) {
    for (s, e) in gaps(values) {
        if s == 0 || e == values.len() {
            continue;
        }
        let (a, b) = (values[s - 1].expect("known"), values[e].expect("known"));
        let span = (e - s + 1) as f64;
        for t in s..e {
            values[t] = Some(a + (b - a) * (t - s + 1) as f64 / span);
        }
    }
}

/// Leading and trailing gaps take the nearest known value; an all-missing
/// series becomes zeros.
fn fill_edges(values: &[Option<f64>]) -> Vec<f64> {
    let first = values.iter().position(Option::is_some);
    let Some(first) = first else {
        warn!("series has no observed values; filling with zeros");
        return vec![0.0; values.len()];
    };
    let mut last = values[first].expect("known");
    values
        .iter()
        .enumerate()
        .map(|(i, v)| match v {
            Some(x) => {
                last = *x;
                *x
            }
            None if i < first => values[first].expect("known"),
            None => last,
        })
        .collect()
}

/// Short gaps by quadratic Lagrange, longer interior gaps by a linear bridge,
/// edges by the nearest known value.
pub fn lagrange_fill(values: &[Option<f64>], cap: usize) -> Vec<f64> {
    let known = values.iter().filter(|v| v.is_some()).count();
    if known < 3 {
        warn!("only {known} known point(s); filling by nearest value");
        let mut v = values.to_vec();
        bridge_nearest(&mut v);
        return fill_edges(&v);
    }
    let mut v = fill_short_gaps(values, cap);
    bridge(&mut v);
    fill_edges(&v)
}

fn bridge_nearest(values: &mut [Option<f64>]) {
    for (s, e) in gaps(values) {
        if s == 0 || e == values.len() {
            continue;
        }
        let (a, b) = (values[s - 1].expect("known"), values[e].expect("known"));
        for t in s..e {
            values[t] = Some(if t - (s - 1) <= e - t { a } else { b });
        }
    }
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Replaces outliers (`|x - median| / scale > threshold`) by the median of the
/// centered window of known values. The scale is the MAD, or the mean
/// absolute deviation when more than half the points sit on the median;
/// a series with zero spread is returned unchanged.
pub fn mad_smooth(values: &[Option<f64>], threshold: f64, window: usize) -> Vec<Option<f64>> {
    let present: Vec<f64> = values.iter().flatten().copied().collect();
    if present.is_empty() {
        return values.to_vec();
    }
    let mu = median(&mut present.clone());
    let mut dev: Vec<f64> = present.iter().map(|x| (x - mu).abs()).collect();
    let mut scale = median(&mut dev);
    if scale == 0.0 {
        scale = dev.iter().sum::<f64>() / dev.len() as f64;
    }
    if scale == 0.0 {
        return values.to_vec();
    }
    let r = window / 2;
    let mut out = values.to_vec();
    for (t, v) in values.iter().enumerate() {
        let Some(x) = v else { continue };
        if (x - mu).abs() / scale > threshold {
            let lo = t.saturating_sub(r);
            let hi = (t + r + 1).min(values.len());
            let mut local: Vec<f64> = values[lo..hi].iter().flatten().copied().collect();
            out[t] = Some(median(&mut local));
        }
    }
    out
}

/// Natural cubic spline through `(x, y)` anchors with increasing `x`.
pub struct NaturalSpline {
    x: Vec<f64>,
    y: Vec<f64>,
    m: Vec<f64>,
}

impl NaturalSpline {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(Error::Data("a spline needs at least two anchors".into()));
        }
        if x.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Data("spline anchors must be strictly increasing".into()));
        }
        // second derivatives m with m[0] = m[n-1] = 0 (tridiagonal solve)
        let mut m = vec![0.0; n];
        if n > 2 {
            let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
            let k = n - 2;
            let mut diag = vec![0.0; k];
            let mut rhs = vec![0.0; k];
            for i in 0..k {
                diag[i] = 2.0 * (h[i] + h[i + 1]);
                rhs[i] = 6.0 * ((y[i + 2] - y[i + 1]) / h[i + 1] - (y[i + 1] - y[i]) / h[i]);
            }
            for i in 1..k {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * h[i];
                rhs[i] -= w * rhs[i - 1];
            }
            m[k] = rhs[k - 1] / diag[k - 1];
            for i in (0..k - 1).rev() {
                m[i + 1] = (rhs[i] - h[i + 1] * m[i + 2]) / diag[i];
            }
        }
        Ok(Self { x, y, m })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let n = self.x.len();
        let i = self.x.partition_point(|&v| v <= t).clamp(1, n - 1) - 1;
        let h = self.x[i + 1] - self.x[i];
        let a = (self.x[i + 1] - t) / h;
        let b = (t - self.x[i]) / h;
        a * self.y[i]
            + b * self.y[i + 1]
            + ((a * a * a - a) * self.m[i] + (b * b * b - b) * self.m[i + 1]) * h * h / 6.0
    }
}

/// Spline imputation of remaining interior gaps; with fewer than four
/// anchors the gaps are bridged linearly instead.
pub fn spline_fill(values: &[Option<f64>]) -> Vec<Option<f64>> {
    let mut out = values.to_vec();
    let anchors: Vec<usize> = (0..values.len()).filter(|&i| values[i].is_some()).collect();
    if anchors.len() < 4 {
        bridge(&mut out);
        return out;
    }
    let spline = NaturalSpline::new(
        anchors.iter().map(|&i| i as f64).collect(),
        anchors.iter().map(|&i| values[i].expect("known")).collect(),
    )
    .expect("anchors are increasing");
    for (s, e) in gaps(values) {
        if s == 0 || e == values.len() {
            continue;
        }
        for (t, slot) in out.iter_mut().enumerate().take(e).skip(s) {
            *slot = Some(spline.eval(t as f64));
        }
    }
    out
}

/// Full cleaning of one series: short-gap interpolation, outlier smoothing,
/// spline imputation of long gaps, nearest-value edges.
pub fn clean_series(values: &[Option<f64>], cfg: &CleanConfig) -> Vec<f64> {
    let known = values.iter().filter(|v| v.is_some()).count();
    if known < 3 {
        return lagrange_fill(values, cfg.gap_cap);
    }
    let v = fill_short_gaps(values, cfg.gap_cap);
    let v = mad_smooth(&v, cfg.outlier, cfg.window);
    let v = spline_fill(&v);
    fill_edges(&v)
}

/// Per-series RNG stream: the base seed mixed with the series index.
pub fn series_rng(seed: u64, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ index)
}

/// I.i.d. keep-mask with keep probability `1 - rate`.
pub fn mcar_sparsify(len: usize, rate: f64, seed: u64, index: u64) -> Result<Vec<bool>> {
    check_rate(rate)?;
    let mut rng = series_rng(seed, index);
    Ok((0..len).map(|_| rng.random_bool(1.0 - rate)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn opt(xs: &[f64]) -> Vec<Option<f64>> {
        xs.iter().map(|&x| if x.is_nan() { None } else { Some(x) }).collect()
    }

    #[test]
    fn quadratic_reproduced() {
        let v = vec![Some(0.0), Some(1.0), None, Some(9.0)];
        assert!((lagrange_fill(&v, 3)[2] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn long_gap_bridged_linearly() {
        let mut v = vec![Some(0.0)];
        v.extend(vec![None; 4]);
        v.extend([Some(10.0), Some(12.0)]);
        let f = lagrange_fill(&v, 3);
        for (i, x) in f.iter().enumerate().take(6) {
            assert!((x - 2.0 * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn no_gaps_identity_and_edges() {
        let v = opt(&[1.0, 5.0, 2.0]);
        assert_eq!(lagrange_fill(&v, 3), vec![1.0, 5.0, 2.0]);
        let v = opt(&[f64::NAN, 1.0, 2.0, 3.0, f64::NAN]);
        assert_eq!(lagrange_fill(&v, 3), vec![1.0, 1.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn right_heavy_anchors() {
        // one known point left of the gap: uses 1 + 2 anchors on t^2
        let v = vec![Some(1.0), None, Some(9.0), Some(16.0)];
        assert!((lagrange_fill(&v, 3)[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn mad_examples() {
        let flat = opt(&[2.0; 9]);
        assert_eq!(mad_smooth(&flat, 3.0, 5), flat);
        let mut spike = vec![1.0; 11];
        spike[5] = 1000.0;
        let out = mad_smooth(&opt(&spike), 3.0, 5);
        assert_eq!(out[5], Some(1.0));
        let calm = opt(&[1.0, 2.0, 3.0, 2.0, 1.0, 2.0]);
        assert_eq!(mad_smooth(&calm, 3.0, 5), calm);
    }

    #[test]
    fn spline_is_exact_on_lines_and_natural() {
        let s = NaturalSpline::new(vec![0.0, 1.0, 3.0, 4.0], vec![1.0, 3.0, 7.0, 9.0]).unwrap();
        assert!((s.eval(2.0) - 5.0).abs() < 1e-12);
        let v = opt(&[0.0, 1.0, f64::NAN, f64::NAN, f64::NAN, f64::NAN, 6.0, 7.0]);
        let f = spline_fill(&v);
        assert!((f[3].unwrap() - 3.0).abs() < 1e-12);
    }

    #[test]
    fn spline_interpolates_anchors() {
        let xs: Vec<f64> = (0..8).map(|i| (i * i) as f64 * 0.5).collect();
        let ys: Vec<f64> = xs.iter().map(|x| x.sin()).collect();
        let s = NaturalSpline::new(xs.clone(), ys.clone()).unwrap();
        for (x, y) in xs.iter().zip(&ys) {
            assert!((s.eval(*x) - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mcar_rates() {
        assert!(mcar_sparsify(100, 0.0, 1, 0).unwrap().iter().all(|&m| m));
        assert!(mcar_sparsify(100, 1.0, 1, 0).unwrap().iter().all(|&m| !m));
        let keep = mcar_sparsify(10_000, 0.5, 42, 3).unwrap().iter().filter(|&&m| m).count();
        assert!((4800..=5200).contains(&keep));
        assert!(mcar_sparsify(10, 1.1, 1, 0).is_err());
        assert_eq!(mcar_sparsify(50, 0.3, 9, 2).unwrap(), mcar_sparsify(50, 0.3, 9, 2).unwrap());
    }

    proptest! {
        #[test]
        fn any_quadratic_reproduced(a in -5.0f64..5.0, b in -5.0f64..5.0, c in -5.0f64..5.0,
                                    holes in proptest::collection::vec(1usize..28, 1..6)) {
            let f = |t: f64| a * t * t + b * t + c;
            let mut v: Vec<Option<f64>> = (0..30).map(|t| Some(f(t as f64))).collect();
            for h in &holes {
                v[*h] = None;
            }
            let filled = lagrange_fill(&v, 30);
            for h in &holes {
                prop_assert!((filled[*h] - f(*h as f64)).abs() < 1e-10);
            }
        }

        #[test]
        fn cleaned_series_is_complete(xs in proptest::collection::vec(proptest::option::of(-100.0f64..100.0), 1..60)) {
            let out = clean_series(&xs, &CleanConfig::default());
            prop_assert_eq!(out.len(), xs.len());
            prop_assert!(out.iter().all(|x| x.is_finite()));
        }
    }
}
