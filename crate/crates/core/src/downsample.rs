//! Event-preserving temporal downsampling: non-overlapping max pooling of
//! spikes and mask along the event axis, with each pooled step stamped by
//! the last event time of its window.

use std::sync::atomic::{AtomicBool, Ordering};

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Pooled spikes `[K', D, C]`, mask `[K', D]`, and times `[K']`.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSeries {
    pub spikes: Tensor,
    pub mask: Tensor,
    pub times: Vec<f64>,
    pub stride: usize,
}

static WARNED: AtomicBool = AtomicBool::new(false);

/// Number of pooled steps, rejecting strides outside `1..=len`.
pub fn pooled_len(len: usize, stride: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("pooling stride must be at least 1".into()));
    }
    if stride > len {
        return Err(Error::Config(format!("pooling stride {stride} exceeds sequence length {len}")));
    }
    let dropped = len % stride;
    if dropped > 0 {
        // every window of a run usually drops a few events; say so loudly once
        if WARNED.swap(true, Ordering::Relaxed) {
            debug!("pooling with stride {stride} drops {dropped} trailing event(s) of {len}");
        } else {
            warn!("pooling with stride {stride} drops {dropped} trailing event(s) of {len} (further drops logged at debug level)");
        }
    }
    Ok(len / stride)
}

/// Window-wise max over the leading axis of any tensor.
fn pool_leading(t: &Tensor, stride: usize) -> Result<Tensor> {
    let k = t.shape()[0];
    let k_out = pooled_len(k, stride)?;
    let width = if k == 0 { 0 } else { t.len() / k };
    let mut out = Vec::with_capacity(k_out * width);
    for u in 0..k_out {
        for j in 0..width {
            let m = (u * stride..(u + 1) * stride)
                .map(|row| t.data()[row * width + j])
                .fold(f64::NEG_INFINITY, f64::max);
            out.push(m);
        }
    }
    let mut shape = t.shape().to_vec();
    shape[0] = k_out;
    Tensor::new(shape, out)
}

/// `S'[u] = max over window u of S` for a `[K, D, C]` spike tensor.
pub fn pool_spikes(spikes: &Tensor, stride: usize) -> Result<Tensor> {
    pool_leading(spikes, stride)
}

/// A pooled position is observed if any event in its window is.
pub fn pool_mask(mask: &Tensor, stride: usize) -> Result<Tensor> {
    pool_leading(mask, stride)
}

/// Last event time of every complete window.
pub fn pool_times(times: &[f64], stride: usize) -> Result<Vec<f64>> {
    let k_out = pooled_len(times.len(), stride)?;
    Ok((1..=k_out).map(|u| times[u * stride - 1]).collect())
}

pub fn pool(spikes: &Tensor, mask: &Tensor, times: &[f64], stride: usize) -> Result<PooledSeries> {
    if spikes.shape()[0] != times.len() || mask.shape()[0] != times.len() {
        return Err(Error::Dimension("spikes, mask, and times disagree on the event count".into()));
    }
    Ok(PooledSeries {
        spikes: pool_spikes(spikes, stride)?,
        mask: pool_mask(mask, stride)?,
        times: pool_times(times, stride)?,
        stride,
    })
}
