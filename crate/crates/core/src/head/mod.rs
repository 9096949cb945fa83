//! Query decoder, forecasting loss and metrics, optimizer, and training.

mod model;
mod optim;
mod scaler;
mod train;

pub use model::{forward, Activity, Forward, Model, ModelConfig, Norms, QueryLayout, CHECKPOINT_VERSION};
pub use optim::{clip_grad_norm, Adam, AdamConfig};
pub use scaler::{Scaler, VariateStats};
pub use train::{
    baseline_forecasts, baseline_metrics, evaluate, flatten, predict_windows, train, Baseline, EpochRecord, Metrics, TrainConfig,
    TrainOutcome,
};

use log::warn;
use rand::Rng;

use crate::backbone::{embed_times, init_time_embedding};
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::params::{Bindings, ParamStore};

/// Adds the decoder MLP `2d -> 2d -> 2d -> 1` under `decoder.*`, plus its own
/// time embedding when it does not share the backbone's.
pub fn init_decoder(store: &mut ParamStore, dim: usize, own_time_embedding: bool, rng: &mut impl Rng) {
    let w = 2 * dim;
    store.init_xavier("decoder.w1", w, w, rng);
    store.insert("decoder.b1", Tensor::zeros(&[w]));
    store.init_xavier("decoder.w2", w, w, rng);
    store.insert("decoder.b2", Tensor::zeros(&[w]));
    store.init_xavier("decoder.w3", w, 1, rng);
    store.insert("decoder.b3", Tensor::zeros(&[1]));
    if own_time_embedding {
        init_time_embedding(store, "decoder.te", dim, rng);
    }
}

/// `MLP(z[row] ++ TE(q))` for every query; `rows[i]` picks the summary row of
/// query `i`. Returns `[queries, 1]`.
pub fn decode(
    g: &mut Graph,
    p: &Bindings,
    summaries: Var,
    rows: &[usize],
    times: &[f64],
    te_prefix: &str,
    span: f64,
) -> Result<Var> {
    if rows.len() != times.len() {
        return Err(Error::Dimension(format!("{} summary rows for {} queries", rows.len(), times.len())));
    }
    let z = g.gather_rows(summaries, rows)?;
    let te = embed_times(g, p, te_prefix, times, span)?;
    let mut h = g.concat_cols(&[z, te])?;
    for (w, b, relu) in [("w1", "b1", true), ("w2", "b2", true), ("w3", "b3", false)] {
        h = g.matmul(h, p.get(&format!("decoder.{w}"))?)?;
        h = g.add(h, p.get(&format!("decoder.{b}"))?)?;
        if relu {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Per-query weights that make a weighted squared-error sum equal to the
/// batch mean of `(1/D) sum_d (1/Q_d) sum_r err^2`.
///
/// `counts[b][d]` is the number of queries of variate `d` in batch item `b`;
/// variates without queries are left out of their item's average.
pub fn loss_weights(counts: &[Vec<usize>]) -> Vec<f64> {
    let items = counts.len() as f64;
    let mut w = Vec::new();
    for (b, per_variate) in counts.iter().enumerate() {
        let active = per_variate.iter().filter(|&&q| q > 0).count();
        if active < per_variate.len() {
            warn!("batch item {b}: {} variate(s) without queries excluded from the loss", per_variate.len() - active);
        }
        for &q in per_variate {
            w.extend(std::iter::repeat_n(1.0 / (items * active as f64 * q as f64), q));
        }
    }
    w
}

/// Variate-averaged squared error recorded on the tape.
pub fn mse_loss(g: &mut Graph, pred: Var, truth: &[f64], counts: &[Vec<usize>]) -> Result<Var> {
    let n = g.value(pred).len();
    let weights = loss_weights(counts);
    if truth.len() != n || weights.len() != n {
        return Err(Error::Dimension(format!("{n} predictions, {} targets, {} weights", truth.len(), weights.len())));
    }
    let t = g.constant(Tensor::matrix(n, 1, truth.to_vec())?)?;
    let w = g.constant(Tensor::matrix(n, 1, weights)?)?;
    let diff = g.sub(pred, t)?;
    let sq = g.square(diff)?;
    let weighted = g.mul(sq, w)?;
    g.sum_all(weighted)
}

/// `(1/D) sum_d (1/Q_d) sum_r (pred - truth)^2` for one forecast
/// (`[variate][query]` layout).
pub fn variate_mse(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension("prediction and truth variate counts differ".into()));
    }
    let mut total = 0.0;
    let mut active = 0;
    for (d, (p, t)) in pred.iter().zip(truth).enumerate() {
        if p.len() != t.len() {
            return Err(Error::Dimension(format!("variate {d}: {} predictions for {} targets", p.len(), t.len())));
        }
        if p.is_empty() {
            warn!("variate {d} has no queries; excluded");
            continue;
        }
        total += p.iter().zip(t).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / p.len() as f64;
        active += 1;
    }
    if active == 0 {
        return Err(Error::Data("no variate has queries".into()));
    }
    Ok(total / active as f64)
}

/// Flat `(MSE, MAE)` pooled over every query.
pub fn metrics(pred: &[f64], truth: &[f64]) -> Result<(f64, f64)> {
    if pred.len() != truth.len() {
        return Err(Error::Dimension(format!("{} predictions for {} targets", pred.len(), truth.len())));
    }
    if pred.is_empty() {
        return Err(Error::Data("metrics need at least one query".into()));
    }
    let n = pred.len() as f64;
    let (mut se, mut ae) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(truth) {
        se += (p - t).powi(2);
        ae += (p - t).abs();
    }
    Ok((se / n, ae / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{check_gradients, GradCheckConfig};
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn decoder_store(dim: usize, seed: u64) -> ParamStore {
        let mut s = ParamStore::new();
        init_decoder(&mut s, dim, true, &mut ChaCha8Rng::seed_from_u64(seed));
        s
    }

    #[test]
    fn zero_weights_give_final_bias() {
        let mut s = decoder_store(4, 0);
        for w in ["decoder.w1", "decoder.w2", "decoder.w3"] {
            let shape = s.get(w).unwrap().shape().to_vec();
            s.insert(w, Tensor::zeros(&shape));
        }
        s.insert("decoder.b3", Tensor::vector(vec![0.75]));
        let mut g = Graph::new();
        let p = Bindings::bind(&mut g, &s).unwrap();
        let z = g.constant(Tensor::matrix(2, 4, vec![1.0, -2.0, 3.0, 0.5, 0.1, 0.2, 0.3, 0.4]).unwrap()).unwrap();
        let out = decode(&mut g, &p, z, &[0, 1, 1], &[91.0, 95.0, 120.0], "decoder.te", 90.0).unwrap();
        assert!(g.value(out).data().iter().all(|&x| x == 0.75));
    }

    #[test]
    fn equal_inputs_equal_predictions() {
        let s = decoder_store(4, 1);
        let mut g = Graph::new();
        let p = Bindings::bind(&mut g, &s).unwrap();
        let z = g.constant(Tensor::matrix(2, 4, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]).unwrap()).unwrap();
        let out = decode(&mut g, &p, z, &[0, 1], &[100.0, 100.0], "decoder.te", 90.0).unwrap();
        let v = g.value(out).data();
        assert_eq!(v[0], v[1]);
    }

    #[test]
    fn decoder_gradient_wrt_summary() {
        let s = decoder_store(3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::matrix(2, 3, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = check_gradients(
            &[z],
            |g, v| {
                let p = Bindings::bind(g, &s)?;
                let out = decode(g, &p, v[0], &[0, 1, 0], &[91.0, 97.5, 110.0], "decoder.te", 90.0)?;
                let sq = g.square(out)?;
                g.sum_all(sq)
            },
            GradCheckConfig::default(),
        )
        .unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn loss_examples() {
        let perfect = variate_mse(&[vec![1.0, 2.0]], &[vec![1.0, 2.0]]).unwrap();
        assert_eq!(perfect, 0.0);
        assert_eq!(variate_mse(&[vec![3.0]], &[vec![1.0]]).unwrap(), 4.0);
        let uneven = variate_mse(&[vec![1.0], vec![0.0, 0.0]], &[vec![0.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(uneven, 0.5);
        // an empty variate is excluded rather than counted as zero
        assert_eq!(variate_mse(&[vec![2.0], vec![]], &[vec![0.0], vec![]]).unwrap(), 4.0);
    }

    #[test]
    fn graph_loss_matches_plain() {
        let mut g = Graph::new();
        let pred = g.constant(Tensor::matrix(5, 1, vec![1.0, 0.0, 0.0, 2.0, 1.0]).unwrap()).unwrap();
        let truth = [0.0, 0.0, 0.0, 0.0, 0.0];
        let loss = mse_loss(&mut g, pred, &truth, &[vec![1, 2], vec![2, 0]]).unwrap();
        let first = variate_mse(&[vec![1.0], vec![0.0, 0.0]], &[vec![0.0], vec![0.0, 0.0]]).unwrap();
        let second = variate_mse(&[vec![2.0, 1.0], vec![]], &[vec![0.0, 0.0], vec![]]).unwrap();
        assert_relative_eq!(g.value(loss).item(), 0.5 * (first + second), epsilon = 1e-15);
    }

    #[test]
    fn metric_examples() {
        assert_eq!(metrics(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), (0.0, 0.0));
        assert_eq!(metrics(&[1.0, -1.0], &[0.0, 0.0]).unwrap(), (1.0, 1.0));
        assert!(metrics(&[], &[]).is_err());
    }

    proptest! {
        #[test]
        fn metric_homogeneity(errs in prop::collection::vec(-5.0..5.0f64, 1..20), c in -3.0..3.0f64) {
            let zeros = vec![0.0; errs.len()];
            let (mse, mae) = metrics(&errs, &zeros).unwrap();
            let scaled: Vec<f64> = errs.iter().map(|e| c * e).collect();
            let (mse_c, mae_c) = metrics(&scaled, &zeros).unwrap();
            prop_assert!((mse_c - c * c * mse).abs() <= 1e-9 * (1.0 + mse_c));
            prop_assert!((mae_c - c.abs() * mae).abs() <= 1e-9 * (1.0 + mae_c));
        }
    }
}
