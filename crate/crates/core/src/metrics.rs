//! Rank and linear correlation between predictions and opinion scores.

use crate::error::{Error, Result};

/// Relative spread below which a vector counts as constant. Catches
/// predictions that only differ by float rounding, e.g. mean pooling over a
/// row-stochastic map.
const CONSTANT_TOL: f64 = 1e-12;

fn check_inputs(pred: &[f64], mos: &[f64]) -> Result<()> {
    if pred.len() != mos.len() {
        return Err(Error::shape(pred.len(), mos.len()));
    }
    if pred.len() < 2 {
        return Err(Error::Degenerate("need at least two samples".into()));
    }
    if pred.iter().chain(mos).any(|v| !v.is_finite()) {
        return Err(Error::Degenerate("non-finite value".into()));
    }
    if is_constant(pred) {
        return Err(Error::Degenerate("predictions are constant".into()));
    }
    if is_constant(mos) {
        return Err(Error::Degenerate("opinion scores are constant".into()));
    }
    Ok(())
}

pub fn is_constant(xs: &[f64]) -> bool {
    let (lo, hi) = xs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    let scale = lo.abs().max(hi.abs()).max(1.0);
    hi - lo <= CONSTANT_TOL * scale
}

/// 1-based ranks; tied values share the mean of the ranks they span.
pub fn fractional_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

fn pearson_unchecked(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

/// Pearson linear correlation coefficient.
pub fn plcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_inputs(pred, mos)?;
    Ok(pearson_unchecked(pred, mos))
}

/// Spearman rank-order correlation: Pearson over fractional ranks.
pub fn srcc(pred: &[f64], mos: &[f64]) -> Result<f64> {
    check_inputs(pred, mos)?;
    Ok(pearson_unchecked(&fractional_ranks(pred), &fractional_ranks(mos)))
}
