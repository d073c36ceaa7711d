//! Run-wise cross-validation, exact AUC-ROC, the decoding protocols and
//! wait-time statistics.

mod protocol;

pub use protocol::*;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub train: Vec<usize>,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub folds: Vec<Fold>,
}

impl FoldPlan {
    /// Rows of `runs` (one run index per row) used for training and testing.
    pub fn split(&self, fold: usize, runs: &[usize]) -> (Vec<usize>, Vec<usize>) {
        let f = &self.folds[fold];
        let train = (0..runs.len()).filter(|&i| f.train.contains(&runs[i])).collect();
        let test = (0..runs.len()).filter(|&i| runs[i] == f.test).collect();
        (train, test)
    }
}

/// Leave-one-run-out plan over the distinct run indices in `runs`.
pub fn make_loro(runs: &[usize]) -> Result<FoldPlan> {
    let mut ids = runs.to_vec();
    ids.sort_unstable();
    ids.dedup();
    if ids.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "leave-one-run-out needs at least 2 runs, got {}; splitting within a run is unsupported because nearby trials are correlated",
            ids.len()
        )));
    }
    let folds = ids
        .iter()
        .map(|&test| Fold { train: ids.iter().copied().filter(|&r| r != test).collect(), test })
        .collect();
    Ok(FoldPlan { folds })
}

/// Binary AUC = P(s+ > s-) + P(s+ = s-)/2, counted exactly over all pairs.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("scores contain NaN".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count() as u128;
    let n_neg = labels.len() as u128 - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::MissingClass(format!("AUC needs both classes, got {n_pos} positive and {n_neg} negative")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Twice the pair count, so ties stay integral.
    let mut twice = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut p, mut q) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                p += 1;
            } else {
                q += 1;
            }
            j += 1;
        }
        twice += 2 * p * neg_below + p * q;
        neg_below += q;
        i = j;
    }
    Ok(twice as f64 / (2 * n_pos * n_neg) as f64)
}

/// Unweighted mean of one-vs-rest AUCs; `proba` columns follow `classes`.
pub fn auc_ovr(proba: ArrayView2<f64>, classes: &[usize], y: &[usize]) -> Result<f64> {
    if proba.nrows() != y.len() || proba.ncols() != classes.len() {
        return Err(Error::InvalidInput("probability matrix does not match labels".into()));
    }
    let mut total = 0.0;
    for (c, &label) in classes.iter().enumerate() {
        let is: Vec<bool> = y.iter().map(|&v| v == label).collect();
        let col: Vec<f64> = proba.column(c).to_vec();
        total += auc_roc(&col, &is).map_err(|e| e.context(format!("class {label}")))?;
    }
    Ok(total / classes.len() as f64)
}

/// Binary problems score the second class; larger problems use the macro
/// one-vs-rest average. Test labels outside `classes` are an error.
pub fn auc_from_proba(proba: ArrayView2<f64>, classes: &[usize], y: &[usize]) -> Result<f64> {
    if let Some(v) = y.iter().find(|v| !classes.contains(v)) {
        return Err(Error::InvalidInput(format!("label {v} was not seen in training")));
    }
    if classes.len() == 2 {
        let is: Vec<bool> = y.iter().map(|&v| v == classes[1]).collect();
        auc_roc(&proba.column(1).to_vec(), &is)
    } else {
        auc_ovr(proba, classes, y)
    }
}

pub const WAIT_BIN_S: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaitTimeStats {
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation (n - 1 denominator).
    pub sd: f64,
    pub min: f64,
    pub max: f64,
    pub median: f64,
    /// `(bin start in s, count)` over 20 ms bins aligned to multiples of 20 ms.
    pub histogram: Vec<(f64, usize)>,
}

impl WaitTimeStats {
    /// `"626 ms (414–935)"`: rounded mean with the range in milliseconds.
    pub fn render(&self) -> String {
        format!("{:.0} ms ({:.0}–{:.0})", self.mean * 1e3, self.min * 1e3, self.max * 1e3)
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("bin_start_ms,bin_end_ms,count\n");
        for &(b, c) in &self.histogram {
            s.push_str(&format!("{:.0},{:.0},{c}\n", b * 1e3, (b + WAIT_BIN_S) * 1e3));
        }
        s
    }
}

pub fn wait_time_stats(waits: &[f64]) -> Result<WaitTimeStats> {
    if waits.is_empty() {
        return Err(Error::InvalidInput("no wait times to summarise".into()));
    }
    if waits.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidInput("wait times must be finite".into()));
    }
    let n = waits.len();
    let mean = waits.iter().sum::<f64>() / n as f64;
    let sd = if n > 1 { (waits.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt() } else { 0.0 };
    let min = waits.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = waits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let median = crate::dsp::median(waits);
    let bin = |w: f64| (w / WAIT_BIN_S + 1e-9).floor() as i64;
    let (lo, hi) = (bin(min), bin(max));
    let mut counts = vec![0usize; (hi - lo + 1) as usize];
    for &w in waits {
        counts[(bin(w) - lo) as usize] += 1;
    }
    let histogram = counts.into_iter().enumerate().map(|(k, c)| ((lo + k as i64) as f64 * WAIT_BIN_S, c)).collect();
    Ok(WaitTimeStats { n, mean, sd, min, max, median, histogram })
}
