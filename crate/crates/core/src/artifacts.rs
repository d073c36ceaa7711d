//! Cardiac R-peak detection and time-selective common average referencing.

use serde::{Deserialize, Serialize};

use crate::dsp::{causal_filter, median};
use crate::error::{Error, Result};
use crate::model::NeuralSignal;
use crate::preprocess::{design_fir, FirSpec};

/// Minimum spacing between detected R-peaks, in seconds.
pub const REFRACTORY_S: f64 = 0.25;
pub const DEFAULT_WINDOW_MS: f64 = 130.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RPeakSet {
    /// Peak times in seconds, strictly increasing.
    pub times: Vec<f64>,
    /// Description of the detection statistic.
    pub statistic: String,
    pub threshold: f64,
}

impl RPeakSet {
    pub fn empty() -> Self {
        RPeakSet { times: Vec::new(), statistic: String::new(), threshold: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Single-pass centred convolution with a symmetric kernel (zero phase,
/// magnitude `|H|`). Edges use odd reflection.
fn centred_filter(x: &[f64], h: &[f64]) -> Vec<f64> {
    let n = x.len();
    let half = (h.len() - 1) / 2;
    let pad = (half + 1).min(n.saturating_sub(1));
    let mut padded = Vec::with_capacity(n + 2 * pad + half);
    for k in (1..=pad).rev() {
        padded.push(2.0 * x[0] - x[k]);
    }
    padded.extend_from_slice(x);
    for k in 1..=pad {
        padded.push(2.0 * x[n - 1] - x[n - 1 - k]);
    }
    padded.extend(std::iter::repeat_n(0.0, half));
    let y = causal_filter(&padded, h);
    (0..n).map(|i| y[i + pad + half]).collect()
}

/// Detects cardiac R-peaks as local maxima of the cross-channel mean
/// absolute 5–40 Hz band-passed signal that exceed the median by more than
/// four median absolute deviations (and 5% of the global maximum), with a
/// 0.25 s refractory period (larger peaks win).
pub fn detect_r_peaks(signal: &NeuralSignal) -> Result<RPeakSet> {
    let fs = signal.fs;
    let n = signal.n_samples();
    let min_len = (2.0 * fs).ceil() as usize;
    if n < min_len {
        return Err(Error::TooShort { needed: min_len, got: n });
    }
    let h = design_fir(&FirSpec::bandpass(5.0, 40.0).with_transition(4.0), fs)?;
    let mut stat = vec![0.0; n];
    for c in 0..signal.n_channels() {
        let bp = centred_filter(&signal.channel(c), &h);
        for (s, v) in stat.iter_mut().zip(bp) {
            *s += v.abs();
        }
    }
    let nc = signal.n_channels() as f64;
    stat.iter_mut().for_each(|s| *s /= nc);

    let med = median(&stat);
    let dev: Vec<f64> = stat.iter().map(|s| (s - med).abs()).collect();
    let mad = median(&dev);
    // the relative floor only matters when MAD collapses to zero (noise-free
    // background), where float residue of the filter would otherwise count
    let max = stat.iter().copied().fold(0.0, f64::max);
    let threshold = (med + 4.0 * mad).max(0.05 * max);

    let mut candidates: Vec<usize> = (0..n)
        .filter(|&i| {
            let v = stat[i];
            v > threshold && (i == 0 || v >= stat[i - 1]) && (i + 1 == n || v > stat[i + 1])
        })
        .collect();
    candidates.sort_by(|&a, &b| stat[b].total_cmp(&stat[a]).then(a.cmp(&b)));

    let refractory = (REFRACTORY_S * fs).round() as usize;
    let mut accepted: Vec<usize> = Vec::new();
    for c in candidates {
        if accepted.iter().all(|&a| a.abs_diff(c) >= refractory) {
            accepted.push(c);
        }
    }
    accepted.sort_unstable();
    Ok(RPeakSet {
        times: accepted.into_iter().map(|i| i as f64 / fs).collect(),
        statistic: "mean |bandpass 5-40 Hz| across channels".to_string(),
        threshold,
    })
}

/// Sample mask covering `[c - half, c + half)` around each peak, where `c`
/// is the sample nearest the peak time. Overlapping windows merge.
pub fn window_mask(n_samples: usize, fs: f64, peaks: &RPeakSet, window_ms: f64) -> Vec<bool> {
    let half = (window_ms / 2000.0 * fs).round() as isize;
    let mut mask = vec![false; n_samples];
    for &t in &peaks.times {
        let c = (t * fs).round() as isize;
        let lo = (c - half).max(0) as usize;
        let hi = (c + half).clamp(0, n_samples as isize) as usize;
        if lo < hi {
            mask[lo..hi].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

/// Time-selective common average reference. Inside each peak window a
/// virtual zero channel joins the average, so every channel loses
/// `sum / (n + 1)`; samples outside windows are returned untouched.
pub fn ts_car(signal: &NeuralSignal, peaks: &RPeakSet, window_ms: f64) -> Result<NeuralSignal> {
    if !(window_ms > 0.0) {
        return Err(Error::InvalidConfig(format!("TS-CAR window must be > 0 ms, got {window_ms}")));
    }
    let mut out = signal.data.clone();
    if peaks.is_empty() {
        return Ok(signal.with_data(out));
    }
    let mask = window_mask(signal.n_samples(), signal.fs, peaks, window_ms);
    let denom = (signal.n_channels() + 1) as f64;
    for (mut row, &m) in out.outer_iter_mut().zip(&mask) {
        if m {
            let mean = row.sum() / denom;
            row.iter_mut().for_each(|v| *v -= mean);
        }
    }
    Ok(signal.with_data(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    fn signal(data: Array2<f64>, fs: f64) -> NeuralSignal {
        NeuralSignal::with_default_ids(data, fs).unwrap()
    }

    #[test]
    fn zero_signal_has_no_peaks() {
        let s = signal(Array2::zeros((5000, 4)), 1000.0);
        assert!(detect_r_peaks(&s).unwrap().is_empty());
    }

    #[test]
    fn short_signal_is_rejected() {
        let s = signal(Array2::zeros((100, 2)), 1000.0);
        assert!(detect_r_peaks(&s).is_err());
    }

    fn triangle(data: &mut Array2<f64>, centre: usize, half: usize, amp: f64) {
        for k in 0..=half {
            let v = amp * (1.0 - k as f64 / half as f64);
            for c in 0..data.ncols() {
                data[[centre + k, c]] += v;
                if k > 0 {
                    data[[centre - k, c]] += v;
                }
            }
        }
    }

    #[test]
    fn refractory_merges_close_peaks() {
        let fs = 1000.0;
        let mut d = Array2::zeros((4000, 3));
        triangle(&mut d, 2000, 20, 10.0);
        triangle(&mut d, 2100, 20, 8.0);
        let p = detect_r_peaks(&signal(d, fs)).unwrap();
        assert_eq!(p.len(), 1);
        assert!((p.times[0] - 2.0).abs() <= 0.01);
    }

    #[test]
    fn spacing_respects_refractory() {
        let fs = 500.0;
        let mut d = Array2::zeros((10_000, 2));
        for k in 0..18 {
            triangle(&mut d, 300 + k * 520, 10, 5.0 + (k % 3) as f64);
        }
        let p = detect_r_peaks(&signal(d, fs)).unwrap();
        assert_eq!(p.len(), 18);
        assert!(p.times.windows(2).all(|w| w[1] - w[0] >= REFRACTORY_S));
    }

    #[test]
    fn hand_computed_sample() {
        let mut d = Array2::zeros((100, 3));
        d.row_mut(50).fill(3.0);
        d.row_mut(10).fill(3.0);
        let s = signal(d, 100.0);
        let peaks = RPeakSet { times: vec![0.5], statistic: String::new(), threshold: 0.0 };
        let out = ts_car(&s, &peaks, 130.0).unwrap();
        assert_eq!(out.data.row(50).to_vec(), vec![0.75, 0.75, 0.75]);
        assert_eq!(out.data.row(10).to_vec(), vec![3.0, 3.0, 3.0]);
    }

    #[test]
    fn window_is_half_open_and_centred() {
        let peaks = RPeakSet { times: vec![1.0], statistic: String::new(), threshold: 0.0 };
        let m = window_mask(3000, 1000.0, &peaks, 130.0);
        assert_eq!(m.iter().filter(|&&b| b).count(), 130);
        assert!(m[935] && m[1064] && !m[934] && !m[1065]);
    }

    #[test]
    fn empty_peaks_is_identity() {
        let d = Array2::from_shape_fn((50, 2), |(i, c)| (i * 3 + c) as f64);
        let s = signal(d, 100.0);
        assert_eq!(ts_car(&s, &RPeakSet::empty(), 130.0).unwrap(), s);
        assert!(ts_car(&s, &RPeakSet::empty(), 0.0).is_err());
    }
}
