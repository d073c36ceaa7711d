//! Segment statistics, multitaper spectra, band powers and min-max scaling.

use log::warn;
use ndarray::{Array2, ArrayView1};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Epoch;

pub const SEGMENT_S: f64 = 0.1;
pub const STAT_NAMES: [&str; 5] = ["mean", "std", "var", "kurtosis", "rms"];
pub const DEFAULT_RESOLUTION_HZ: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BandDef {
    pub name: &'static str,
    /// Half-open `[lo, hi)` in Hz.
    pub lo: f64,
    pub hi: f64,
}

pub const BANDS: [BandDef; 4] = [
    BandDef { name: "delta", lo: 0.5, hi: 4.0 },
    BandDef { name: "theta", lo: 4.0, hi: 8.0 },
    BandDef { name: "alpha", lo: 8.0, hi: 12.0 },
    BandDef { name: "beta", lo: 12.0, hi: 30.0 },
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub values: Vec<f64>,
    pub schema: Vec<String>,
}

impl FeatureVector {
    pub fn concat(mut self, other: FeatureVector) -> FeatureVector {
        self.values.extend(other.values);
        self.schema.extend(other.schema);
        self
    }
}

/// Rows of feature vectors sharing one schema.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    /// `[n_rows × n_features]`
    pub data: Array2<f64>,
    pub schema: Vec<String>,
}

impl FeatureMatrix {
    pub fn from_vectors(rows: &[FeatureVector]) -> Result<FeatureMatrix> {
        let first = rows.first().ok_or_else(|| Error::InvalidInput("no feature vectors".into()))?;
        let d = first.schema.len();
        if let Some(r) = rows.iter().find(|r| r.schema != first.schema) {
            return Err(Error::SchemaMismatch { expected: first.schema.len(), got: r.schema.len() });
        }
        let data = Array2::from_shape_fn((rows.len(), d), |(i, j)| rows[i].values[j]);
        Ok(FeatureMatrix { data, schema: first.schema.clone() })
    }

    pub fn n_rows(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.data.ncols()
    }

    pub fn select_rows(&self, idx: &[usize]) -> FeatureMatrix {
        FeatureMatrix { data: self.data.select(ndarray::Axis(0), idx), schema: self.schema.clone() }
    }
}

/// Segment boundaries in samples: `round(k · 0.1 · fs)`, trailing partial
/// segment dropped.
pub fn segment_bounds(n_samples: usize, fs: f64) -> Vec<(usize, usize)> {
    let duration = n_samples as f64 / fs;
    let n_seg = (duration / SEGMENT_S + 1e-9).floor() as usize;
    (0..n_seg)
        .map(|k| {
            let a = (k as f64 * SEGMENT_S * fs).round() as usize;
            let b = (((k + 1) as f64 * SEGMENT_S * fs).round() as usize).min(n_samples);
            (a, b)
        })
        .filter(|(a, b)| b > a)
        .collect()
}

/// `[mean, std, var, excess kurtosis, rms]` with population moments; a
/// zero-variance segment has kurtosis 0.
pub fn segment_stats(x: ArrayView1<f64>) -> [f64; 5] {
    let n = x.len() as f64;
    let mean = x.sum() / n;
    let (mut m2, mut m4, mut sq) = (0.0, 0.0, 0.0);
    for &v in x {
        let d = v - mean;
        m2 += d * d;
        m4 += d * d * d * d;
        sq += v * v;
    }
    m2 /= n;
    m4 /= n;
    let kurt = if m2 > 0.0 { m4 / (m2 * m2) - 3.0 } else { 0.0 };
    [mean, m2.sqrt(), m2, kurt, (sq / n).sqrt()]
}

pub fn time_features(epoch: &Epoch, channel_ids: &[String]) -> FeatureVector {
    let bounds = segment_bounds(epoch.n_samples(), epoch.fs);
    let mut values = Vec::with_capacity(channel_ids.len() * bounds.len() * 5);
    let mut schema = Vec::with_capacity(values.capacity());
    for (c, name) in channel_ids.iter().enumerate() {
        let col = epoch.data.column(c);
        for (k, &(a, b)) in bounds.iter().enumerate() {
            let s = segment_stats(col.slice(ndarray::s![a..b]));
            for (stat, v) in STAT_NAMES.iter().zip(s) {
                values.push(v);
                schema.push(format!("{name}:seg{k}:{stat}"));
            }
        }
    }
    FeatureVector { values, schema }
}

/// Eigenvalues of the symmetric tridiagonal matrix below `x`.
fn sturm_count(diag: &[f64], off_sq: &[f64], x: f64) -> usize {
    let mut count = 0;
    let mut q = diag[0] - x;
    if q < 0.0 {
        count += 1;
    }
    for i in 1..diag.len() {
        let denom = if q == 0.0 { f64::EPSILON * (off_sq[i - 1].sqrt() + 1.0) } else { q };
        q = diag[i] - x - off_sq[i - 1] / denom;
        if q < 0.0 {
            count += 1;
        }
    }
    count
}

/// Solves `(T − μI) y = r` for tridiagonal `T` by Gaussian elimination with
/// partial pivoting.
fn tridiag_solve(diag: &[f64], off: &[f64], mu: f64, r: &[f64]) -> Vec<f64> {
    let n = diag.len();
    // banded LU with pivoting: rows hold up to 3 entries (main, +1, +2)
    let mut a: Vec<[f64; 3]> = (0..n)
        .map(|i| [diag[i] - mu, if i + 1 < n { off[i] } else { 0.0 }, 0.0])
        .collect();
    let mut sub: Vec<f64> = (0..n).map(|i| if i > 0 { off[i - 1] } else { 0.0 }).collect();
    let mut b = r.to_vec();
    for i in 0..n.saturating_sub(1) {
        if sub[i + 1].abs() > a[i][0].abs() {
            // swap rows i and i+1
            let row_next = [sub[i + 1], a[i + 1][0], a[i + 1][1]];
            let row_cur = a[i];
            a[i] = row_next;
            sub[i + 1] = row_cur[0];
            a[i + 1] = [row_cur[1], row_cur[2], 0.0];
            b.swap(i, i + 1);
        }
        let pivot = if a[i][0] == 0.0 { f64::EPSILON } else { a[i][0] };
        a[i][0] = pivot;
        let m = sub[i + 1] / pivot;
        a[i + 1][0] -= m * a[i][1];
        a[i + 1][1] -= m * a[i][2];
        b[i + 1] -= m * b[i];
    }
    let mut y = vec![0.0; n];
    for i in (0..n).rev() {
        let mut acc = b[i];
        if i + 1 < n {
            acc -= a[i][1] * y[i + 1];
        }
        if i + 2 < n {
            acc -= a[i][2] * y[i + 2];
        }
        let p = if a[i][0] == 0.0 { f64::EPSILON } else { a[i][0] };
        y[i] = acc / p;
    }
    y
}

/// Discrete prolate spheroidal sequences: `k` unit-energy tapers of length
/// `n` with time-half-bandwidth `nw`, and their concentration ratios.
pub fn dpss(n: usize, nw: f64, k: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
    if n < 2 || k == 0 || k > n {
        return Err(Error::InvalidInput(format!("dpss needs n >= 2 and 1 <= k <= n, got n={n}, k={k}")));
    }
    let w = nw / n as f64;
    let cos2 = (2.0 * std::f64::consts::PI * w).cos();
    let diag: Vec<f64> = (0..n).map(|i| ((n as f64 - 1.0 - 2.0 * i as f64) / 2.0).powi(2) * cos2).collect();
    let off: Vec<f64> = (1..n).map(|i| (i as f64) * (n - i) as f64 / 2.0).collect();
    let off_sq: Vec<f64> = off.iter().map(|v| v * v).collect();
    let bound = diag
        .iter()
        .enumerate()
        .map(|(i, d)| {
            let l = if i > 0 { off[i - 1].abs() } else { 0.0 };
            let r = if i + 1 < n { off[i].abs() } else { 0.0 };
            d.abs() + l + r
        })
        .fold(0.0, f64::max);
    let mut tapers = Vec::with_capacity(k);
    for j in 0..k {
        // j-th largest eigenvalue: exactly n − 1 − j eigenvalues lie below it
        let target = n - 1 - j;
        let (mut lo, mut hi) = (-bound - 1.0, bound + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if sturm_count(&diag, &off_sq, mid) <= target {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo <= 1e-14 * bound.max(1.0) {
                break;
            }
        }
        let lambda = 0.5 * (lo + hi);
        let mu = lambda + 1e-10 * bound.max(1.0);
        let mut v: Vec<f64> = (0..n).map(|i| 1.0 + 0.01 * ((i * 7 + j * 13) % 17) as f64).collect();
        for _ in 0..4 {
            v = tridiag_solve(&diag, &off, mu, &v);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
        }
        // sign: symmetric tapers sum positive, antisymmetric ones start positive
        let s = if j % 2 == 0 {
            v.iter().sum::<f64>()
        } else {
            v.iter().copied().find(|x| x.abs() > 1e-6 / (n as f64).sqrt()).unwrap_or(1.0)
        };
        if s < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        tapers.push(v);
    }
    let ratios = tapers.iter().map(|v| concentration(v, w)).collect();
    Ok((tapers, ratios))
}

/// Fraction of taper energy inside `[-w, w]` cycles/sample.
fn concentration(v: &[f64], w: f64) -> f64 {
    let n = v.len();
    let mut lambda = 2.0 * w * v.iter().map(|x| x * x).sum::<f64>();
    for lag in 1..n {
        let r: f64 = (0..n - lag).map(|i| v[i] * v[i + lag]).sum();
        let k = lag as f64;
        lambda += 2.0 * r * (2.0 * std::f64::consts::PI * w * k).sin() / (std::f64::consts::PI * k);
    }
    lambda
}

/// Number of tapers for a time-half-bandwidth product.
pub fn taper_count(nw: f64) -> usize {
    ((2.0 * nw + 1e-9).floor() as isize - 1).max(1) as usize
}

/// One-sided multitaper power spectral density (units²/Hz) at bins
/// `k · fs / n` for `k = 0..=n/2`.
pub fn multitaper_psd(x: &[f64], fs: f64, resolution_hz: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = x.len();
    let duration = n as f64 / fs;
    if !(resolution_hz > 0.0) || duration < 1.0 / resolution_hz - 1e-9 || n < 2 {
        return Err(Error::TooShort { needed: (fs / resolution_hz).ceil() as usize, got: n });
    }
    let nw = duration * resolution_hz / 2.0;
    let k = taper_count(nw);
    let (tapers, ratios) = dpss(n, nw, k)?;
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(n);
    let n_freq = n / 2 + 1;
    let mut psd = vec![0.0; n_freq];
    let weight_sum: f64 = ratios.iter().sum();
    for (v, &lam) in tapers.iter().zip(&ratios) {
        let mut buf: Vec<Complex64> = x.iter().zip(v).map(|(a, b)| Complex64::new(a * b, 0.0)).collect();
        fft.process(&mut buf);
        for (p, c) in psd.iter_mut().zip(&buf) {
            *p += lam * c.norm_sqr();
        }
    }
    for (j, p) in psd.iter_mut().enumerate() {
        let one_sided = if j == 0 || (n.is_multiple_of(2) && j == n / 2) { 1.0 } else { 2.0 };
        *p *= one_sided / (weight_sum * fs);
    }
    let freqs = (0..n_freq).map(|j| j as f64 * fs / n as f64).collect();
    Ok((freqs, psd))
}

/// Resolution used for band features: 1 Hz, coarsened to `1 / duration`
/// for epochs shorter than one second.
pub fn band_resolution(duration_s: f64) -> f64 {
    DEFAULT_RESOLUTION_HZ.max(1.0 / duration_s)
}

/// Mean and population standard deviation of the PSD bins in each band.
pub fn band_features(epoch: &Epoch, channel_ids: &[String]) -> Result<FeatureVector> {
    let res = band_resolution(epoch.duration());
    let mut values = Vec::with_capacity(channel_ids.len() * BANDS.len() * 2);
    let mut schema = Vec::with_capacity(values.capacity());
    for (c, name) in channel_ids.iter().enumerate() {
        let x = epoch.data.column(c).to_vec();
        let (freqs, psd) = multitaper_psd(&x, epoch.fs, res)?;
        for band in &BANDS {
            let bins: Vec<f64> = freqs
                .iter()
                .zip(&psd)
                .filter(|(f, _)| **f >= band.lo && **f < band.hi)
                .map(|(_, p)| *p)
                .collect();
            let (m, s) = if bins.is_empty() {
                warn!("band {} has no bins at {res} Hz resolution", band.name);
                (0.0, 0.0)
            } else {
                (crate::dsp::mean(&bins), crate::dsp::variance(&bins).sqrt())
            };
            values.extend([m, s]);
            schema.push(format!("{name}:{}:mean", band.name));
            schema.push(format!("{name}:{}:std", band.name));
        }
    }
    Ok(FeatureVector { values, schema })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSet {
    pub time: bool,
    pub band: bool,
}

impl FeatureSet {
    pub const ALL: FeatureSet = FeatureSet { time: true, band: true };
}

pub fn epoch_features(epoch: &Epoch, channel_ids: &[String], set: FeatureSet) -> Result<FeatureVector> {
    let mut fv = FeatureVector { values: Vec::new(), schema: Vec::new() };
    if set.time {
        fv = fv.concat(time_features(epoch, channel_ids));
    }
    if set.band {
        fv = fv.concat(band_features(epoch, channel_ids)?);
    }
    Ok(fv)
}

/// Features for every epoch, computed in parallel.
pub fn feature_matrix(epochs: &[Epoch], channel_ids: &[String], set: FeatureSet) -> Result<FeatureMatrix> {
    let rows: Vec<FeatureVector> =
        epochs.par_iter().map(|e| epoch_features(e, channel_ids, set)).collect::<Result<_>>()?;
    FeatureMatrix::from_vectors(&rows)
}

/// Flattened raw samples (`channel:t{k}`), used for direction decoding.
pub fn raw_features(epochs: &[Epoch], channel_ids: &[String]) -> Result<FeatureMatrix> {
    let first = epochs.first().ok_or_else(|| Error::InvalidInput("no epochs".into()))?;
    let (t, c) = first.data.dim();
    if let Some(e) = epochs.iter().find(|e| e.data.dim() != (t, c)) {
        return Err(Error::InvalidInput(format!("epoch shape {:?} differs from {:?}", e.data.dim(), (t, c))));
    }
    let schema = channel_ids.iter().flat_map(|ch| (0..t).map(move |k| format!("{ch}:t{k}"))).collect();
    let data = Array2::from_shape_fn((epochs.len(), t * c), |(i, j)| epochs[i].data[[j % t, j / t]]);
    Ok(FeatureMatrix { data, schema })
}

/// Per-feature min-max scaling learned on training rows only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinMaxScaler {
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    pub schema: Vec<String>,
    /// Identifier of the training fold the statistics came from.
    #[serde(default)]
    pub fold: Option<String>,
}

impl MinMaxScaler {
    pub fn fit(train: &FeatureMatrix, fold: Option<String>) -> Result<MinMaxScaler> {
        if train.n_rows() == 0 {
            return Err(Error::InvalidInput("cannot fit a scaler on zero rows".into()));
        }
        let mins = train.data.columns().into_iter().map(|c| c.fold(f64::INFINITY, |m, &v| m.min(v))).collect();
        let maxs = train.data.columns().into_iter().map(|c| c.fold(f64::NEG_INFINITY, |m, &v| m.max(v))).collect();
        Ok(MinMaxScaler { mins, maxs, schema: train.schema.clone(), fold })
    }

    /// `(x − min)/(max − min)`; constant features map to 0; no clipping.
    pub fn transform(&self, x: &FeatureMatrix) -> Result<FeatureMatrix> {
        if x.schema != self.schema {
            return Err(Error::SchemaMismatch { expected: self.schema.len(), got: x.schema.len() });
        }
        let mut data = x.data.clone();
        for (j, mut col) in data.columns_mut().into_iter().enumerate() {
            let span = self.maxs[j] - self.mins[j];
            let lo = self.mins[j];
            col.mapv_inplace(|v| if span > 0.0 { (v - lo) / span } else { 0.0 });
        }
        Ok(FeatureMatrix { data, schema: x.schema.clone() })
    }
}

/// Fits on `train` and scales both sets.
pub fn minmax_scale(train: &FeatureMatrix, apply_to: &FeatureMatrix) -> Result<(FeatureMatrix, FeatureMatrix, MinMaxScaler)> {
    let scaler = MinMaxScaler::fit(train, None)?;
    Ok((scaler.transform(train)?, scaler.transform(apply_to)?, scaler))
}
