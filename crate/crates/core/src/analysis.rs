//! Trial-averaged ERPs, squared point-biserial correlation spectra and
//! Morlet spectrograms with decibel baseline normalisation.

use ndarray::Array2;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{band_resolution, multitaper_psd};
use crate::model::Epoch;
use crate::preprocess::{design_fir, filtfilt_vec, FirSpec};

pub const DEFAULT_SMOOTH_HZ: f64 = 15.0;
pub const R2_MAX_HZ: f64 = 30.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErpResult {
    /// `[n_samples × n_channels]`
    pub mean: Array2<f64>,
    pub n_trials: usize,
    pub smooth_hz: Option<f64>,
    /// Transition width actually used by the smoothing filter.
    pub smooth_transition_hz: Option<f64>,
    pub fs: f64,
    pub t0_offset: f64,
}

fn check_shapes(epochs: &[Epoch]) -> Result<(usize, usize)> {
    let first = epochs.first().ok_or_else(|| Error::InvalidInput("at least one epoch is required".into()))?;
    let dim = first.data.dim();
    if let Some(e) = epochs.iter().find(|e| e.data.dim() != dim || e.fs != first.fs) {
        return Err(Error::InvalidInput(format!(
            "epoch shape {:?} at {} Hz differs from {:?} at {} Hz",
            e.data.dim(),
            e.fs,
            dim,
            first.fs
        )));
    }
    Ok(dim)
}

/// Lowpass design for smoothing an `n`-sample trace: the default
/// transition, widened when needed so the zero-phase filter fits.
pub fn smoothing_filter(cutoff_hz: f64, fs: f64, n: usize) -> Result<(Vec<f64>, f64)> {
    let spec = FirSpec::lowpass(cutoff_hz);
    let mut transition = spec.transition();
    let max_taps = (n.saturating_sub(1) / 3).saturating_sub(1) | 1;
    if spec.resolve_taps(fs)? > max_taps {
        if max_taps < 3 {
            return Err(Error::TooShort { needed: 10, got: n });
        }
        transition = 3.3 * fs / (max_taps as f64 - 1.0);
    }
    let h = design_fir(&spec.with_transition(transition), fs)?;
    Ok((h, transition))
}

/// Trial average, optionally smoothed by a zero-phase lowpass.
pub fn compute_erp(epochs: &[Epoch], smooth_hz: Option<f64>) -> Result<ErpResult> {
    let (n, c) = check_shapes(epochs)?;
    let mut mean = Array2::zeros((n, c));
    for e in epochs {
        mean += &e.data;
    }
    mean /= epochs.len() as f64;
    let fs = epochs[0].fs;
    let mut used = None;
    if let Some(cut) = smooth_hz {
        let (h, tr) = smoothing_filter(cut, fs, n)?;
        for mut col in mean.columns_mut() {
            let y = filtfilt_vec(&col.to_vec(), &h)?;
            col.iter_mut().zip(y).for_each(|(a, b)| *a = b);
        }
        used = Some(tr);
    }
    Ok(ErpResult { mean, n_trials: epochs.len(), smooth_hz, smooth_transition_hz: used, fs, t0_offset: epochs[0].t0_offset })
}

/// Squared point-biserial correlation between two groups of values, using
/// the population standard deviation of the pooled values. Zero when the
/// pooled values are constant.
pub fn biserial_r2(x1: &[f64], x2: &[f64]) -> f64 {
    let (n1, n2) = (x1.len() as f64, x2.len() as f64);
    if x1.is_empty() || x2.is_empty() {
        return 0.0;
    }
    let m1 = x1.iter().sum::<f64>() / n1;
    let m2 = x2.iter().sum::<f64>() / n2;
    let all = x1.iter().chain(x2);
    let m = all.clone().sum::<f64>() / (n1 + n2);
    let var = all.map(|v| (v - m) * (v - m)).sum::<f64>() / (n1 + n2);
    if var <= 0.0 {
        return 0.0;
    }
    // r² formed directly: one rounding step fewer than squaring r
    n1 * n2 * (m1 - m2) * (m1 - m2) / ((n1 + n2) * (n1 + n2) * var)
}

/// Column-wise r² for `[N1 × F]` and `[N2 × F]` matrices.
pub fn biserial_r2_columns(a: &Array2<f64>, b: &Array2<f64>) -> Result<Vec<f64>> {
    if a.ncols() != b.ncols() || a.nrows() == 0 || b.nrows() == 0 {
        return Err(Error::InvalidInput(format!("r² needs non-empty inputs with equal columns, got {:?} and {:?}", a.dim(), b.dim())));
    }
    Ok((0..a.ncols())
        .map(|j| biserial_r2(&a.column(j).to_vec(), &b.column(j).to_vec()))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct R2Spectrum {
    /// `[n_channels × n_freqs]`
    pub r2: Array2<f64>,
    pub freqs: Vec<f64>,
    pub n1: usize,
    pub n2: usize,
}

fn psd_rows(epochs: &[Epoch], ch: usize, res: f64) -> Result<(Vec<f64>, Array2<f64>)> {
    let rows: Vec<(Vec<f64>, Vec<f64>)> = epochs
        .par_iter()
        .map(|e| multitaper_psd(&e.data.column(ch).to_vec(), e.fs, res))
        .collect::<Result<_>>()?;
    let keep: Vec<usize> = (0..rows[0].0.len()).filter(|&j| rows[0].0[j] <= R2_MAX_HZ).collect();
    let freqs = keep.iter().map(|&j| rows[0].0[j]).collect();
    let m = Array2::from_shape_fn((rows.len(), keep.len()), |(i, j)| rows[i].1[keep[j]]);
    Ok((freqs, m))
}

/// r² between the multitaper spectra of two epoch groups, per channel and
/// frequency up to 30 Hz.
pub fn r2_spectrum(class1: &[Epoch], class2: &[Epoch]) -> Result<R2Spectrum> {
    let (_, c) = check_shapes(class1)?;
    let (_, c2) = check_shapes(class2)?;
    if c != c2 {
        return Err(Error::ChannelMismatch(format!("{c} vs {c2} channels")));
    }
    let res = band_resolution(class1[0].duration());
    let mut freqs = Vec::new();
    let mut rows = Vec::with_capacity(c);
    for ch in 0..c {
        let (f, a) = psd_rows(class1, ch, res)?;
        let (_, b) = psd_rows(class2, ch, res)?;
        rows.push(biserial_r2_columns(&a, &b)?);
        freqs = f;
    }
    let r2 = Array2::from_shape_fn((c, freqs.len()), |(i, j)| rows[i][j]);
    Ok(R2Spectrum { r2, freqs, n1: class1.len(), n2: class2.len() })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub fmin: f64,
    pub fmax: f64,
    pub df: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        SpectrogramConfig { fmin: 1.0, fmax: 30.0, df: 0.1 }
    }
}

impl SpectrogramConfig {
    pub fn freqs(&self) -> Vec<f64> {
        let n = ((self.fmax - self.fmin) / self.df + 1e-9).floor() as usize + 1;
        (0..n).map(|i| self.fmin + i as f64 * self.df).collect()
    }
}

/// Reference power for the decibel transform.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    /// Mean power over `[start_s, end_s]` (relative to epoch start) across
    /// all trials.
    Span { start_s: f64, end_s: f64 },
    /// Whole epoch.
    Whole,
    /// Per-frequency reference power supplied by the caller.
    External(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Spectrogram {
    /// `[n_freqs × n_times]`
    pub power_db: Array2<f64>,
    pub freqs: Vec<f64>,
    /// Seconds relative to the event (`t0_offset`).
    pub times: Vec<f64>,
    /// Per-frequency reference power used for the dB transform.
    pub baseline_power: Vec<f64>,
}

pub fn morlet_cycles(f: f64) -> f64 {
    (f / 2.0).max(3.0)
}

/// Unit-energy complex Morlet wavelet sampled at `fs`, support ±5σ.
pub fn morlet_wavelet(f: f64, fs: f64) -> Vec<Complex64> {
    let sigma = morlet_cycles(f) / (2.0 * std::f64::consts::PI * f);
    let half = (5.0 * sigma * fs).ceil() as isize;
    let w: Vec<Complex64> = (-half..=half)
        .map(|k| {
            let t = k as f64 / fs;
            let env = (-t * t / (2.0 * sigma * sigma)).exp();
            Complex64::from_polar(env, 2.0 * std::f64::consts::PI * f * t)
        })
        .collect();
    let norm = w.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
    w.into_iter().map(|c| c / norm).collect()
}

/// Trial-averaged Morlet power `[n_freqs × n_samples]` for one channel.
pub fn morlet_power(epochs: &[Epoch], channel: usize, cfg: &SpectrogramConfig) -> Result<(Vec<f64>, Array2<f64>)> {
    let (n, c) = check_shapes(epochs)?;
    if channel >= c {
        return Err(Error::InvalidInput(format!("channel {channel} out of range for {c} channels")));
    }
    if !(cfg.fmin > 0.0 && cfg.fmin <= cfg.fmax && cfg.df > 0.0) {
        return Err(Error::InvalidConfig(format!("invalid spectrogram grid {cfg:?}")));
    }
    let fs = epochs[0].fs;
    if cfg.fmax >= fs / 2.0 {
        return Err(Error::InvalidConfig(format!("fmax {} must be below Nyquist {}", cfg.fmax, fs / 2.0)));
    }
    let longest = morlet_wavelet(cfg.fmin, fs).len();
    if n < longest {
        return Err(Error::TooShort { needed: longest, got: n });
    }
    let freqs = cfg.freqs();
    let pad = longest / 2;
    let len = n + 2 * pad;
    let n_fft = (len + longest).next_power_of_two();
    let mut planner = FftPlanner::new();
    let fwd = planner.plan_fft_forward(n_fft);
    let inv = planner.plan_fft_inverse(n_fft);

    // symmetric padding, then one forward transform per trial
    let spectra: Vec<Vec<Complex64>> = epochs
        .par_iter()
        .map(|e| {
            let x = e.data.column(channel);
            let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
            for (i, b) in buf.iter_mut().take(len).enumerate() {
                let k = i as isize - pad as isize;
                let idx = if k < 0 { (-k - 1) as usize } else if k as usize >= n { 2 * n - 1 - k as usize } else { k as usize };
                *b = Complex64::new(x[idx.min(n - 1)], 0.0);
            }
            fwd.process(&mut buf);
            buf
        })
        .collect();

    let rows: Vec<Vec<f64>> = freqs
        .par_iter()
        .map(|&f| {
            let w = morlet_wavelet(f, fs);
            let half = w.len() / 2;
            let mut wf = vec![Complex64::new(0.0, 0.0); n_fft];
            wf[..w.len()].copy_from_slice(&w);
            fwd.process(&mut wf);
            let mut acc = vec![0.0; n];
            let mut buf = vec![Complex64::new(0.0, 0.0); n_fft];
            for s in &spectra {
                for ((b, x), h) in buf.iter_mut().zip(s).zip(&wf) {
                    *b = x * h;
                }
                inv.process(&mut buf);
                for (i, a) in acc.iter_mut().enumerate() {
                    *a += (buf[i + pad + half] / n_fft as f64).norm_sqr();
                }
            }
            acc.iter_mut().for_each(|a| *a /= epochs.len() as f64);
            acc
        })
        .collect();
    let power = Array2::from_shape_fn((freqs.len(), n), |(i, j)| rows[i][j]);
    Ok((freqs, power))
}

/// Morlet spectrogram in dB relative to the chosen baseline.
pub fn morlet_spectrogram(epochs: &[Epoch], channel: usize, cfg: &SpectrogramConfig, baseline: &Baseline) -> Result<Spectrogram> {
    let (freqs, power) = morlet_power(epochs, channel, cfg)?;
    let fs = epochs[0].fs;
    let n = power.ncols();
    let base: Vec<f64> = match baseline {
        Baseline::External(b) => {
            if b.len() != freqs.len() {
                return Err(Error::InvalidInput(format!("baseline has {} values for {} frequencies", b.len(), freqs.len())));
            }
            b.clone()
        }
        Baseline::Whole => power.rows().into_iter().map(|r| r.mean().unwrap_or(0.0)).collect(),
        Baseline::Span { start_s, end_s } => {
            let a = ((start_s * fs).round().max(0.0) as usize).min(n);
            let b = ((end_s * fs).round().max(0.0) as usize).min(n);
            if b <= a {
                return Err(Error::InvalidConfig(format!("empty baseline span [{start_s}, {end_s}]")));
            }
            power.rows().into_iter().map(|r| r.slice(ndarray::s![a..b]).mean().unwrap_or(0.0)).collect()
        }
    };
    let power_db = Array2::from_shape_fn(power.dim(), |(i, j)| {
        let p = power[[i, j]];
        if base[i] > 0.0 && p > 0.0 {
            10.0 * (p / base[i]).log10()
        } else {
            0.0
        }
    });
    let t0 = epochs[0].t0_offset;
    let times = (0..n).map(|j| j as f64 / fs - t0).collect();
    Ok(Spectrogram { power_db, freqs, times, baseline_power: base })
}
