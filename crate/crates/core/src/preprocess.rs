//! Zero-phase FIR filtering and rational resampling.
//!
//! Filters are Hamming-windowed sinc designs. The tap count follows the
//! Hamming rule of thumb `ceil(3.3 / (transition / fs))`, rounded up to odd,
//! with a default transition width of `min(cutoff / 2, 2 Hz)`.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dsp::{causal_filter, FftConvolver};
use crate::error::{Error, Result};
use crate::model::NeuralSignal;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FirKind {
    Lowpass { cutoff_hz: f64 },
    Highpass { cutoff_hz: f64 },
    Bandpass { low_hz: f64, high_hz: f64 },
    Notch { centre_hz: f64, bandwidth_hz: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirSpec {
    pub kind: FirKind,
    /// Transition band width; `None` selects the default rule.
    pub transition_hz: Option<f64>,
    /// Explicit odd tap count; `None` derives it from the transition width.
    pub taps: Option<usize>,
}

pub const DEFAULT_NOTCH_BANDWIDTH_HZ: f64 = 2.0;

impl FirSpec {
    pub fn lowpass(cutoff_hz: f64) -> Self {
        FirSpec { kind: FirKind::Lowpass { cutoff_hz }, transition_hz: None, taps: None }
    }

    pub fn highpass(cutoff_hz: f64) -> Self {
        FirSpec { kind: FirKind::Highpass { cutoff_hz }, transition_hz: None, taps: None }
    }

    pub fn bandpass(low_hz: f64, high_hz: f64) -> Self {
        FirSpec { kind: FirKind::Bandpass { low_hz, high_hz }, transition_hz: None, taps: None }
    }

    pub fn notch(centre_hz: f64) -> Self {
        FirSpec {
            kind: FirKind::Notch { centre_hz, bandwidth_hz: DEFAULT_NOTCH_BANDWIDTH_HZ },
            transition_hz: None,
            taps: None,
        }
    }

    pub fn with_transition(mut self, hz: f64) -> Self {
        self.transition_hz = Some(hz);
        self
    }

    pub fn with_taps(mut self, taps: usize) -> Self {
        self.taps = Some(taps);
        self
    }

    pub fn default_transition(&self) -> f64 {
        match self.kind {
            FirKind::Lowpass { cutoff_hz } | FirKind::Highpass { cutoff_hz } => (cutoff_hz / 2.0).min(2.0),
            FirKind::Bandpass { low_hz, .. } => (low_hz / 2.0).min(2.0),
            // edges sit at centre ± bandwidth/2; half the bandwidth keeps the
            // centre frequency inside the stop band
            FirKind::Notch { bandwidth_hz, .. } => (bandwidth_hz / 2.0).min(2.0),
        }
    }

    pub fn transition(&self) -> f64 {
        self.transition_hz.unwrap_or_else(|| self.default_transition())
    }

    /// Tap count this spec resolves to at sampling rate `fs`.
    pub fn resolve_taps(&self, fs: f64) -> Result<usize> {
        if let Some(t) = self.taps {
            if t % 2 == 0 || t == 0 {
                return Err(Error::InvalidConfig(format!("tap count must be odd, got {t}")));
            }
            return Ok(t);
        }
        let tw = self.transition();
        if !(tw > 0.0) {
            return Err(Error::InvalidConfig(format!("transition width must be > 0, got {tw}")));
        }
        Ok(odd_taps_for(tw, fs))
    }

    fn validate(&self, fs: f64) -> Result<()> {
        let nyq = fs / 2.0;
        let check = |f: f64, what: &str| {
            if !(f > 0.0 && f < nyq) {
                Err(Error::InvalidConfig(format!("{what} {f} Hz must lie in (0, {nyq}) Hz")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            FirKind::Lowpass { cutoff_hz } | FirKind::Highpass { cutoff_hz } => check(cutoff_hz, "cutoff"),
            FirKind::Bandpass { low_hz, high_hz } => {
                check(low_hz, "low edge")?;
                check(high_hz, "high edge")?;
                if low_hz >= high_hz {
                    return Err(Error::InvalidConfig("band-pass low edge must be below high edge".into()));
                }
                Ok(())
            }
            FirKind::Notch { centre_hz, bandwidth_hz } => {
                if !(bandwidth_hz > 0.0) {
                    return Err(Error::InvalidConfig("notch bandwidth must be > 0".into()));
                }
                check(centre_hz - bandwidth_hz / 2.0, "notch lower edge")?;
                check(centre_hz + bandwidth_hz / 2.0, "notch upper edge")
            }
        }
    }
}

/// `ceil(3.3 · fs / transition)` rounded up to odd.
pub fn odd_taps_for(transition_hz: f64, fs: f64) -> usize {
    let n = (3.3 * fs / transition_hz).ceil() as usize;
    let n = n.max(1);
    if n.is_multiple_of(2) {
        n + 1
    } else {
        n
    }
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Unit-DC-gain windowed-sinc lowpass with `taps` coefficients.
fn lowpass_kernel(cutoff_hz: f64, fs: f64, taps: usize) -> Vec<f64> {
    let w = hamming(taps);
    let m = (taps - 1) as f64 / 2.0;
    let fc = cutoff_hz / fs;
    let mut h: Vec<f64> = (0..taps).map(|i| w[i] * 2.0 * fc * sinc(2.0 * fc * (i as f64 - m))).collect();
    let s: f64 = h.iter().sum();
    h.iter_mut().for_each(|v| *v /= s);
    h
}

fn delta(taps: usize) -> Vec<f64> {
    let mut d = vec![0.0; taps];
    d[taps / 2] = 1.0;
    d
}

/// Designs the linear-phase FIR described by `spec` at sampling rate `fs`.
pub fn design_fir(spec: &FirSpec, fs: f64) -> Result<Vec<f64>> {
    if !(fs > 0.0) {
        return Err(Error::InvalidConfig("sampling rate must be > 0".into()));
    }
    spec.validate(fs)?;
    let taps = spec.resolve_taps(fs)?;
    let h = match spec.kind {
        FirKind::Lowpass { cutoff_hz } => lowpass_kernel(cutoff_hz, fs, taps),
        FirKind::Highpass { cutoff_hz } => {
            let lp = lowpass_kernel(cutoff_hz, fs, taps);
            delta(taps).iter().zip(&lp).map(|(d, l)| d - l).collect()
        }
        FirKind::Bandpass { low_hz, high_hz } => {
            let hi = lowpass_kernel(high_hz, fs, taps);
            let lo = lowpass_kernel(low_hz, fs, taps);
            hi.iter().zip(&lo).map(|(a, b)| a - b).collect()
        }
        FirKind::Notch { centre_hz, bandwidth_hz } => {
            let hi = lowpass_kernel(centre_hz + bandwidth_hz / 2.0, fs, taps);
            let lo = lowpass_kernel(centre_hz - bandwidth_hz / 2.0, fs, taps);
            delta(taps)
                .iter()
                .zip(hi.iter().zip(&lo))
                .map(|(d, (a, b))| d - (a - b))
                .collect()
        }
    };
    Ok(h)
}

/// Magnitude of the DTFT of `h` at frequency `f_hz`.
pub fn magnitude_response(h: &[f64], f_hz: f64, fs: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f_hz / fs;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, &c) in h.iter().enumerate() {
        re += c * (w * n as f64).cos();
        im -= c * (w * n as f64).sin();
    }
    (re * re + im * im).sqrt()
}

/// Odd (point-symmetric) reflection of `x` by `pad` samples on both ends.
/// Requires `pad < x.len()`.
fn odd_reflect_pad(x: &[f64], pad: usize) -> Vec<f64> {
    let n = x.len();
    debug_assert!(pad < n);
    let mut out = Vec::with_capacity(n + 2 * pad);
    for k in (1..=pad).rev() {
        out.push(2.0 * x[0] - x[k]);
    }
    out.extend_from_slice(x);
    for k in 1..=pad {
        out.push(2.0 * x[n - 1] - x[n - 1 - k]);
    }
    out
}

fn filtfilt_with(x: &[f64], pad: usize, run: impl Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    let padded = odd_reflect_pad(x, pad);
    let mut y = run(&padded);
    y.reverse();
    let mut y = run(&y);
    y.reverse();
    y[pad..pad + x.len()].to_vec()
}

/// Forward-backward filtering of one channel; net phase is zero and the
/// magnitude response is `|H|²`.
pub fn filtfilt_vec(x: &[f64], coeffs: &[f64]) -> Result<Vec<f64>> {
    let taps = coeffs.len();
    if taps == 0 {
        return Err(Error::InvalidInput("empty filter".into()));
    }
    if x.len() <= 3 * taps {
        return Err(Error::TooShort { needed: 3 * taps + 1, got: x.len() });
    }
    if taps == 1 {
        return Ok(x.iter().map(|v| v * coeffs[0] * coeffs[0]).collect());
    }
    let pad = taps;
    if (x.len() as u64) * (taps as u64) <= 1 << 18 || taps < 32 {
        Ok(filtfilt_with(x, pad, |v| causal_filter(v, coeffs)))
    } else {
        let conv = FftConvolver::new(coeffs, x.len() + 2 * pad);
        Ok(filtfilt_with(x, pad, |v| conv.causal(v)))
    }
}

/// Zero-phase filtering of every channel.
pub fn filtfilt(signal: &NeuralSignal, coeffs: &[f64]) -> Result<NeuralSignal> {
    let n = signal.n_samples();
    let taps = coeffs.len();
    if n <= 3 * taps {
        return Err(Error::TooShort { needed: 3 * taps + 1, got: n });
    }
    if taps == 1 && coeffs[0] == 1.0 {
        return Ok(signal.clone());
    }
    let conv = (taps >= 32).then(|| FftConvolver::new(coeffs, n + 2 * taps));
    let columns: Vec<Vec<f64>> = (0..signal.n_channels())
        .into_par_iter()
        .map(|c| {
            let x = signal.channel(c);
            match &conv {
                Some(conv) => filtfilt_with(&x, taps, |v| conv.causal(v)),
                None => filtfilt_vec(&x, coeffs).expect("length checked"),
            }
        })
        .collect();
    let mut out = signal.data.clone();
    for (c, col) in columns.into_iter().enumerate() {
        out.column_mut(c).iter_mut().zip(col).for_each(|(o, v)| *o = v);
    }
    Ok(signal.with_data(out))
}

/// Designs and applies one filter in a single call.
pub fn apply_filter(signal: &NeuralSignal, spec: &FirSpec) -> Result<NeuralSignal> {
    let h = design_fir(spec, signal.fs)?;
    filtfilt(signal, &h)
}

/// Reduced fraction `up / down` equal to `target / fs` with `down <= 10000`.
pub fn rational_ratio(fs: f64, target_fs: f64) -> Result<(usize, usize)> {
    let r = target_fs / fs;
    for down in 1..=10_000usize {
        let up = r * down as f64;
        let up_round = up.round();
        if up_round >= 1.0 && (up - up_round).abs() <= 1e-9 * up.max(1.0) {
            let up = up_round as usize;
            let g = gcd(up, down);
            return Ok((up / g, down / g));
        }
    }
    Err(Error::InvalidConfig(format!(
        "resampling ratio {target_fs}/{fs} has no rational form with denominator <= 10000"
    )))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Polyphase interpolation kernel for an `up/down` ratio on already
/// band-limited input, split into per-phase taps normalised to unit DC gain.
struct Polyphase {
    up: usize,
    down: usize,
    delay: usize,
    phases: Vec<Vec<f64>>,
}

impl Polyphase {
    fn new(up: usize, down: usize, fs: f64, target_fs: f64) -> Polyphase {
        let rate = fs * up as f64;
        // passband 0.45·target (already enforced by the anti-alias stage),
        // stopband from 0.55·target
        let cutoff = 0.5 * target_fs;
        let transition = 0.1 * target_fs;
        let taps = odd_taps_for(transition, rate);
        let h = lowpass_kernel(cutoff, rate, taps);
        let mut phases = vec![Vec::new(); up];
        for (k, &v) in h.iter().enumerate() {
            phases[k % up].push(v);
        }
        for p in phases.iter_mut() {
            let s: f64 = p.iter().sum();
            if s != 0.0 {
                p.iter_mut().for_each(|v| *v /= s);
            }
        }
        Polyphase { up, down, delay: (taps - 1) / 2, phases }
    }

    fn apply(&self, x: &[f64], out_len: usize) -> Vec<f64> {
        let n = x.len() as isize;
        let sample = |i: isize| -> f64 {
            if i < 0 {
                let j = (-i).min(n - 1);
                2.0 * x[0] - x[j as usize]
            } else if i >= n {
                let j = (2 * (n - 1) - i).max(0);
                2.0 * x[(n - 1) as usize] - x[j as usize]
            } else {
                x[i as usize]
            }
        };
        (0..out_len)
            .map(|j| {
                // upsampled index m = j·down + delay; taps h[k] hit x_up[m - k],
                // non-zero only when (m - k) is a multiple of `up`
                let m = j * self.down + self.delay;
                let phase = m % self.up;
                let base = (m / self.up) as isize;
                self.phases[phase]
                    .iter()
                    .enumerate()
                    .map(|(q, &c)| c * sample(base - q as isize))
                    .sum()
            })
            .collect()
    }
}

/// Rational resampling of one channel (anti-alias lowpass at 0.45·target,
/// then polyphase interpolation).
pub fn resample_vec(x: &[f64], fs: f64, target_fs: f64) -> Result<Vec<f64>> {
    if !(target_fs > 0.0 && target_fs < fs) {
        return Err(Error::InvalidConfig(format!("target rate {target_fs} must be in (0, {fs})")));
    }
    let (up, down) = rational_ratio(fs, target_fs)?;
    let h = design_fir(&FirSpec::lowpass(0.45 * target_fs), fs)?;
    let filtered = filtfilt_vec(x, &h)?;
    let out_len = ((x.len() as f64) * target_fs / fs).round() as usize;
    Ok(Polyphase::new(up, down, fs, target_fs).apply(&filtered, out_len))
}

/// Rational resampling of every channel.
pub fn resample(signal: &NeuralSignal, target_fs: f64) -> Result<NeuralSignal> {
    let fs = signal.fs;
    if !(target_fs > 0.0 && target_fs < fs) {
        return Err(Error::InvalidConfig(format!("target rate {target_fs} must be in (0, {fs})")));
    }
    let (up, down) = rational_ratio(fs, target_fs)?;
    let h = design_fir(&FirSpec::lowpass(0.45 * target_fs), fs)?;
    let n = signal.n_samples();
    if n <= 3 * h.len() {
        return Err(Error::TooShort { needed: 3 * h.len() + 1, got: n });
    }
    let out_len = ((n as f64) * target_fs / fs).round() as usize;
    let lp = filtfilt(signal, &h)?;
    let poly = Polyphase::new(up, down, fs, target_fs);
    let columns: Vec<Vec<f64>> =
        (0..signal.n_channels()).into_par_iter().map(|c| poly.apply(&lp.channel(c), out_len)).collect();
    let mut data = ndarray::Array2::zeros((out_len, signal.n_channels()));
    for (c, col) in columns.into_iter().enumerate() {
        data.column_mut(c).iter_mut().zip(col).for_each(|(o, v)| *o = v);
    }
    Ok(NeuralSignal { data, fs: target_fs, channel_ids: signal.channel_ids.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use std::f64::consts::PI;

    fn sine(f: f64, fs: f64, n: usize, phase: f64) -> Vec<f64> {
        (0..n).map(|i| (2.0 * PI * f * i as f64 / fs + phase).sin()).collect()
    }

    fn column_signal(x: Vec<f64>, fs: f64) -> NeuralSignal {
        let n = x.len();
        NeuralSignal::with_default_ids(Array2::from_shape_vec((n, 1), x).unwrap(), fs).unwrap()
    }

    #[test]
    fn tap_rule() {
        // 0.5 Hz highpass at 2 kHz: transition 0.25 Hz -> 26400 -> 26401
        assert_eq!(FirSpec::highpass(0.5).resolve_taps(2000.0).unwrap(), 26401);
        assert_eq!(FirSpec::lowpass(15.0).resolve_taps(2000.0).unwrap(), 3301);
        assert!(FirSpec::lowpass(10.0).with_taps(10).resolve_taps(100.0).is_err());
    }

    #[test]
    fn lowpass_quarter_band_has_unit_dc_gain() {
        let h = design_fir(&FirSpec::lowpass(250.0).with_taps(101), 1000.0).unwrap();
        assert_eq!(h.len(), 101);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        for i in 0..50 {
            assert!((h[i] - h[100 - i]).abs() < 1e-15);
        }
    }

    #[test]
    fn highpass_response() {
        let h = design_fir(&FirSpec::highpass(0.5), 2000.0).unwrap();
        assert!(h.iter().sum::<f64>().abs() <= 1e-6);
        assert!(magnitude_response(&h, 0.0, 2000.0) <= 1e-6);
        assert!(magnitude_response(&h, 10.0, 2000.0) >= 0.99);
    }

    #[test]
    fn notch_response() {
        let h = design_fir(&FirSpec::notch(50.0), 2000.0).unwrap();
        assert!(magnitude_response(&h, 50.0, 2000.0) <= 0.01);
        assert!(magnitude_response(&h, 40.0, 2000.0) >= 0.95);
        assert!((h.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn cutoff_at_nyquist_is_rejected() {
        assert!(design_fir(&FirSpec::lowpass(50.0), 100.0).is_err());
        assert!(design_fir(&FirSpec::highpass(0.0), 100.0).is_err());
    }

    #[test]
    fn identity_filter_is_exact() {
        let x = sine(3.0, 100.0, 500, 0.3);
        let s = column_signal(x.clone(), 100.0);
        let y = filtfilt(&s, &[1.0]).unwrap();
        assert_eq!(y.channel(0), x);
    }

    #[test]
    fn too_short_signal_is_rejected() {
        let s = column_signal(vec![0.0; 30], 100.0);
        assert!(matches!(filtfilt(&s, &[0.1; 11]), Err(Error::TooShort { .. })));
    }

    #[test]
    fn lowpass_keeps_zero_lag() {
        let fs = 500.0;
        let x = sine(10.0, fs, 5000, 0.0);
        let h = design_fir(&FirSpec::lowpass(15.0), fs).unwrap();
        let y = filtfilt_vec(&x, &h).unwrap();
        let xc = |lag: isize| -> f64 {
            (1000..4000).map(|i: isize| x[i as usize] * y[(i + lag) as usize]).sum()
        };
        let best = (-20isize..=20).max_by(|&a, &b| xc(a).total_cmp(&xc(b))).unwrap();
        assert_eq!(best, 0);
    }

    #[test]
    fn notch_removes_line_noise() {
        let fs = 2000.0;
        let x = sine(50.0, fs, 40000, 0.1);
        let h = design_fir(&FirSpec::notch(50.0), fs).unwrap();
        let y = filtfilt_vec(&x, &h).unwrap();
        let core = 8000..32000;
        let rx = crate::dsp::rms(&x[core.clone()]);
        let ry = crate::dsp::rms(&y[core]);
        assert!(ry <= 0.02 * rx, "ratio {}", ry / rx);
    }

    #[test]
    fn impulse_response_is_symmetric() {
        let mut x = vec![0.0; 801];
        x[400] = 1.0;
        let h = design_fir(&FirSpec::lowpass(20.0).with_taps(61), 200.0).unwrap();
        let y = filtfilt_vec(&x, &h).unwrap();
        for k in 1..200 {
            assert!((y[400 - k] - y[400 + k]).abs() < 1e-12);
        }
    }

    #[test]
    fn rational_ratios() {
        assert_eq!(rational_ratio(2000.0, 64.0).unwrap(), (4, 125));
        assert_eq!(rational_ratio(2000.0, 1024.0).unwrap(), (64, 125));
        assert!(rational_ratio(2000.0, 2000.0 / std::f64::consts::PI).is_err());
    }

    #[test]
    fn resample_preserves_dc() {
        let s = column_signal(vec![5.0; 40000], 2000.0);
        let r = resample(&s, 64.0).unwrap();
        assert_eq!(r.n_samples(), 1280);
        assert!(r.data.iter().all(|v| (v - 5.0).abs() < 1e-6));
    }

    #[test]
    fn resample_passes_5hz_and_blocks_100hz() {
        let fs = 2000.0;
        let n = 40000;
        let r = resample(&column_signal(sine(5.0, fs, n, 0.4), fs), 64.0).unwrap();
        let y = r.channel(0);
        // least-squares fit of a 5 Hz sinusoid on the interior
        let (mut ss, mut cc, mut sc, mut ys, mut yc) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for (j, v) in y.iter().enumerate().skip(100).take(1000) {
            let t = j as f64 / 64.0;
            let (s, c) = (2.0 * PI * 5.0 * t).sin_cos();
            ss += s * s;
            cc += c * c;
            sc += s * c;
            ys += v * s;
            yc += v * c;
        }
        let det = ss * cc - sc * sc;
        let a = (ys * cc - yc * sc) / det;
        let b = (yc * ss - ys * sc) / det;
        let amp = (a * a + b * b).sqrt();
        assert!((amp - 1.0).abs() < 0.02, "amp {amp}");

        let r = resample(&column_signal(sine(100.0, fs, n, 0.0), fs), 64.0).unwrap();
        assert!(crate::dsp::rms(&r.channel(0)) <= 0.01);
    }
}
