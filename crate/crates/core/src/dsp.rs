//! Small numeric helpers shared by the signal-processing modules.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Linear convolution of a fixed kernel with many equal-length inputs via FFT.
pub struct FftConvolver {
    n_fft: usize,
    kernel_len: usize,
    kernel_spec: Vec<Complex64>,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl FftConvolver {
    pub fn new(kernel: &[f64], input_len: usize) -> Self {
        let n_fft = (input_len + kernel.len()).next_power_of_two();
        let mut planner = FftPlanner::new();
        let forward = planner.plan_fft_forward(n_fft);
        let inverse = planner.plan_fft_inverse(n_fft);
        let mut kernel_spec: Vec<Complex64> = kernel.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        kernel_spec.resize(n_fft, Complex64::new(0.0, 0.0));
        forward.process(&mut kernel_spec);
        FftConvolver { n_fft, kernel_len: kernel.len(), kernel_spec, forward, inverse }
    }

    /// First `x.len()` samples of the full convolution, i.e. causal filtering
    /// from zero initial state.
    pub fn causal(&self, x: &[f64]) -> Vec<f64> {
        assert!(x.len() + self.kernel_len <= self.n_fft);
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        buf.resize(self.n_fft, Complex64::new(0.0, 0.0));
        self.forward.process(&mut buf);
        for (b, k) in buf.iter_mut().zip(&self.kernel_spec) {
            *b *= k;
        }
        self.inverse.process(&mut buf);
        let scale = 1.0 / self.n_fft as f64;
        buf[..x.len()].iter().map(|c| c.re * scale).collect()
    }
}

/// Causal filtering from zero state, choosing direct or FFT convolution.
pub fn causal_filter(x: &[f64], h: &[f64]) -> Vec<f64> {
    if (x.len() as u64) * (h.len() as u64) <= 1 << 18 || h.len() < 32 {
        let mut y = vec![0.0; x.len()];
        for (i, yi) in y.iter_mut().enumerate() {
            let kmax = h.len().min(i + 1);
            let mut acc = 0.0;
            for k in 0..kmax {
                acc += h[k] * x[i - k];
            }
            *yi = acc;
        }
        y
    } else {
        FftConvolver::new(h, x.len()).causal(x)
    }
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().sum::<f64>() / x.len() as f64
}

/// Population variance.
pub fn variance(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / x.len() as f64
}

pub fn rms(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

pub fn median(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    let mut v = x.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Pearson correlation; 0 when either input is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        sab / (saa * sbb).sqrt()
    }
}
