//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each
//! and exits non-zero when any fails.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use ndarray::{Array1, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use saccade_core::analysis::{biserial_r2, morlet_spectrogram, Baseline, SpectrogramConfig};
use saccade_core::artifacts::{ts_car, RPeakSet};
use saccade_core::decompose::{fastica_fit, xdawn_fit};
use saccade_core::epoching::{annotate, detect_saccade_onsets, extract_epochs, label_trials, Geometry, LabelledEvent};
use saccade_core::evaluate::{
    auc_roc, comparison_data, evaluate_prepared, fit_fold, prepare_session, Comparison, EvalReport, Interval,
    PreparedSession, Protocol, ProtocolConfig,
};
use saccade_core::linalg::pinv;
use saccade_core::model::{default_channel_ids, Direction, Epoch, LabelRole, NeuralSignal, SaccadeRole, Session, Task, TrialLabel};
use saccade_core::preprocess::{design_fir, filtfilt_vec, FirSpec};
use saccade_core::synthgen::{generate_session, saccade_template, GenConfig, GroundTruth, SRC_SACCADE};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

fn sine(f: f64, fs: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin()).collect()
}

// 1. Filters

fn filters() -> Outcome {
    let fs = 2000.0;
    let n = (60.0 * fs) as usize;
    let core = n / 4..3 * n / 4;
    let notch = design_fir(&FirSpec::notch(50.0), fs).map_err(|e| e.to_string())?;
    let hp = design_fir(&FirSpec::highpass(0.5), fs).map_err(|e| e.to_string())?;

    let x = sine(50.0, fs, n);
    let y = filtfilt_vec(&x, &notch).map_err(|e| e.to_string())?;
    let atten = 20.0 * (rms(&x[core.clone()]) / rms(&y[core.clone()])).log10();
    ensure!(atten >= 34.0, "notch attenuation {atten:.2} dB < 34");

    let x = sine(10.0, fs, n);
    let y = filtfilt_vec(&x, &hp).map_err(|e| e.to_string())?;
    let gain = 20.0 * (rms(&y[core.clone()]) / rms(&x[core.clone()])).log10();
    ensure!(gain >= -0.1, "high-pass gain at 10 Hz {gain:.4} dB");
    let worst = core.clone().map(|i| (y[i] - x[i]).abs()).fold(0.0, f64::max);
    ensure!(worst < 0.02, "10 Hz sine moved by up to {worst}");

    // broadband noise through both filters: cross-correlation peaks at lag 0
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x: Vec<f64> = (0..n).map(|_| normal(&mut rng)).collect();
    let y = filtfilt_vec(&filtfilt_vec(&x, &hp).unwrap(), &notch).unwrap();
    let xcorr = |lag: isize| -> f64 {
        core.clone().map(|i| x[i] * y[(i as isize + lag) as usize]).sum::<f64>()
    };
    let best = (-40..=40).max_by(|&a, &b| xcorr(a).total_cmp(&xcorr(b))).unwrap();
    ensure!(best == 0, "cross-correlation peaks at lag {best}");
    Ok(format!("notch {atten:.1} dB at 50 Hz, high-pass {gain:.4} dB at 10 Hz, lag 0"))
}

// 2. TS-CAR

fn own_mask(n: usize, fs: f64, peaks: &[f64], window_ms: f64) -> Vec<bool> {
    let half = (window_ms / 2000.0 * fs).round() as isize;
    (0..n as isize)
        .map(|i| {
            peaks.iter().any(|&t| {
                let c = (t * fs).round() as isize;
                i >= c - half && i < c + half
            })
        })
        .collect()
}

fn ts_car_criterion() -> Outcome {
    let fs = 1000.0;
    let n = 10_000;
    let peaks: Vec<f64> = (0..12).map(|k| 0.03 + 0.83 * k as f64).collect();
    let set = RPeakSet { times: peaks.clone(), statistic: "given".into(), threshold: 0.0 };
    let mask = own_mask(n, fs, &peaks, 130.0);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for ch in [2usize, 8, 13, 32] {
        let x = Array2::from_shape_simple_fn((n, ch), || 10.0 * normal(&mut rng));
        let s = NeuralSignal::with_default_ids(x.clone(), fs).unwrap();
        let y = ts_car(&s, &set, 130.0).map_err(|e| e.to_string())?.data;
        for i in 0..n {
            if mask[i] {
                let sum: f64 = x.row(i).iter().sum();
                for c in 0..ch {
                    let want = x[[i, c]] - sum / (ch + 1) as f64;
                    worst = worst.max((y[[i, c]] - want).abs());
                }
            } else {
                ensure!(
                    x.row(i).iter().zip(y.row(i)).all(|(a, b)| a.to_bits() == b.to_bits()),
                    "sample {i} outside windows changed ({ch} channels)"
                );
            }
        }
        // identical artifact on every channel shrinks to 1/(n+1)
        let art = Array2::from_shape_fn((n, ch), |(i, _)| if mask[i] { 50.0 + (i % 7) as f64 } else { 0.0 });
        let ya = ts_car(&NeuralSignal::with_default_ids(art.clone(), fs).unwrap(), &set, 130.0).unwrap().data;
        let (num, den): (Vec<f64>, Vec<f64>) = (0..n).filter(|&i| mask[i]).map(|i| (ya[[i, 0]], art[[i, 0]])).unzip();
        let ratio = rms(&num) / rms(&den);
        let want = 1.0 / (ch + 1) as f64;
        ensure!((ratio - want).abs() < 1e-12, "{ch} channels: residual {ratio} vs {want}");
    }
    ensure!(worst <= 1e-9, "in-window deviation {worst:e}");
    Ok(format!("outside windows bit-identical, in-window error {worst:.1e}, residual 1/(n+1) for n in 2,8,13,32"))
}

// 3. FastICA

fn own_amari(p: ArrayView2<f64>) -> f64 {
    let k = p.nrows();
    let mut total = 0.0;
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| p[[i, j]].abs()).collect();
        let col: Vec<f64> = (0..k).map(|j| p[[j, i]].abs()).collect();
        let rmax = row.iter().cloned().fold(0.0, f64::max);
        let cmax = col.iter().cloned().fold(0.0, f64::max);
        total += row.iter().sum::<f64>() / rmax - 1.0 + col.iter().sum::<f64>() / cmax - 1.0;
    }
    total / (2.0 * k as f64 * (k - 1) as f64)
}

fn ica_criterion() -> Outcome {
    let (fs, n, k, ch) = (2000.0, 120_000, 5, 13);
    let start = Instant::now();
    let mut good = 0;
    let mut scores = Vec::new();
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let s = Array2::from_shape_simple_fn((n, k), || {
            // inverse-CDF Laplace draw
            let u: f64 = rng.random::<f64>() - 0.5;
            -u.signum() * (1.0 - 2.0 * u.abs()).ln()
        });
        let a = Array2::from_shape_simple_fn((ch, k), || normal(&mut rng));
        let sig = NeuralSignal::with_default_ids(s.dot(&a.t()), fs).unwrap();
        let m = fastica_fit(&sig, k, seed).map_err(|e| e.to_string())?;
        let d = own_amari(m.filters.dot(&a).view());
        scores.push(format!("{d:.3}"));
        if d <= 0.05 {
            good += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(good >= 9, "Amari <= 0.05 in {good}/10 seeds [{}]", scores.join(" "));
    ensure!(secs < 60.0, "took {secs:.1} s");
    Ok(format!("Amari <= 0.05 in {good}/10 seeds, {secs:.1} s"))
}

// 4. xDAWN

fn own_ssnr(epochs: &[Epoch], target: &[bool], w: &[f64]) -> f64 {
    let proj: Vec<Vec<f64>> = epochs
        .iter()
        .map(|e| (0..e.data.nrows()).map(|t| (0..w.len()).map(|c| e.data[[t, c]] * w[c]).sum()).collect())
        .collect();
    let t = proj[0].len();
    let mut resid = Vec::new();
    let mut evoked = 0.0;
    for class in [true, false] {
        let members: Vec<&Vec<f64>> = proj.iter().zip(target).filter(|(_, &f)| f == class).map(|(p, _)| p).collect();
        let avg: Vec<f64> = (0..t).map(|i| members.iter().map(|p| p[i]).sum::<f64>() / members.len() as f64).collect();
        if class {
            let m = avg.iter().sum::<f64>() / t as f64;
            evoked = avg.iter().map(|v| (v - m).powi(2)).sum::<f64>() / t as f64;
        }
        for p in members {
            resid.extend(p.iter().zip(&avg).map(|(a, b)| a - b));
        }
    }
    let m = resid.iter().sum::<f64>() / resid.len() as f64;
    evoked / (resid.iter().map(|v| (v - m).powi(2)).sum::<f64>() / resid.len() as f64)
}

/// Epochs of 13 channels mixing 13 sources. Source 0 carries the ERP on
/// target trials; with `spread` a second, weaker waveform rides on source 1.
/// Background sources are twice as strong as the ERP source's own noise.
fn mixed_erp_epochs(seed: u64, spread: bool) -> (Vec<Epoch>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ch = 13;
    let a = Array2::from_shape_simple_fn((ch, ch), || normal(&mut rng));
    let mut epochs = Vec::new();
    let mut flags = Vec::new();
    for i in 0..200 {
        let target = i % 2 == 0;
        let src = Array2::from_shape_fn((64, ch), |(s, c)| {
            let t = s as f64;
            let noise = normal(&mut rng) * if c == 0 { 1.0 } else { 2.0 };
            let erp = match c {
                0 if target => 0.8 * (-((t - 32.0) / 6.0).powi(2)).exp(),
                1 if target && spread => 0.5 * ((t - 20.0) / 8.0).sin() * (-((t - 20.0) / 10.0).powi(2)).exp(),
                _ => 0.0,
            };
            erp + noise
        });
        epochs.push(Epoch { data: src.dot(&a.t()), t0_offset: 0.5, fs: 64.0, label: TrialLabel::fixation(0) });
        flags.push(target);
    }
    (epochs, flags)
}

fn xdawn_criterion() -> Outcome {
    let mut worst_spread = f64::INFINITY;
    let mut worst_single = f64::INFINITY;
    for seed in 0..5u64 {
        for spread in [true, false] {
            let (epochs, flags) = mixed_erp_epochs(40 + seed, spread);
            let m = xdawn_fit(&epochs, &flags, 2, &default_channel_ids(13)).map_err(|e| e.to_string())?;
            let top = own_ssnr(&epochs, &flags, &m.filters.row(0).to_vec());
            let best = (0..13)
                .map(|c| {
                    let mut w = vec![0.0; 13];
                    w[c] = 1.0;
                    own_ssnr(&epochs, &flags, &w)
                })
                .fold(0.0, f64::max);
            let ratio = top / best;
            if spread {
                worst_spread = worst_spread.min(ratio);
            } else {
                worst_single = worst_single.min(ratio);
            }
        }
    }
    ensure!(worst_spread >= 1.0, "top component below best channel: ratio {worst_spread:.3}");
    ensure!(worst_single >= 3.0, "single-source ERP gain {worst_single:.3} < 3");
    Ok(format!("SSNR gain over best channel: >= {worst_spread:.2}x (two ERP sources), >= {worst_single:.2}x (one source)"))
}

// 5. Point-biserial r²

fn brute_r2(x1: &[f64], x2: &[f64]) -> f64 {
    // squared Pearson correlation between values and class indicator
    let vals: Vec<f64> = x1.iter().chain(x2).copied().collect();
    let ind: Vec<f64> = x1.iter().map(|_| 1.0).chain(x2.iter().map(|_| 0.0)).collect();
    let n = vals.len() as f64;
    let (mv, mi) = (vals.iter().sum::<f64>() / n, ind.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (v, i) in vals.iter().zip(&ind) {
        sxy += (v - mv) * (i - mi);
        sxx += (v - mv) * (v - mv);
        syy += (i - mi) * (i - mi);
    }
    if sxx == 0.0 {
        return 0.0;
    }
    sxy * sxy / (sxx * syy)
}

fn biserial_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n1 = rng.random_range(1..12);
        let n2 = rng.random_range(1..12);
        let shift = rng.random_range(-2.0..2.0);
        let x1: Vec<f64> = (0..n1).map(|_| normal(&mut rng) + shift).collect();
        let x2: Vec<f64> = (0..n2).map(|_| normal(&mut rng)).collect();
        worst = worst.max((biserial_r2(&x1, &x2) - brute_r2(&x1, &x2)).abs());
    }
    ensure!(worst <= 1e-12, "max deviation {worst:e}");
    let one = biserial_r2(&[1.0, 1.0], &[0.0, 0.0]);
    let fifth = biserial_r2(&[2.0, 4.0], &[1.0, 3.0]);
    ensure!(one == 1.0 && fifth == 0.2, "hand cases gave {one} and {fifth}");
    Ok(format!("1000 random inputs within {worst:.1e}, hand cases 1 and 0.2 exact"))
}

// 6. Spectrogram

fn burst_epochs(amp: f64, seed: u64) -> Vec<Epoch> {
    let fs = 128.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..10)
        .map(|_| {
            let data = Array2::from_shape_fn((8 * 128, 1), |(i, _)| {
                let t = i as f64 / fs;
                let env = if (t - 4.2).abs() < 0.25 { 0.5 * (1.0 + (std::f64::consts::PI * (t - 4.2) / 0.25).cos()) } else { 0.0 };
                amp * (3.0 * env * (2.0 * std::f64::consts::PI * 10.0 * t).sin() + 0.3 * normal(&mut rng))
            });
            Epoch { data, t0_offset: 0.0, fs, label: TrialLabel::fixation(0) }
        })
        .collect()
}

fn spectrogram_criterion() -> Outcome {
    let cfg = SpectrogramConfig::default();
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..5 {
        let sg = morlet_spectrogram(&burst_epochs(1.0, seed), 0, &cfg, &Baseline::Whole).map_err(|e| e.to_string())?;
        let ((fi, ti), _) = sg
            .power_db
            .indexed_iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let (df, dt) = ((sg.freqs[fi] - 10.0).abs(), (sg.times[ti] - 4.2).abs());
        ensure!(df <= 0.5 && dt <= 0.05, "seed {seed}: peak at {} Hz, {} s", sg.freqs[fi], sg.times[ti]);
        worst = (worst.0.max(df), worst.1.max(dt));
    }
    let coarse = SpectrogramConfig { fmin: 2.0, fmax: 30.0, df: 0.5 };
    let a = morlet_spectrogram(&burst_epochs(1.0, 9), 0, &coarse, &Baseline::Whole).unwrap();
    let b = morlet_spectrogram(&burst_epochs(2.0, 9), 0, &coarse, &Baseline::External(a.baseline_power.clone())).unwrap();
    let off = a
        .power_db
        .iter()
        .zip(b.power_db.iter())
        .map(|(u, v)| (v - u - 20.0 * 2f64.log10()).abs())
        .fold(0.0, f64::max);
    ensure!(off <= 0.1, "doubling off 6.02 dB by {off}");
    Ok(format!(
        "burst peak within {:.2} Hz / {:.0} ms, doubling = 6.02 dB within {off:.1e}",
        worst.0,
        worst.1 * 1000.0
    ))
}

// 7. AUC

fn auc_criterion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for k in 0..1000 {
        let n_pos = rng.random_range(1..30);
        let n_neg = rng.random_range(1..30);
        let discrete = k % 2 == 0;
        let draw = |rng: &mut ChaCha8Rng| if discrete { rng.random_range(0..5) as f64 } else { normal(rng) };
        let pos: Vec<f64> = (0..n_pos).map(|_| draw(&mut rng)).collect();
        let neg: Vec<f64> = (0..n_neg).map(|_| draw(&mut rng)).collect();
        let mut twice = 0u64;
        for p in &pos {
            for q in &neg {
                twice += if p > q { 2 } else if p == q { 1 } else { 0 };
            }
        }
        let brute = twice as f64 / (2 * n_pos * n_neg) as f64;
        let mut scores = pos.clone();
        scores.extend(&neg);
        let labels: Vec<bool> = (0..scores.len()).map(|i| i < n_pos).collect();
        let got = auc_roc(&scores, &labels).map_err(|e| e.to_string())?;
        ensure!(got == brute, "set {k}: {got} vs brute force {brute}");
    }
    Ok("1000 random sets (half with ties) equal brute force exactly".into())
}

// 8. Gaze labelling

fn gaze_criterion() -> Outcome {
    let mut lines = Vec::new();
    for task in [Task::FreeViewing, Task::VisuallyGuided] {
        let c = GenConfig { fs_neural: 250.0, task, n_trials_per_direction: 15, ..GenConfig::default() };
        let (s, gt) = generate_session(&c).map_err(|e| e.to_string())?;
        let mut events = detect_saccade_onsets(&s.gaze, &Geometry::default());
        annotate(&mut events, &s);
        let tol = 1.0 / c.fs_gaze + 1e-9;
        let hits = gt
            .saccades
            .iter()
            .filter(|p| events.iter().any(|e| e.role == p.role && (e.onset_s - p.onset).abs() <= tol))
            .count();
        let frac = hits as f64 / gt.saccades.len() as f64;
        ensure!(frac >= 0.95, "{}: {hits}/{} onsets within one gaze sample", task.as_str(), gt.saccades.len());
        lines.push(format!("{} {:.1}%", task.as_str(), 100.0 * frac));

        // noiseless steps: every direction right, back saccades complemented
        let quiet = GenConfig { gaze_jitter_cm: 0.0, ..c.clone().noiseless() };
        let (s, gt) = generate_session(&quiet).map_err(|e| e.to_string())?;
        let mut events = detect_saccade_onsets(&s.gaze, &Geometry::default());
        annotate(&mut events, &s);
        ensure!(events.len() == gt.saccades.len(), "noiseless: {} events for {} saccades", events.len(), gt.saccades.len());
        let right = events.iter().zip(&gt.saccades).filter(|(e, p)| e.direction == p.direction).count();
        ensure!(right == gt.saccades.len(), "noiseless direction accuracy {right}/{}", gt.saccades.len());
        let back = label_trials(&events, task, LabelRole::Back);
        let initial: Vec<&_> = gt.initial_onsets().collect();
        ensure!(back.len() == initial.len(), "{} back labels for {} trials", back.len(), initial.len());
        for (b, p) in back.iter().zip(&initial) {
            let want = match p.direction {
                Direction::Left => Direction::Right,
                Direction::Right => Direction::Left,
                Direction::Up => Direction::Down,
                Direction::Down => Direction::Up,
            };
            ensure!(b.label.direction == Some(want), "trial {} back label {:?}", p.trial_index, b.label.direction);
        }
        ensure!(
            gt.saccades.iter().filter(|p| p.role == SaccadeRole::Back).count() == initial.len(),
            "back saccade count"
        );
    }
    Ok(format!("onsets within +-1 gaze sample: {}; noiseless directions 100%, back labels complemented", lines.join(", ")))
}

// 9. End to end on synthetic sessions

const CAL_SUBJECT: u64 = 900;

fn e2e_config(seed: u64, id: &str, amp: f64, fs: f64) -> GenConfig {
    GenConfig {
        seed,
        subject_seed: Some(CAL_SUBJECT + seed / 1000),
        session_id: Some(id.to_string()),
        fs_neural: fs,
        task: Task::FreeViewing,
        n_runs: 4,
        n_trials_per_direction: 48,
        erp_amplitude_uv: amp,
        ..GenConfig::default()
    }
}

fn e2e_protocol() -> ProtocolConfig {
    ProtocolConfig {
        roles: vec![LabelRole::Initial],
        intervals: vec![Interval::Full],
        comparisons: Comparison::all(),
        ..ProtocolConfig::default()
    }
}

/// Matched-filter scores: the planted unmixing row for the saccadic source,
/// then the inner product with the saccadic template, on the same
/// preprocessed runs the decoder sees. Saccade epochs sit at the planted
/// onsets; fixation epochs are the decoder's own.
fn oracle_scores(prepared: &PreparedSession, gt: &GroundTruth) -> (Vec<f64>, Vec<bool>) {
    let unmix = pinv(gt.mixing_matrix().view()).expect("pinv");
    let w: Array1<f64> = unmix.row(SRC_SACCADE).to_owned();
    let score = |e: &Epoch| -> f64 {
        let y = e.data.dot(&w);
        let m = y.mean().unwrap();
        y.iter()
            .enumerate()
            .map(|(k, v)| (v - m) * saccade_template(k as f64 / e.fs - e.t0_offset))
            .sum()
    };
    let window = Interval::Full.window();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for run in &prepared.runs {
        let events: Vec<LabelledEvent> = gt
            .initial_onsets()
            .filter(|p| p.run_index == run.run_index)
            .map(|p| LabelledEvent {
                time: p.onset - run.t_start,
                label: TrialLabel::saccade(p.direction, LabelRole::Initial, run.run_index),
            })
            .collect();
        for e in extract_epochs(&run.signal, &events, &window, &[]).epochs {
            scores.push(score(&e));
            labels.push(true);
        }
    }
    let bundle = prepared.epochs(LabelRole::Initial, Interval::Full).expect("epochs");
    for e in &bundle.fixations {
        scores.push(score(e));
        labels.push(false);
    }
    (scores, labels)
}

fn oracle_at(amp: f64, fs: f64) -> Result<(Vec<f64>, Vec<bool>), String> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (seed, id) in [(1u64, "A"), (2, "B")] {
        let (s, gt) = generate_session(&e2e_config(seed, id, amp, fs)).map_err(|e| e.to_string())?;
        let p = prepare_session(&s, &e2e_protocol(), None).map_err(|e| e.to_string())?;
        let (sc, lb) = oracle_scores(&p, &gt);
        scores.extend(sc);
        labels.extend(lb);
    }
    Ok((scores, labels))
}

fn mean_auc(report: &EvalReport, protocol: Protocol, comparison: Comparison) -> f64 {
    let v: Vec<f64> = report.rows_where(protocol, comparison).filter_map(|r| r.mean_auc).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn sessions(amp: f64, fs: f64, seeds: [u64; 2]) -> Result<Vec<Session>, String> {
    seeds
        .iter()
        .zip(["A", "B"])
        .map(|(&seed, id)| generate_session(&e2e_config(seed, id, amp, fs)).map(|x| x.0).map_err(|e| e.to_string()))
        .collect()
}

fn evaluate(sessions: &[Session]) -> Result<EvalReport, String> {
    let cfg = e2e_protocol();
    let prepared: Vec<PreparedSession> = sessions
        .iter()
        .map(|s| prepare_session(s, &cfg, None))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    evaluate_prepared(&prepared, &cfg, &[Protocol::Within, Protocol::Cross]).map_err(|e| e.to_string())
}

fn end_to_end() -> Outcome {
    let start = Instant::now();
    let fs = 512.0;
    // Planted amplitudes enter linearly and every noise stream is drawn
    // independently of them, so oracle scores are n + amp * g.
    let (noise, labels) = oracle_at(0.0, fs)?;
    let (unit, labels1) = oracle_at(1.0, fs)?;
    ensure!(labels == labels1, "oracle epochs differ between amplitudes");
    let g: Vec<f64> = unit.iter().zip(&noise).map(|(u, n)| u - n).collect();
    let auc = |amp: f64| {
        let s: Vec<f64> = noise.iter().zip(&g).map(|(n, g)| n + amp * g).collect();
        auc_roc(&s, &labels).unwrap()
    };
    let (mut lo, mut hi) = (0.0, 64.0);
    ensure!(auc(hi) >= 0.95, "oracle never reaches 0.95");
    for _ in 0..40 {
        let mid = 0.5 * (lo + hi);
        if auc(mid) >= 0.95 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let amp = hi;
    let (check, check_labels) = oracle_at(amp, fs)?;
    let oracle = auc_roc(&check, &check_labels).unwrap();

    let report = evaluate(&sessions(amp, fs, [1, 2])?)?;
    let within = mean_auc(&report, Protocol::Within, Comparison::Onset);
    let cross = mean_auc(&report, Protocol::Cross, Comparison::Onset);
    let four = mean_auc(&report, Protocol::Within, Comparison::FourClass);
    let (best_pair, best_auc) = Comparison::all()
        .into_iter()
        .filter(|c| matches!(c, Comparison::Pairwise(..)))
        .map(|c| (c, mean_auc(&report, Protocol::Within, c)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let signal_secs = start.elapsed().as_secs_f64();

    // Null: no planted signal, 20 independent session pairs at a reduced rate.
    let mut per_row: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut single_worst = 0.0f64;
    for k in 0..20u64 {
        let seeds = [1000 * (k + 1) + 1, 1000 * (k + 1) + 2];
        let rep = evaluate(&sessions(0.0, 256.0, seeds)?)?;
        for r in &rep.rows {
            if let Some(a) = r.mean_auc {
                single_worst = single_worst.max((a - 0.5).abs());
                per_row.entry(format!("{}/{}/{}", r.protocol.as_str(), r.test_set, r.comparison)).or_default().push(a);
            }
        }
    }
    let null: Vec<(String, f64)> = per_row.into_iter().map(|(k, v)| (k, v.iter().sum::<f64>() / v.len() as f64)).collect();
    let (null_key, null_worst) = null
        .iter()
        .map(|(k, m)| (k.clone(), (m - 0.5).abs()))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    let secs = start.elapsed().as_secs_f64();

    let summary = format!(
        "amp {amp:.3} uV (oracle {oracle:.3}), onset within {within:.3} cross {cross:.3}, \
         best pair {best_pair} {best_auc:.3} vs 4-class {four:.3}, \
         null mean over 20 pairs worst |AUC-0.5| {null_worst:.3} ({null_key}), single-pair worst {single_worst:.3}, \
         {signal_secs:.0}+{:.0} s",
        secs - signal_secs
    );
    ensure!((oracle - 0.95).abs() <= 0.02, "calibration drifted: {summary}");
    ensure!(within >= 0.85, "within-session onset below 0.85: {summary}");
    ensure!(cross >= 0.80, "cross-session onset below 0.80: {summary}");
    ensure!(best_auc > four, "best pair not above 4-class: {summary}");
    ensure!(null_worst <= 0.07, "null AUC off chance: {summary}");
    ensure!(secs < 600.0, "over ten minutes: {summary}");
    Ok(summary)
}

// 10. Leakage guard

fn leakage_criterion() -> Outcome {
    let cfg0 = GenConfig { seed: 7, fs_neural: 256.0, n_runs: 3, n_trials_per_direction: 24, ..GenConfig::default() };
    let (s, _) = generate_session(&cfg0).map_err(|e| e.to_string())?;
    let mut cfg = ProtocolConfig::default();
    cfg.classifier.params.n_estimators = 30;
    let full = prepare_session(&s, &cfg, None).map_err(|e| e.to_string())?;
    let mut checked = 0;
    for test_run in 0..3 {
        let train: Vec<usize> = (0..3).filter(|&r| r != test_run).collect();
        let reduced = prepare_session(&s, &cfg, Some(&train)).map_err(|e| e.to_string())?;
        // the test run's samples replaced by unrelated noise
        let mut scrambled = s.clone();
        let b = s.runs[test_run];
        let fs = s.neural.fs;
        let mut rng = ChaCha8Rng::seed_from_u64(test_run as u64);
        for i in (b[0] * fs).ceil() as usize..((b[1] * fs).floor() as usize + 1).min(s.neural.n_samples()) {
            for c in 0..s.neural.n_channels() {
                scrambled.neural.data[[i, c]] = 40.0 * normal(&mut rng);
            }
        }
        let scrambled = prepare_session(&scrambled, &cfg, None).map_err(|e| e.to_string())?;
        for comparison in [Comparison::Onset, Comparison::FourClass, Comparison::Pairwise(Direction::Left, Direction::Right)] {
            let fit = |p: &PreparedSession| -> String {
                let bundle = p.epochs(LabelRole::Initial, Interval::PrePost).unwrap();
                let (epochs, y) = comparison_data(&bundle, comparison, |r| train.contains(&r));
                let epochs: Vec<Epoch> = epochs.into_iter().cloned().collect();
                let groups: Vec<usize> = epochs.iter().map(|e| e.label.run_index).collect();
                serde_json::to_string(&fit_fold(&epochs, &y, &groups, comparison, &cfg, &p.channel_ids).unwrap()).unwrap()
            };
            let reference = fit(&full);
            ensure!(reference == fit(&reduced), "run {test_run} deleted changes the {comparison} fit");
            ensure!(reference == fit(&scrambled), "run {test_run} scrambled changes the {comparison} fit");
            checked += 1;
        }
    }
    Ok(format!("{checked} fits bit-identical with the test run deleted or scrambled"))
}

// 11. Determinism through the binary

const PIPELINE: &str = r#"
seed = 5

[[stages]]
stage = "synth"
sessions = 2
fs = 256.0
runs = 3
trials_per_direction = 8

[[stages]]
stage = "preprocess"

[[stages]]
stage = "epoch"

[[stages]]
stage = "eval"
intervals = ["pre_post"]

[stages.classifier]
trees = 25

[[stages]]
stage = "report"
"#;

fn run_pipeline(dir: &Path, out: &str) -> Result<Vec<u8>, String> {
    let status = Command::new(env!("CARGO_BIN_EXE_saccade"))
        .current_dir(dir)
        .env_remove("SACCADE_OUT")
        .args(["pipeline", "--config", "p.toml", "--out", out])
        .output()
        .map_err(|e| e.to_string())?;
    ensure!(status.status.success(), "pipeline failed: {}", String::from_utf8_lossy(&status.stderr));
    std::fs::read(dir.join(out).join("report.csv")).map_err(|e| e.to_string())
}

fn determinism_criterion() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    std::fs::write(tmp.path().join("p.toml"), PIPELINE).map_err(|e| e.to_string())?;
    let a = run_pipeline(tmp.path(), "first")?;
    let b = run_pipeline(tmp.path(), "second")?;
    ensure!(a == b, "report.csv differs between runs");
    let rows = a.iter().filter(|&&c| c == b'\n').count() - 1;
    Ok(format!("report.csv byte-identical across two runs ({rows} rows)"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("filters: notch, high-pass passband, zero lag", filters),
        ("TS-CAR operator", ts_car_criterion),
        ("FastICA recovery", ica_criterion),
        ("xDAWN SSNR", xdawn_criterion),
        ("point-biserial r2", biserial_criterion),
        ("Morlet spectrogram", spectrogram_criterion),
        ("AUC", auc_criterion),
        ("gaze onsets and labels", gaze_criterion),
        ("end-to-end decoding and null", end_to_end),
        ("leakage guard", leakage_criterion),
        ("pipeline determinism", determinism_criterion),
    ];
    let filter: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if filter.is_some_and(|k| k != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let took = fmt_duration(start.elapsed());
        match result {
            Ok(detail) => println!("PASS {:>2} {name} [{took}]: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name} [{took}]: {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}

fn fmt_duration(d: Duration) -> String {
    format!("{:.1} s", d.as_secs_f64())
}
