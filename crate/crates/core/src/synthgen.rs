//! Deterministic synthetic sessions with planted ground truth.
//!
//! Neural data is `A·S + cardiac + noise`. The source matrix `S` holds a
//! saccadic-potential source, a cue-locked P300 source (visually guided
//! task only), a direction-coded source and optional Laplacian background
//! sources. Every random draw comes from a ChaCha8 stream keyed by the seed
//! and a per-component stream id, so changing an amplitude never changes
//! layout, mixing or noise realisations.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{rank, RowMajor};
use crate::model::{
    default_channel_ids, Direction, EventKind, EventMarker, GazeTrack, NeuralSignal, SaccadeRole, Session, Task,
};

pub const SRC_SACCADE: usize = 0;
pub const SRC_P300: usize = 1;
pub const SRC_DIRECTION: usize = 2;
/// Number of planted (non-background) sources.
pub const N_PLANTED: usize = 3;

const STREAM_LAYOUT: u64 = 1;
const STREAM_MIXING: u64 = 2;
const STREAM_CARDIAC: u64 = 3;
const STREAM_GAZE: u64 = 4;
const STREAM_BACKGROUND: u64 = 100;
const STREAM_NOISE: u64 = 1000;

/// Gaze gap placed over the initial saccade of a blink trial, relative to onset.
const BLINK_SPAN: [f64; 2] = [-0.1, 0.25];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CardiacConfig {
    pub rate_hz: f64,
    pub amplitude_uv: f64,
    pub qrs_width_ms: f64,
}

impl Default for CardiacConfig {
    fn default() -> Self {
        CardiacConfig { rate_hz: 1.1, amplitude_uv: 20.0, qrs_width_ms: 40.0 }
    }
}

/// Truncated-normal wait between cue and saccade onset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WaitTimeConfig {
    pub mean_s: f64,
    pub sd_s: f64,
    pub min_s: f64,
    pub max_s: f64,
}

impl Default for WaitTimeConfig {
    fn default() -> Self {
        WaitTimeConfig { mean_s: 0.626, sd_s: 0.103, min_s: 0.414, max_s: 0.935 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub seed: u64,
    /// Seeds the participant-level draws (mixing matrix, cardiac gains);
    /// sessions sharing it share an electrode layout. Defaults to `seed`.
    pub subject_seed: Option<u64>,
    pub session_id: Option<String>,
    /// Total length; `None` fits the layout exactly.
    pub duration_s: Option<f64>,
    pub fs_neural: f64,
    pub fs_gaze: f64,
    pub n_channels: usize,
    pub task: Task,
    pub n_runs: usize,
    /// Trials per direction over the whole session, spread across runs.
    pub n_trials_per_direction: usize,
    pub n_background_sources: usize,
    /// Explicit mixing matrix `[n_channels × n_sources]`; drawn from the seed when absent.
    pub mixing: Option<Vec<Vec<f64>>>,
    pub erp_amplitude_uv: f64,
    pub p300_amplitude_uv: f64,
    /// Scale of the direction source relative to `erp_amplitude_uv`.
    pub direction_depth: f64,
    /// Gains in `Direction::ALL` order (left, right, up, down).
    pub direction_gains: [f64; 4],
    pub direction_latency_ms: [f64; 4],
    pub background_uv: f64,
    pub cardiac: CardiacConfig,
    pub line_noise_uv: f64,
    pub pink_noise_uv: f64,
    pub white_noise_uv: f64,
    pub wait_time: WaitTimeConfig,
    pub eccentricity_cm: f64,
    pub saccade_ramp_ms: f64,
    pub gaze_jitter_cm: f64,
    pub blink_prob: f64,
    pub lead_in_s: f64,
    pub break_s: f64,
    pub run_tail_s: f64,
    /// Leading fixation block of each free-viewing run.
    pub fixation_block_s: f64,
    /// Fixation preceding each visually guided cue.
    pub pre_cue_fixation_s: f64,
    pub dwell_s: [f64; 2],
    pub hold_s: [f64; 2],
    pub settle_s: [f64; 2],
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 42,
            subject_seed: None,
            session_id: None,
            duration_s: None,
            fs_neural: 2000.0,
            fs_gaze: 60.0,
            n_channels: 13,
            task: Task::FreeViewing,
            n_runs: 3,
            n_trials_per_direction: 12,
            n_background_sources: 2,
            mixing: None,
            erp_amplitude_uv: 8.0,
            p300_amplitude_uv: 6.0,
            direction_depth: 1.0,
            direction_gains: [1.0, 0.9, 1.15, 0.85],
            direction_latency_ms: [-10.0, 10.0, 10.0, -10.0],
            background_uv: 5.0,
            cardiac: CardiacConfig::default(),
            line_noise_uv: 5.0,
            pink_noise_uv: 5.0,
            white_noise_uv: 2.0,
            wait_time: WaitTimeConfig::default(),
            eccentricity_cm: 8.5,
            saccade_ramp_ms: 20.0,
            gaze_jitter_cm: 0.05,
            blink_prob: 0.0,
            lead_in_s: 2.0,
            break_s: 5.0,
            run_tail_s: 1.0,
            fixation_block_s: 15.0,
            pre_cue_fixation_s: 1.5,
            dwell_s: [0.8, 1.6],
            hold_s: [0.6, 1.0],
            settle_s: [0.3, 0.6],
        }
    }
}

impl GenConfig {
    pub fn subject_seed(&self) -> u64 {
        self.subject_seed.unwrap_or(self.seed)
    }

    pub fn n_sources(&self) -> usize {
        N_PLANTED + self.n_background_sources
    }

    /// Zeroes every noise term: background sources, cardiac, line, pink, white.
    pub fn noiseless(mut self) -> Self {
        self.background_uv = 0.0;
        self.cardiac.amplitude_uv = 0.0;
        self.line_noise_uv = 0.0;
        self.pink_noise_uv = 0.0;
        self.white_noise_uv = 0.0;
        self
    }

    fn ramp_s(&self) -> f64 {
        self.saccade_ramp_ms / 1000.0
    }

    /// Worst-case trial length, used for the minimum-duration check.
    fn max_trial_s(&self) -> f64 {
        let moves = self.dwell_s[1] + self.hold_s[1] + 2.0 * self.ramp_s();
        match self.task {
            Task::FreeViewing => moves,
            Task::VisuallyGuided => {
                self.pre_cue_fixation_s + self.wait_time.max_s + self.hold_s[1] + 2.0 * self.ramp_s() + self.settle_s[1]
            }
        }
    }

    fn trials_in_run(&self, run: usize) -> usize {
        let total = 4 * self.n_trials_per_direction;
        total / self.n_runs + usize::from(run < total % self.n_runs)
    }

    /// Shortest `duration_s` guaranteed to fit the requested trials.
    pub fn required_duration_s(&self) -> f64 {
        let block = match self.task {
            Task::FreeViewing => self.fixation_block_s,
            Task::VisuallyGuided => 0.0,
        };
        let runs: f64 = (0..self.n_runs)
            .map(|r| block + self.trials_in_run(r) as f64 * self.max_trial_s() + self.run_tail_s)
            .sum();
        self.lead_in_s + runs + self.n_runs as f64 * self.break_s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        let positive = [
            ("fs_neural", self.fs_neural),
            ("fs_gaze", self.fs_gaze),
            ("cardiac.rate_hz", self.cardiac.rate_hz),
            ("cardiac.qrs_width_ms", self.cardiac.qrs_width_ms),
            ("eccentricity_cm", self.eccentricity_cm),
            ("saccade_ramp_ms", self.saccade_ramp_ms),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be > 0, got {v}"));
            }
        }
        let non_negative = [
            ("erp_amplitude_uv", self.erp_amplitude_uv),
            ("p300_amplitude_uv", self.p300_amplitude_uv),
            ("direction_depth", self.direction_depth),
            ("background_uv", self.background_uv),
            ("cardiac.amplitude_uv", self.cardiac.amplitude_uv),
            ("line_noise_uv", self.line_noise_uv),
            ("pink_noise_uv", self.pink_noise_uv),
            ("white_noise_uv", self.white_noise_uv),
            ("gaze_jitter_cm", self.gaze_jitter_cm),
            ("wait_time.sd_s", self.wait_time.sd_s),
            ("lead_in_s", self.lead_in_s),
            ("break_s", self.break_s),
            ("run_tail_s", self.run_tail_s),
            ("fixation_block_s", self.fixation_block_s),
            ("pre_cue_fixation_s", self.pre_cue_fixation_s),
        ];
        for (name, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be >= 0, got {v}"));
            }
        }
        for (name, g) in [("direction_gains", self.direction_gains), ("direction_latency_ms", self.direction_latency_ms)] {
            if g.iter().any(|v| !v.is_finite()) || (name == "direction_gains" && g.iter().any(|&v| v < 0.0)) {
                return bad(format!("{name} must be finite{}", if name == "direction_gains" { " and >= 0" } else { "" }));
            }
        }
        for (name, r) in [("dwell_s", self.dwell_s), ("hold_s", self.hold_s), ("settle_s", self.settle_s)] {
            if !(r[0] > 0.0 && r[0] <= r[1] && r[1].is_finite()) {
                return bad(format!("{name} must satisfy 0 < lo <= hi, got {r:?}"));
            }
        }
        let w = &self.wait_time;
        if !(w.min_s > 0.0 && w.min_s <= w.mean_s && w.mean_s <= w.max_s && w.max_s.is_finite()) {
            return bad(format!("wait_time requires 0 < min <= mean <= max, got {w:?}"));
        }
        if !(0.0..=1.0).contains(&self.blink_prob) {
            return bad(format!("blink_prob must lie in [0, 1], got {}", self.blink_prob));
        }
        if self.n_channels == 0 {
            return bad("n_channels must be >= 1".into());
        }
        if self.n_runs < 3 {
            return bad(format!("n_runs must be >= 3, got {}", self.n_runs));
        }
        if self.n_trials_per_direction == 0 {
            return bad("n_trials_per_direction must be >= 1".into());
        }
        if self.n_sources() > self.n_channels {
            return bad(format!(
                "{} sources cannot have a full-column-rank mixing into {} channels",
                self.n_sources(),
                self.n_channels
            ));
        }
        if let Some(m) = &self.mixing {
            let a = mixing_from_rows(m, self.n_channels, self.n_sources())?;
            if rank(a.view(), 1e-10) < self.n_sources() {
                return bad("mixing matrix must have full column rank".into());
            }
        }
        if let Some(d) = self.duration_s {
            let need = self.required_duration_s();
            if !(d >= need) {
                return bad(format!("duration_s = {d} is too short for the requested trials; need at least {need:.3} s"));
            }
        }
        Ok(())
    }
}

fn mixing_from_rows(rows: &[Vec<f64>], n_channels: usize, n_sources: usize) -> Result<Array2<f64>> {
    if rows.len() != n_channels || rows.iter().any(|r| r.len() != n_sources) {
        return Err(Error::InvalidConfig(format!("mixing must be {n_channels} x {n_sources}")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig("mixing entries must be finite".into()));
    }
    Ok(Array2::from_shape_fn((n_channels, n_sources), |(i, j)| rows[i][j]))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedSaccade {
    pub onset: f64,
    pub offset: f64,
    pub direction: Direction,
    pub role: SaccadeRole,
    pub trial_index: usize,
    pub run_index: usize,
    /// Cue time of the trial (visually guided only).
    pub cue: Option<f64>,
    /// Gaze samples were dropped around this onset.
    pub blinked: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub seed: u64,
    pub source_names: Vec<String>,
    /// `[n_channels × n_sources]`.
    pub mixing: RowMajor,
    /// Sorted by onset.
    pub saccades: Vec<PlantedSaccade>,
    pub r_peaks: Vec<f64>,
    pub cardiac_gains: Vec<f64>,
    /// Onset minus cue per visually guided trial.
    pub wait_times: Vec<f64>,
    pub fixation_intervals: Vec<[f64; 2]>,
    /// `[n_samples × n_sources]`; not serialised.
    #[serde(skip)]
    pub sources: Array2<f64>,
}

impl GroundTruth {
    pub fn mixing_matrix(&self) -> Array2<f64> {
        self.mixing.to_array().expect("ground-truth mixing shape")
    }

    pub fn initial_onsets(&self) -> impl Iterator<Item = &PlantedSaccade> {
        self.saccades.iter().filter(|s| s.role == SaccadeRole::Initial)
    }
}

/// Saccadic potential: raised cosine rising from -50 ms to a unit peak at
/// +50 ms and falling back to zero at +200 ms.
pub fn saccade_template(tau: f64) -> f64 {
    use std::f64::consts::PI;
    if !(-0.05..=0.2).contains(&tau) {
        0.0
    } else if tau <= 0.05 {
        0.5 * (1.0 - (PI * (tau + 0.05) / 0.1).cos())
    } else {
        0.5 * (1.0 + (PI * (tau - 0.05) / 0.15).cos())
    }
}

/// Cue-locked positivity peaking at 350 ms, 300 ms wide.
pub fn p300_template(tau: f64) -> f64 {
    use std::f64::consts::PI;
    if (tau - 0.35).abs() >= 0.15 {
        0.0
    } else {
        0.5 * (1.0 + (PI * (tau - 0.35) / 0.15).cos())
    }
}

/// Direction-source waveform for a saccade in direction `d`, in µV.
pub fn direction_waveform(cfg: &GenConfig, d: Direction, tau: f64) -> f64 {
    let shift = cfg.direction_latency_ms[d.index()] / 1000.0;
    cfg.erp_amplitude_uv * cfg.direction_depth * cfg.direction_gains[d.index()] * saccade_template(tau - shift)
}

/// Biphasic triangular QRS-like pulse with unit positive peak at 0.
pub fn cardiac_waveform(tau: f64, width_s: f64) -> f64 {
    let half = width_s / 2.0;
    if tau.abs() <= half {
        1.0 - tau.abs() / half
    } else if tau > half && tau < half + width_s {
        -0.4 * (1.0 - (tau - half - half).abs() / half)
    } else {
        0.0
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        // still consume a draw so the stream stays aligned
        let _: f64 = rng.random();
        r[0]
    } else {
        rng.random_range(r[0]..r[1])
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, w: &WaitTimeConfig) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        let v = w.mean_s + w.sd_s * z;
        if (w.min_s..=w.max_s).contains(&v) {
            return v;
        }
    }
}

struct Trial {
    run: usize,
    index: usize,
    direction: Direction,
    cue: Option<f64>,
    pre_cue: Option<[f64; 2]>,
    onset_initial: f64,
    onset_back: f64,
    blinked: bool,
}

struct Layout {
    runs: Vec<[f64; 2]>,
    trials: Vec<Trial>,
    fixation_blocks: Vec<[f64; 2]>,
    end: f64,
}

fn plan_layout(cfg: &GenConfig) -> Layout {
    let mut rng = stream(cfg.seed, STREAM_LAYOUT);
    let ramp = cfg.ramp_s();
    let mut t = cfg.lead_in_s;
    let mut runs = Vec::with_capacity(cfg.n_runs);
    let mut trials = Vec::new();
    let mut fixation_blocks = Vec::new();
    let mut index = 0;
    for run in 0..cfg.n_runs {
        let start = t;
        let n = cfg.trials_in_run(run);
        let mut dirs: Vec<Direction> = (0..n).map(|k| Direction::ALL[(k + run) % 4]).collect();
        for i in (1..dirs.len()).rev() {
            let j = rng.random_range(0..=i);
            dirs.swap(i, j);
        }
        if cfg.task == Task::FreeViewing {
            fixation_blocks.push([t, t + cfg.fixation_block_s]);
            t += cfg.fixation_block_s;
        }
        for direction in dirs {
            let (cue, pre_cue, onset_initial) = match cfg.task {
                Task::FreeViewing => (None, None, t + uniform(&mut rng, cfg.dwell_s)),
                Task::VisuallyGuided => {
                    let fix = [t, t + cfg.pre_cue_fixation_s];
                    let cue = fix[1];
                    (Some(cue), Some(fix), cue + truncated_normal(&mut rng, &cfg.wait_time))
                }
            };
            let onset_back = onset_initial + ramp + uniform(&mut rng, cfg.hold_s);
            t = onset_back + ramp;
            if cfg.task == Task::VisuallyGuided {
                t += uniform(&mut rng, cfg.settle_s);
            }
            let blinked = rng.random::<f64>() < cfg.blink_prob;
            trials.push(Trial { run, index, direction, cue, pre_cue, onset_initial, onset_back, blinked });
            index += 1;
        }
        t += cfg.run_tail_s;
        runs.push([start, t]);
        t += cfg.break_s;
    }
    Layout { runs, trials, fixation_blocks, end: t }
}

fn draw_mixing(cfg: &GenConfig) -> Result<Array2<f64>> {
    if let Some(m) = &cfg.mixing {
        return mixing_from_rows(m, cfg.n_channels, cfg.n_sources());
    }
    let mut rng = stream(cfg.subject_seed(), STREAM_MIXING);
    for _ in 0..16 {
        let a = Array2::from_shape_simple_fn((cfg.n_channels, cfg.n_sources()), || rng.sample::<f64, _>(StandardNormal));
        if rank(a.view(), 1e-6) == cfg.n_sources() {
            return Ok(a);
        }
    }
    Err(Error::Numerical("could not draw a full-rank mixing matrix".into()))
}

/// Adds `amp · f(t_i − t0)` for samples where `f` can be non-zero.
fn add_waveform(col: &mut [f64], fs: f64, t0: f64, support: [f64; 2], amp: f64, f: impl Fn(f64) -> f64) {
    let n = col.len() as isize;
    let lo = ((t0 + support[0]) * fs).floor() as isize;
    let hi = ((t0 + support[1]) * fs).ceil() as isize;
    for i in lo.max(0)..=hi.min(n - 1) {
        col[i as usize] += amp * f(i as f64 / fs - t0);
    }
}

/// Unit-RMS noise with a 1/f power spectrum above 0.1 Hz.
fn pink_noise(rng: &mut ChaCha8Rng, n: usize, fs: f64) -> Vec<f64> {
    let mut buf: Vec<Complex64> = (0..n).map(|_| Complex64::new(rng.sample(StandardNormal), 0.0)).collect();
    if n < 2 {
        return vec![0.0; n];
    }
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut buf);
    for (k, b) in buf.iter_mut().enumerate() {
        let f = k.min(n - k) as f64 * fs / n as f64;
        *b *= if f < 0.1 { 0.0 } else { 1.0 / f.sqrt() };
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let x: Vec<f64> = buf.iter().map(|c| c.re).collect();
    let rms = (x.iter().map(|v| v * v).sum::<f64>() / n as f64).sqrt();
    if rms > 0.0 {
        x.into_iter().map(|v| v / rms).collect()
    } else {
        x
    }
}

fn laplacian(rng: &mut ChaCha8Rng) -> f64 {
    // unit variance: scale b = 1/sqrt(2)
    let u: f64 = rng.random::<f64>() - 0.5;
    let mag = -(1.0 - 2.0 * u.abs()).max(f64::MIN_POSITIVE).ln() / std::f64::consts::SQRT_2;
    if u < 0.0 {
        -mag
    } else {
        mag
    }
}

fn r_peak_times(cfg: &GenConfig, total: f64) -> Vec<f64> {
    let mut rng = stream(cfg.seed, STREAM_CARDIAC);
    let period = 1.0 / cfg.cardiac.rate_hz;
    let mut t = rng.random_range(0.2..0.2 + period);
    let mut out = Vec::new();
    while t < total - 0.2 {
        out.push(t);
        let z: f64 = rng.sample(StandardNormal);
        t += (period * (1.0 + 0.05 * z)).max(0.3);
    }
    out
}

fn saccades_of(cfg: &GenConfig, layout: &Layout) -> Vec<PlantedSaccade> {
    let ramp = cfg.ramp_s();
    let mut out = Vec::with_capacity(2 * layout.trials.len());
    for tr in &layout.trials {
        let base = PlantedSaccade {
            onset: tr.onset_initial,
            offset: tr.onset_initial + ramp,
            direction: tr.direction,
            role: SaccadeRole::Initial,
            trial_index: tr.index,
            run_index: tr.run,
            cue: tr.cue,
            blinked: tr.blinked,
        };
        let back = PlantedSaccade {
            onset: tr.onset_back,
            offset: tr.onset_back + ramp,
            direction: tr.direction.complement(),
            role: SaccadeRole::Back,
            blinked: false,
            ..base.clone()
        };
        out.push(base);
        out.push(back);
    }
    out
}

fn build_gaze(cfg: &GenConfig, saccades: &[PlantedSaccade], total: f64) -> GazeTrack {
    let mut rng = stream(cfg.seed, STREAM_GAZE);
    let ramp = cfg.ramp_s();
    let n = (total * cfg.fs_gaze).floor() as usize;
    let mut timestamps = Vec::with_capacity(n);
    let mut positions = Vec::with_capacity(n);
    let mut next = 0;
    let mut from = [0.0, 0.0];
    let mut to = [0.0, 0.0];
    let mut move_start = f64::NEG_INFINITY;
    for k in 0..n {
        let t = k as f64 / cfg.fs_gaze;
        while next < saccades.len() && saccades[next].onset <= t {
            let s = &saccades[next];
            from = to;
            to = match s.role {
                SaccadeRole::Initial => {
                    let u = s.direction.unit();
                    [u[0] * cfg.eccentricity_cm, u[1] * cfg.eccentricity_cm]
                }
                SaccadeRole::Back => [0.0, 0.0],
            };
            move_start = s.onset;
            next += 1;
        }
        let a = ((t - move_start) / ramp).clamp(0.0, 1.0);
        let jx: f64 = rng.sample(StandardNormal);
        let jy: f64 = rng.sample(StandardNormal);
        let p = [
            from[0] + (to[0] - from[0]) * a + cfg.gaze_jitter_cm * jx,
            from[1] + (to[1] - from[1]) * a + cfg.gaze_jitter_cm * jy,
        ];
        let dropped = saccades
            .iter()
            .filter(|s| s.blinked)
            .any(|s| t >= s.onset + BLINK_SPAN[0] && t <= s.onset + BLINK_SPAN[1]);
        if !dropped {
            timestamps.push(t);
            positions.push(p);
        }
    }
    GazeTrack { timestamps, positions, fs_nominal: cfg.fs_gaze }
}

fn build_markers(layout: &Layout, saccades: &[PlantedSaccade]) -> Vec<EventMarker> {
    let mut m = Vec::new();
    for r in &layout.runs {
        m.push(EventMarker::new(r[0], EventKind::RunStart));
        m.push(EventMarker::new(r[1], EventKind::RunEnd));
    }
    for b in &layout.fixation_blocks {
        m.push(EventMarker::new(b[0], EventKind::FixationStart));
        m.push(EventMarker::new(b[1], EventKind::FixationEnd));
    }
    for tr in &layout.trials {
        if let Some(f) = tr.pre_cue {
            m.push(EventMarker::new(f[0], EventKind::FixationStart));
            m.push(EventMarker::new(f[1], EventKind::FixationEnd));
        }
        if let Some(c) = tr.cue {
            m.push(EventMarker::new(c, EventKind::CueOnset).with_direction(tr.direction));
        }
    }
    for s in saccades {
        m.push(EventMarker::new(s.onset, EventKind::SaccadeOnset).with_direction(s.direction).with_role(s.role));
        m.push(EventMarker::new(s.offset, EventKind::SaccadeOffset).with_direction(s.direction).with_role(s.role));
    }
    m.sort_by(|a, b| a.time.total_cmp(&b.time));
    m
}

fn source_names(cfg: &GenConfig) -> Vec<String> {
    let mut names = vec!["saccade".to_string(), "p300".to_string(), "direction".to_string()];
    names.extend((0..cfg.n_background_sources).map(|j| format!("background{j}")));
    names
}

/// Builds the source matrix `[n_samples × n_sources]`.
fn build_sources(cfg: &GenConfig, n: usize, saccades: &[PlantedSaccade], cues: &[(f64, Direction)]) -> Array2<f64> {
    let fs = cfg.fs_neural;
    let k = cfg.n_sources();
    let mut cols: Vec<Vec<f64>> = vec![vec![0.0; n]; k];
    let max_shift = cfg.direction_latency_ms.iter().fold(0.0f64, |m, v| m.max(v.abs())) / 1000.0;
    for s in saccades {
        add_waveform(&mut cols[SRC_SACCADE], fs, s.onset, [-0.05, 0.2], cfg.erp_amplitude_uv, saccade_template);
        add_waveform(&mut cols[SRC_DIRECTION], fs, s.onset, [-0.05 - max_shift, 0.2 + max_shift], 1.0, |tau| {
            direction_waveform(cfg, s.direction, tau)
        });
    }
    for &(c, _) in cues {
        add_waveform(&mut cols[SRC_P300], fs, c, [0.2, 0.5], cfg.p300_amplitude_uv, p300_template);
    }
    cols[N_PLANTED..].par_iter_mut().enumerate().for_each(|(j, col)| {
        let mut rng = stream(cfg.seed, STREAM_BACKGROUND + j as u64);
        for v in col.iter_mut() {
            *v = cfg.background_uv * laplacian(&mut rng);
        }
    });
    Array2::from_shape_fn((n, k), |(i, j)| cols[j][i])
}

/// Per-channel additive noise: 50 Hz line, pink and white.
fn channel_noise(cfg: &GenConfig, c: usize, n: usize) -> Vec<f64> {
    let mut rng = stream(cfg.seed, STREAM_NOISE + c as u64);
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let pink = pink_noise(&mut rng, n, cfg.fs_neural);
    (0..n)
        .map(|i| {
            let t = i as f64 / cfg.fs_neural;
            let w: f64 = rng.sample(StandardNormal);
            cfg.line_noise_uv * (std::f64::consts::TAU * 50.0 * t + phase).sin()
                + cfg.pink_noise_uv * pink[i]
                + cfg.white_noise_uv * w
        })
        .collect()
}

/// Generates a synthetic session and its ground truth.
pub fn generate_session(cfg: &GenConfig) -> Result<(Session, GroundTruth)> {
    cfg.validate()?;
    let layout = plan_layout(cfg);
    let total = cfg.duration_s.unwrap_or(layout.end);
    let fs = cfg.fs_neural;
    let n = (total * fs).round() as usize;
    let total = n as f64 / fs;

    let mixing = draw_mixing(cfg)?;
    let saccades = saccades_of(cfg, &layout);
    let cues: Vec<(f64, Direction)> = layout.trials.iter().filter_map(|t| t.cue.map(|c| (c, t.direction))).collect();
    let sources = build_sources(cfg, n, &saccades, &cues);
    let mut data = sources.dot(&mixing.t());

    let r_peaks = r_peak_times(cfg, total);
    let mut grng = stream(cfg.subject_seed(), STREAM_CARDIAC + 10_000);
    let cardiac_gains: Vec<f64> = (0..cfg.n_channels).map(|_| grng.random_range(0.8..1.2)).collect();
    let width = cfg.cardiac.qrs_width_ms / 1000.0;
    let mut wave = vec![0.0; n];
    for &r in &r_peaks {
        add_waveform(&mut wave, fs, r, [-width, 2.0 * width], cfg.cardiac.amplitude_uv, |tau| cardiac_waveform(tau, width));
    }

    let noise: Vec<Vec<f64>> = (0..cfg.n_channels).into_par_iter().map(|c| channel_noise(cfg, c, n)).collect();
    for (c, mut col) in data.columns_mut().into_iter().enumerate() {
        let g = cardiac_gains[c];
        for (i, v) in col.iter_mut().enumerate() {
            *v += g * wave[i] + noise[c][i];
        }
    }

    let neural = NeuralSignal::new(data, fs, default_channel_ids(cfg.n_channels))?;
    let gaze = build_gaze(cfg, &saccades, total);
    let markers = build_markers(&layout, &saccades);
    let mut fixation_intervals = layout.fixation_blocks.clone();
    fixation_intervals.extend(layout.trials.iter().filter_map(|t| t.pre_cue));
    fixation_intervals.sort_by(|a, b| a[0].total_cmp(&b[0]));

    let session = Session {
        session_id: cfg.session_id.clone().unwrap_or_else(|| format!("synth-{}-{}", cfg.task.as_str(), cfg.seed)),
        task: cfg.task,
        neural,
        gaze,
        markers,
        runs: layout.runs.clone(),
        seed: Some(cfg.seed),
    };
    let truth = GroundTruth {
        seed: cfg.seed,
        source_names: source_names(cfg),
        mixing: RowMajor::from(&mixing),
        wait_times: saccades
            .iter()
            .filter(|s| s.role == SaccadeRole::Initial)
            .filter_map(|s| s.cue.map(|c| s.onset - c))
            .collect(),
        saccades,
        r_peaks,
        cardiac_gains,
        fixation_intervals,
        sources,
    };
    Ok((session, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::pinv;
    use crate::model::validate_session;

    fn small(task: Task) -> GenConfig {
        GenConfig { fs_neural: 500.0, task, n_trials_per_direction: 6, ..GenConfig::default() }
    }

    #[test]
    fn template_timing() {
        assert_eq!(saccade_template(0.05), 1.0);
        assert_eq!(saccade_template(-0.05), 0.0);
        assert!(saccade_template(0.2).abs() < 1e-15);
        assert_eq!(saccade_template(0.25), 0.0);
        assert_eq!(p300_template(0.35), 1.0);
        assert_eq!(cardiac_waveform(0.0, 0.04), 1.0);
        assert!((cardiac_waveform(0.04, 0.04) + 0.4).abs() < 1e-12);
    }

    #[test]
    fn well_formed_and_valid() {
        for task in [Task::FreeViewing, Task::VisuallyGuided] {
            let (s, gt) = generate_session(&small(task)).unwrap();
            assert_eq!(validate_session(&s), Vec::<String>::new());
            assert_eq!(s.runs.len(), 3);
            assert!(gt.saccades.windows(2).all(|w| w[0].onset < w[1].onset));
        }
    }

    #[test]
    fn cardiac_only_is_rank_one() {
        let mut cfg = small(Task::FreeViewing).noiseless();
        cfg.erp_amplitude_uv = 0.0;
        cfg.cardiac.amplitude_uv = 10.0;
        let (s, gt) = generate_session(&cfg).unwrap();
        let fs = s.neural.fs;
        let w = cfg.cardiac.qrs_width_ms / 1000.0;
        for (i, row) in s.neural.data.outer_iter().enumerate() {
            let t = i as f64 / fs;
            let near = gt.r_peaks.iter().any(|&r| t >= r - w && t <= r + 2.0 * w);
            if !near {
                assert!(row.iter().all(|&v| v == 0.0));
            } else {
                let k = row[0] / gt.cardiac_gains[0];
                for (c, &v) in row.iter().enumerate() {
                    assert!((v - k * gt.cardiac_gains[c]).abs() < 1e-9);
                }
            }
        }
        let rpk = (gt.r_peaks[3] * fs).round() as usize;
        assert!(s.neural.data[[rpk, 0]].abs() > 5.0);
    }

    #[test]
    fn same_seed_same_session() {
        let cfg = small(Task::VisuallyGuided);
        let (a, ga) = generate_session(&cfg).unwrap();
        let (b, gb) = generate_session(&cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ga, gb);
        let (c, _) = generate_session(&GenConfig { seed: 7, ..cfg }).unwrap();
        assert_ne!(a.neural.data, c.neural.data);
    }

    #[test]
    fn shared_subject_seed_shares_mixing() {
        let cfg = GenConfig { subject_seed: Some(99), ..small(Task::FreeViewing) };
        let (_, ga) = generate_session(&cfg).unwrap();
        let (_, gb) = generate_session(&GenConfig { seed: 8, ..cfg.clone() }).unwrap();
        assert_eq!(ga.mixing, gb.mixing);
        assert_eq!(ga.cardiac_gains, gb.cardiac_gains);
        let (_, gc) = generate_session(&GenConfig { subject_seed: None, ..cfg }).unwrap();
        assert_ne!(ga.mixing, gc.mixing);
    }

    #[test]
    fn amplitude_change_keeps_layout_and_noise() {
        let cfg = small(Task::FreeViewing);
        let (a, ga) = generate_session(&cfg).unwrap();
        let (b, gb) = generate_session(&GenConfig { erp_amplitude_uv: 0.0, ..cfg.clone() }).unwrap();
        assert_eq!(ga.saccades, gb.saccades);
        assert_eq!(a.markers, b.markers);
        let i = (ga.saccades[0].onset * cfg.fs_neural) as usize - 200;
        assert_eq!(a.neural.data.row(i), b.neural.data.row(i));
    }

    #[test]
    fn free_viewing_event_count_matches_markers() {
        let cfg = GenConfig { n_trials_per_direction: 12, fs_neural: 250.0, ..GenConfig::default() };
        let (s, gt) = generate_session(&cfg).unwrap();
        // independent count from the planned layout
        let planned = 2 * (0..cfg.n_runs).map(|r| cfg.trials_in_run(r)).sum::<usize>();
        assert_eq!(planned, 96);
        assert_eq!(gt.saccades.len(), 96);
        assert_eq!(gt.initial_onsets().count(), 48);
        let onsets: Vec<&EventMarker> = s.markers_of(EventKind::SaccadeOnset).collect();
        assert_eq!(onsets.len(), 96);
        for (m, p) in onsets.iter().zip(&gt.saccades) {
            assert_eq!(m.time, p.onset);
            assert_eq!(m.direction, Some(p.direction));
            assert_eq!(m.role, Some(p.role));
        }
        for d in Direction::ALL {
            assert_eq!(gt.initial_onsets().filter(|p| p.direction == d).count(), 12);
        }
    }

    #[test]
    fn pseudo_inverse_recovers_sources() {
        let cfg = GenConfig { background_uv: 3.0, ..small(Task::VisuallyGuided).noiseless() };
        let (s, gt) = generate_session(&cfg).unwrap();
        let p = pinv(gt.mixing_matrix().view()).unwrap();
        let rec = s.neural.data.dot(&p.t());
        let err: f64 = (&rec - &gt.sources).iter().map(|v| v * v).sum::<f64>().sqrt();
        let norm: f64 = gt.sources.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!(err / norm < 1e-6, "relative error {}", err / norm);
    }

    #[test]
    fn wait_times_truncated_and_centred() {
        let cfg = GenConfig {
            task: Task::VisuallyGuided,
            n_trials_per_direction: 60,
            fs_neural: 100.0,
            ..GenConfig::default().noiseless()
        };
        let (_, gt) = generate_session(&cfg).unwrap();
        let w = &gt.wait_times;
        assert_eq!(w.len(), 240);
        assert!(w.iter().all(|&v| (0.414..=0.935).contains(&v)));
        let m = w.iter().sum::<f64>() / w.len() as f64;
        let sd = (w.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (w.len() - 1) as f64).sqrt();
        assert!((m - 0.626).abs() < 3.0 * sd / (w.len() as f64).sqrt(), "mean {m}");
    }

    #[test]
    fn gaze_moves_soon_after_onsets() {
        let (s, gt) = generate_session(&small(Task::FreeViewing)).unwrap();
        let g = &s.gaze;
        for p in &gt.saccades {
            let start = match p.role {
                SaccadeRole::Initial => [0.0, 0.0],
                SaccadeRole::Back => {
                    let u = p.direction.complement().unit();
                    [8.5 * u[0], 8.5 * u[1]]
                }
            };
            let ok = g.timestamps.iter().zip(&g.positions).any(|(&t, q)| {
                t >= p.onset && t <= p.onset + 0.04 && ((q[0] - start[0]).hypot(q[1] - start[1])) > 0.5 * 8.5
            });
            assert!(ok, "no movement after {}", p.onset);
        }
    }

    #[test]
    fn too_short_duration_names_minimum() {
        let cfg = GenConfig { duration_s: Some(30.0), ..small(Task::FreeViewing) };
        let need = cfg.required_duration_s();
        let err = generate_session(&cfg).unwrap_err().to_string();
        assert!(err.contains(&format!("{need:.3}")), "{err}");
        let ok = GenConfig { duration_s: Some(need), ..cfg };
        let (s, _) = generate_session(&ok).unwrap();
        assert!((s.duration() - need).abs() < 1.0 / ok.fs_neural);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = small(Task::FreeViewing);
        let bad = [
            GenConfig { fs_neural: 0.0, ..base.clone() },
            GenConfig { erp_amplitude_uv: -1.0, ..base.clone() },
            GenConfig { n_runs: 2, ..base.clone() },
            GenConfig { n_channels: 4, ..base.clone() },
            GenConfig { wait_time: WaitTimeConfig { mean_s: 1.0, ..WaitTimeConfig::default() }, ..base.clone() },
            GenConfig { mixing: Some(vec![vec![1.0; 5]; 13]), ..base.clone() },
        ];
        for cfg in bad {
            assert!(matches!(generate_session(&cfg), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn blinks_leave_gaze_gaps() {
        let cfg = GenConfig { blink_prob: 1.0, ..small(Task::FreeViewing) };
        let (s, gt) = generate_session(&cfg).unwrap();
        let first = gt.initial_onsets().next().unwrap();
        assert!(first.blinked);
        let g = &s.gaze;
        let gap = g.timestamps.windows(2).any(|w| w[0] < first.onset && w[1] > first.onset && w[1] - w[0] > 0.3);
        assert!(gap);
    }
}
