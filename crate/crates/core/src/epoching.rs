//! Gaze-based saccade detection, trial labelling and epoch extraction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    run_of, Direction, Epoch, EventKind, GazeTrack, LabelRole, NeuralSignal, SaccadeRole, Session, Task, TrialLabel,
};

/// Fraction of the start-to-target distance that marks onset and landing.
pub const DISTANCE_FRACTION: f64 = 0.2;
pub const MIN_SPEED_CM_S: f64 = 10.0;
/// Gaze gaps longer than this inside a saccade invalidate it.
pub const MAX_GAP_S: f64 = 0.2;

/// Nominal target layout: centre plus four targets at `eccentricity_cm`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub eccentricity_cm: f64,
}

impl Default for Geometry {
    fn default() -> Self {
        Geometry { eccentricity_cm: 8.5 }
    }
}

impl Geometry {
    pub fn target(&self, d: Direction) -> [f64; 2] {
        let u = d.unit();
        [u[0] * self.eccentricity_cm, u[1] * self.eccentricity_cm]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaccadeEvent {
    pub onset_s: f64,
    pub offset_s: f64,
    pub direction: Direction,
    pub role: SaccadeRole,
    pub amplitude_cm: f64,
    pub trial_index: usize,
    pub run_index: Option<usize>,
    /// Cue that triggered the trial (visually guided only).
    pub cue_s: Option<f64>,
    pub wait_time_s: Option<f64>,
    /// False when a gaze dropout falls inside the saccade.
    pub valid: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochConfig {
    /// `[t_start, t_end]` seconds relative to the event.
    pub window: [f64; 2],
}

impl Default for EpochConfig {
    fn default() -> Self {
        EpochConfig { window: [-0.5, 0.5] }
    }
}

impl EpochConfig {
    pub fn new(t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start < t_end) || !t_start.is_finite() || !t_end.is_finite() {
            return Err(Error::InvalidConfig(format!("epoch window needs t_start < t_end, got [{t_start}, {t_end}]")));
        }
        Ok(EpochConfig { window: [t_start, t_end] })
    }

    pub fn length_s(&self) -> f64 {
        self.window[1] - self.window[0]
    }

    pub fn n_samples(&self, fs: f64) -> usize {
        (self.length_s() * fs).round() as usize
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Detects saccades between the centre and the four nominal targets. The
/// trigger is the first sample beyond the distance threshold that also
/// exceeds the speed threshold; the reported onset is the interpolated
/// threshold crossing within the preceding sample interval. Trial and run
/// indices are left for [`annotate`] to fill.
pub fn detect_saccade_onsets(gaze: &GazeTrack, geometry: &Geometry) -> Vec<SaccadeEvent> {
    let g = gaze.dedup();
    let (ts, ps) = (&g.timestamps, &g.positions);
    let mut events = Vec::new();
    let mut anchor = [0.0, 0.0];
    let mut at_centre = true;
    let mut trial = 0usize;
    let mut i = 1;
    while i < ts.len() {
        let d_anchor = dist(ps[i], anchor);
        let dt = ts[i] - ts[i - 1];
        let speed = dist(ps[i], ps[i - 1]) / dt;
        if !(d_anchor > DISTANCE_FRACTION * geometry.eccentricity_cm && speed > MIN_SPEED_CM_S) {
            i += 1;
            continue;
        }
        let direction = Direction::from_displacement(ps[i][0] - anchor[0], ps[i][1] - anchor[1]);
        let (role, target) = if at_centre {
            (SaccadeRole::Initial, geometry.target(direction))
        } else {
            (SaccadeRole::Back, [0.0, 0.0])
        };
        let Some(j) = (i..ts.len()).find(|&j| dist(ps[j], target) < DISTANCE_FRACTION * geometry.eccentricity_cm)
        else {
            break;
        };
        let gap = (i..=j).any(|k| ts[k] - ts[k - 1] > MAX_GAP_S);
        if role == SaccadeRole::Initial {
            trial += 1;
        }
        // sub-sample onset: linear interpolation of the distance threshold
        // crossing between the triggering sample and its predecessor
        let thr = DISTANCE_FRACTION * geometry.eccentricity_cm;
        let d_prev = dist(ps[i - 1], anchor);
        let frac = if d_anchor > d_prev { ((thr - d_prev) / (d_anchor - d_prev)).clamp(0.0, 1.0) } else { 1.0 };
        let onset_s = ts[i - 1] + frac * dt;
        events.push(SaccadeEvent {
            onset_s,
            offset_s: ts[j].max(onset_s + 1e-9),
            direction,
            role,
            amplitude_cm: dist(ps[j], anchor),
            trial_index: trial - 1,
            run_index: None,
            cue_s: None,
            wait_time_s: None,
            valid: !gap,
        });
        anchor = target;
        at_centre = !at_centre;
        i = j + 1;
    }
    events
}

/// Assigns run indices and, for visually guided sessions, the triggering
/// cue and wait time of each initial saccade (propagated to its back
/// saccade).
pub fn annotate(events: &mut [SaccadeEvent], session: &Session) {
    let cues: Vec<f64> = session.markers_of(EventKind::CueOnset).map(|m| m.time).collect();
    let mut used = vec![false; cues.len()];
    let mut last_cue: Option<f64> = None;
    for e in events.iter_mut() {
        e.run_index = session.run_of(e.onset_s);
        match e.role {
            SaccadeRole::Initial => {
                let idx = cues.iter().rposition(|&c| c < e.onset_s);
                last_cue = idx.and_then(|k| {
                    let same_run = session.run_of(cues[k]) == e.run_index;
                    (!used[k] && same_run).then(|| {
                        used[k] = true;
                        cues[k]
                    })
                });
                e.cue_s = last_cue;
                e.wait_time_s = last_cue.map(|c| e.onset_s - c);
            }
            SaccadeRole::Back => {
                e.cue_s = last_cue;
            }
        }
    }
}

/// An event time paired with its label.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabelledEvent {
    pub time: f64,
    pub label: TrialLabel,
}

/// Labels saccades for the requested role. Back saccades take the
/// complement of their trial's initial direction; the combined role keeps
/// both saccades of each trial under their own direction. A trial is
/// invalid when any of its saccades is, or when it lasts longer than the
/// task allows.
pub fn label_trials(events: &[SaccadeEvent], task: Task, role: LabelRole) -> Vec<LabelledEvent> {
    let max = task.max_trial_duration_s();
    let mut out = Vec::new();
    let mut i = 0;
    while i < events.len() {
        let e = &events[i];
        if e.role == SaccadeRole::Back {
            // back saccade with no preceding initial: no trial to attach to
            i += 1;
            continue;
        }
        let back = events.get(i + 1).filter(|b| b.role == SaccadeRole::Back && b.trial_index == e.trial_index);
        let start = e.cue_s.unwrap_or(e.onset_s);
        let end = back.map_or(e.offset_s, |b| b.offset_s);
        let valid = e.valid && back.is_none_or(|b| b.valid) && end - start <= max;
        let run = e.run_index.unwrap_or(0);
        if role.includes(SaccadeRole::Initial) {
            let mut label = TrialLabel::saccade(e.direction, if role == LabelRole::Combined { role } else { LabelRole::Initial }, run);
            label.valid = valid;
            out.push(LabelledEvent { time: e.onset_s, label });
        }
        if let Some(b) = back {
            if role.includes(SaccadeRole::Back) {
                let r = if role == LabelRole::Combined { role } else { LabelRole::Back };
                let mut label = TrialLabel::saccade(e.direction.complement(), r, b.run_index.unwrap_or(run));
                label.valid = valid;
                out.push(LabelledEvent { time: b.onset_s, label });
            }
        }
        i += if back.is_some() { 2 } else { 1 };
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochSet {
    pub epochs: Vec<Epoch>,
    /// Valid events dropped for falling outside the signal or across a run boundary.
    pub dropped: usize,
}

/// Cuts one epoch per valid event. `runs` may be empty to skip the
/// run-boundary check.
pub fn extract_epochs(signal: &NeuralSignal, events: &[LabelledEvent], cfg: &EpochConfig, runs: &[[f64; 2]]) -> EpochSet {
    let fs = signal.fs;
    let len = cfg.n_samples(fs);
    let n = signal.n_samples();
    let mut epochs = Vec::new();
    let mut dropped = 0;
    for ev in events.iter().filter(|e| e.label.valid) {
        let start = ((ev.time + cfg.window[0]) * fs).round() as isize;
        let end = start + len as isize;
        let t_first = start as f64 / fs;
        let t_last = (end - 1) as f64 / fs;
        let same_run = runs.is_empty() || {
            let r = run_of(runs, t_first);
            r.is_some() && r == run_of(runs, t_last)
        };
        if start < 0 || end as usize > n || len == 0 || !same_run {
            dropped += 1;
            continue;
        }
        let data = signal.data.slice(ndarray::s![start..end, ..]).to_owned();
        let mut label = ev.label.clone();
        if let Some(r) = run_of(runs, t_first) {
            label.run_index = r;
        }
        epochs.push(Epoch { data, t0_offset: ev.time - t_first, fs, label });
    }
    EpochSet { epochs, dropped }
}

/// Window start times for `n` windows of `len` seconds inside `interval`,
/// spaced by `(total − len)/(n − 1)`; a single window is centred.
pub fn fixation_window_starts(interval: [f64; 2], n: usize, len: f64) -> Vec<f64> {
    let total = interval[1] - interval[0];
    match n {
        0 => Vec::new(),
        1 => vec![interval[0] + (total - len) / 2.0],
        _ => {
            let stride = (total - len) / (n - 1) as f64;
            (0..n).map(|k| interval[0] + k as f64 * stride).collect()
        }
    }
}

/// Distributes `n_needed` windows over `intervals` in proportion to their
/// usable length (largest remainder), returning virtual event times so the
/// windows line up with `cfg`.
pub fn fixation_event_times(intervals: &[[f64; 2]], n_needed: usize, cfg: &EpochConfig) -> Result<Vec<f64>> {
    let len = cfg.length_s();
    let usable: Vec<(usize, f64)> = intervals
        .iter()
        .enumerate()
        .filter(|(_, iv)| iv[1] - iv[0] >= len - 1e-9)
        .map(|(i, iv)| (i, iv[1] - iv[0] - len))
        .collect();
    if usable.is_empty() {
        let total: f64 = intervals.iter().map(|iv| iv[1] - iv[0]).sum();
        return Err(Error::InvalidInput(format!(
            "no fixation interval fits a {len} s epoch (total fixation {total:.3} s)"
        )));
    }
    let mut counts = vec![0usize; usable.len()];
    let weight_sum: f64 = usable.iter().map(|u| u.1).sum();
    if weight_sum <= 0.0 || n_needed <= usable.len() && usable.iter().all(|u| (u.1 - usable[0].1).abs() < 1e-9) {
        for k in 0..n_needed {
            counts[k % usable.len()] += 1;
        }
    } else {
        let quotas: Vec<f64> = usable.iter().map(|u| n_needed as f64 * u.1 / weight_sum).collect();
        for (c, q) in counts.iter_mut().zip(&quotas) {
            *c = q.floor() as usize;
        }
        let mut rest: Vec<usize> = (0..usable.len()).collect();
        rest.sort_by(|&a, &b| (quotas[b] - quotas[b].floor()).total_cmp(&(quotas[a] - quotas[a].floor())).then(a.cmp(&b)));
        let assigned: usize = counts.iter().sum();
        for &k in rest.iter().cycle().take(n_needed - assigned) {
            counts[k] += 1;
        }
    }
    let mut times = Vec::with_capacity(n_needed);
    for ((i, _), &c) in usable.iter().zip(&counts) {
        for s in fixation_window_starts(intervals[*i], c, len) {
            times.push(s - cfg.window[0]);
        }
    }
    times.sort_by(f64::total_cmp);
    Ok(times)
}

/// Fixation epochs: `n_needed` windows spread over the given intervals.
pub fn extract_fixation_epochs(
    signal: &NeuralSignal,
    intervals: &[[f64; 2]],
    n_needed: usize,
    cfg: &EpochConfig,
    runs: &[[f64; 2]],
) -> Result<EpochSet> {
    let times = fixation_event_times(intervals, n_needed, cfg)?;
    let events: Vec<LabelledEvent> = times
        .into_iter()
        .map(|t| LabelledEvent { time: t, label: TrialLabel::fixation(run_of(runs, t).unwrap_or(0)) })
        .collect();
    Ok(extract_epochs(signal, &events, cfg, runs))
}

/// Fixation intervals from paired start/end markers.
pub fn fixation_intervals(session: &Session) -> Vec<[f64; 2]> {
    let mut out = Vec::new();
    let mut open: Option<f64> = None;
    for m in &session.markers {
        match m.kind {
            EventKind::FixationStart => open = Some(m.time),
            EventKind::FixationEnd => {
                if let Some(s) = open.take() {
                    out.push([s, m.time]);
                }
            }
            _ => {}
        }
    }
    out
}
