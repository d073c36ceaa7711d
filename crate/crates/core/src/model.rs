//! Session, epoch and label data model shared by every processing stage.
//!
//! Units are fixed across the crate: microvolts for neural data, seconds for
//! time, Hz for rates, centimetres from the screen centre for gaze.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Left,
    Right,
    Up,
    Down,
}

impl Direction {
    pub const ALL: [Direction; 4] = [Direction::Left, Direction::Right, Direction::Up, Direction::Down];

    /// Direction of the return movement (up/down and left/right swap).
    pub fn complement(self) -> Direction {
        match self {
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }

    /// Unit vector in screen coordinates (x to the right, y upwards).
    pub fn unit(self) -> [f64; 2] {
        match self {
            Direction::Left => [-1.0, 0.0],
            Direction::Right => [1.0, 0.0],
            Direction::Up => [0.0, 1.0],
            Direction::Down => [0.0, -1.0],
        }
    }

    /// Dominant-axis direction of a displacement vector.
    pub fn from_displacement(dx: f64, dy: f64) -> Direction {
        if dx.abs() >= dy.abs() {
            if dx >= 0.0 {
                Direction::Right
            } else {
                Direction::Left
            }
        } else if dy >= 0.0 {
            Direction::Up
        } else {
            Direction::Down
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::Left => "left",
            Direction::Right => "right",
            Direction::Up => "up",
            Direction::Down => "down",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "left" => Ok(Direction::Left),
            "right" => Ok(Direction::Right),
            "up" => Ok(Direction::Up),
            "down" => Ok(Direction::Down),
            other => Err(Error::InvalidInput(format!("unknown direction '{other}'"))),
        }
    }
}

/// Role of a single saccade inside a bidirectional trial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SaccadeRole {
    Initial,
    Back,
}

impl SaccadeRole {
    pub fn as_str(self) -> &'static str {
        match self {
            SaccadeRole::Initial => "initial",
            SaccadeRole::Back => "back",
        }
    }
}

impl FromStr for SaccadeRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(SaccadeRole::Initial),
            "back" => Ok(SaccadeRole::Back),
            other => Err(Error::InvalidInput(format!("unknown saccade role '{other}'"))),
        }
    }
}

/// Role attached to a trial label; `Combined` pools initial and back saccades.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelRole {
    Initial,
    Back,
    Combined,
}

impl LabelRole {
    pub const ALL: [LabelRole; 3] = [LabelRole::Initial, LabelRole::Back, LabelRole::Combined];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelRole::Initial => "initial",
            LabelRole::Back => "back",
            LabelRole::Combined => "combined",
        }
    }

    pub fn includes(self, role: SaccadeRole) -> bool {
        match self {
            LabelRole::Initial => role == SaccadeRole::Initial,
            LabelRole::Back => role == SaccadeRole::Back,
            LabelRole::Combined => true,
        }
    }
}

impl From<SaccadeRole> for LabelRole {
    fn from(r: SaccadeRole) -> Self {
        match r {
            SaccadeRole::Initial => LabelRole::Initial,
            SaccadeRole::Back => LabelRole::Back,
        }
    }
}

impl fmt::Display for LabelRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelRole {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "initial" => Ok(LabelRole::Initial),
            "back" => Ok(LabelRole::Back),
            "combined" => Ok(LabelRole::Combined),
            other => Err(Error::InvalidInput(format!("unknown label role '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    VisuallyGuided,
    FreeViewing,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::VisuallyGuided => "visually_guided",
            Task::FreeViewing => "free_viewing",
        }
    }

    /// Longest allowed bidirectional trial before it is excluded.
    pub fn max_trial_duration_s(self) -> f64 {
        match self {
            Task::VisuallyGuided => 10.0,
            Task::FreeViewing => 6.5,
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "visually_guided" | "vg" => Ok(Task::VisuallyGuided),
            "free_viewing" | "fv" => Ok(Task::FreeViewing),
            other => Err(Error::InvalidInput(format!("unknown task '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    CueOnset,
    SaccadeOnset,
    SaccadeOffset,
    FixationStart,
    FixationEnd,
    RunStart,
    RunEnd,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::CueOnset => "cue_onset",
            EventKind::SaccadeOnset => "saccade_onset",
            EventKind::SaccadeOffset => "saccade_offset",
            EventKind::FixationStart => "fixation_start",
            EventKind::FixationEnd => "fixation_end",
            EventKind::RunStart => "run_start",
            EventKind::RunEnd => "run_end",
        }
    }

    /// Kinds that must carry a direction.
    pub fn has_direction(self) -> bool {
        matches!(self, EventKind::CueOnset | EventKind::SaccadeOnset | EventKind::SaccadeOffset)
    }
}

impl FromStr for EventKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cue_onset" => EventKind::CueOnset,
            "saccade_onset" => EventKind::SaccadeOnset,
            "saccade_offset" => EventKind::SaccadeOffset,
            "fixation_start" => EventKind::FixationStart,
            "fixation_end" => EventKind::FixationEnd,
            "run_start" => EventKind::RunStart,
            "run_end" => EventKind::RunEnd,
            other => return Err(Error::InvalidInput(format!("unknown event kind '{other}'"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventMarker {
    pub time: f64,
    pub kind: EventKind,
    pub direction: Option<Direction>,
    pub role: Option<SaccadeRole>,
}

impl EventMarker {
    pub fn new(time: f64, kind: EventKind) -> Self {
        EventMarker { time, kind, direction: None, role: None }
    }

    pub fn with_direction(mut self, d: Direction) -> Self {
        self.direction = Some(d);
        self
    }

    pub fn with_role(mut self, r: SaccadeRole) -> Self {
        self.role = Some(r);
        self
    }
}

/// Multichannel recording, `[n_samples × n_channels]` in microvolts.
#[derive(Clone, Debug, PartialEq)]
pub struct NeuralSignal {
    pub data: Array2<f64>,
    pub fs: f64,
    pub channel_ids: Vec<String>,
}

impl NeuralSignal {
    pub fn new(data: Array2<f64>, fs: f64, channel_ids: Vec<String>) -> Result<Self> {
        let s = NeuralSignal { data, fs, channel_ids };
        let v = s.violations();
        if v.is_empty() {
            Ok(s)
        } else {
            Err(Error::InvalidInput(v.join("; ")))
        }
    }

    /// Signal with generated channel names `ch0..chN-1`.
    pub fn with_default_ids(data: Array2<f64>, fs: f64) -> Result<Self> {
        let ids = default_channel_ids(data.ncols());
        Self::new(data, fs, ids)
    }

    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.data.column(c).to_vec()
    }

    /// Same channels and rate, new samples.
    pub fn with_data(&self, data: Array2<f64>) -> NeuralSignal {
        NeuralSignal { data, fs: self.fs, channel_ids: self.channel_ids.clone() }
    }

    /// Index of the sample nearest to time `t` (seconds from recording start).
    pub fn sample_index(&self, t: f64) -> isize {
        (t * self.fs).round() as isize
    }

    /// Drops the named channels. Unknown names are an error.
    pub fn exclude_channels(&self, names: &[String]) -> Result<NeuralSignal> {
        for n in names {
            if !self.channel_ids.contains(n) {
                return Err(Error::ChannelMismatch(format!("cannot exclude unknown channel '{n}'")));
            }
        }
        let keep: Vec<usize> =
            (0..self.n_channels()).filter(|&c| !names.contains(&self.channel_ids[c])).collect();
        if keep.is_empty() {
            return Err(Error::InvalidInput("channel exclusion removes every channel".into()));
        }
        let data = self.data.select(Axis(1), &keep);
        let ids = keep.iter().map(|&c| self.channel_ids[c].clone()).collect();
        Ok(NeuralSignal { data, fs: self.fs, channel_ids: ids })
    }

    fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if !(self.fs > 0.0) || !self.fs.is_finite() {
            out.push("neural.fs must be > 0".to_string());
        }
        if self.n_channels() < 1 {
            out.push("neural.n_channels must be >= 1".to_string());
        }
        if self.channel_ids.len() != self.n_channels() {
            out.push("neural.channel_ids length must equal n_channels".to_string());
        }
        let unique: HashSet<&String> = self.channel_ids.iter().collect();
        if unique.len() != self.channel_ids.len() {
            out.push("neural.channel_ids must be unique".to_string());
        }
        if let Some((row, _)) = self
            .data
            .outer_iter()
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            out.push(format!("neural.data must be finite (first bad row {row})"));
        }
        out
    }
}

pub fn default_channel_ids(n: usize) -> Vec<String> {
    (0..n).map(|c| format!("ch{c}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct GazeTrack {
    pub timestamps: Vec<f64>,
    /// `(x, y)` in cm relative to the screen centre.
    pub positions: Vec<[f64; 2]>,
    pub fs_nominal: f64,
}

impl GazeTrack {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    /// Removes samples whose timestamp does not advance past the previous one.
    pub fn dedup(&self) -> GazeTrack {
        let mut ts = Vec::with_capacity(self.len());
        let mut pos = Vec::with_capacity(self.len());
        for (&t, &p) in self.timestamps.iter().zip(&self.positions) {
            if ts.last().is_some_and(|&last| t <= last) {
                continue;
            }
            ts.push(t);
            pos.push(p);
        }
        GazeTrack { timestamps: ts, positions: pos, fs_nominal: self.fs_nominal }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub task: Task,
    pub neural: NeuralSignal,
    pub gaze: GazeTrack,
    pub markers: Vec<EventMarker>,
    /// `[start, end]` in seconds, ordered and non-overlapping.
    pub runs: Vec<[f64; 2]>,
    pub seed: Option<u64>,
}

impl Session {
    pub fn duration(&self) -> f64 {
        self.neural.duration()
    }

    /// Run containing time `t`, if any.
    pub fn run_of(&self, t: f64) -> Option<usize> {
        run_of(&self.runs, t)
    }

    pub fn markers_of(&self, kind: EventKind) -> impl Iterator<Item = &EventMarker> {
        self.markers.iter().filter(move |m| m.kind == kind)
    }
}

pub fn run_of(runs: &[[f64; 2]], t: f64) -> Option<usize> {
    runs.iter().position(|r| t >= r[0] && t < r[1])
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Klass {
    Fixation,
    Saccade,
}

impl Klass {
    pub fn as_str(self) -> &'static str {
        match self {
            Klass::Fixation => "fixation",
            Klass::Saccade => "saccade",
        }
    }
}

impl FromStr for Klass {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixation" => Ok(Klass::Fixation),
            "saccade" => Ok(Klass::Saccade),
            other => Err(Error::InvalidInput(format!("unknown class '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialLabel {
    pub klass: Klass,
    pub direction: Option<Direction>,
    pub role: Option<LabelRole>,
    pub valid: bool,
    pub run_index: usize,
}

impl TrialLabel {
    pub fn fixation(run_index: usize) -> Self {
        TrialLabel { klass: Klass::Fixation, direction: None, role: None, valid: true, run_index }
    }

    pub fn saccade(direction: Direction, role: LabelRole, run_index: usize) -> Self {
        TrialLabel { klass: Klass::Saccade, direction: Some(direction), role: Some(role), valid: true, run_index }
    }
}

/// Fixed-length window time-locked to an event.
#[derive(Clone, Debug, PartialEq)]
pub struct Epoch {
    /// `[n_samples × n_channels]`
    pub data: Array2<f64>,
    /// Position of the event relative to the first sample, in seconds.
    pub t0_offset: f64,
    pub fs: f64,
    pub label: TrialLabel,
}

impl Epoch {
    pub fn n_samples(&self) -> usize {
        self.data.nrows()
    }

    pub fn n_channels(&self) -> usize {
        self.data.ncols()
    }

    pub fn duration(&self) -> f64 {
        self.n_samples() as f64 / self.fs
    }
}

/// Checks every type invariant of a session. Never aborts; an empty list
/// means the session is well formed.
pub fn validate_session(session: &Session) -> Vec<String> {
    let mut out = session.neural.violations();
    let fs_ok = session.neural.fs > 0.0 && session.neural.fs.is_finite();

    let gaze = &session.gaze;
    if !(gaze.fs_nominal > 0.0) {
        out.push("gaze.fs_nominal must be > 0".to_string());
    }
    if gaze.timestamps.len() != gaze.positions.len() {
        out.push("gaze.positions length must equal timestamps length".to_string());
    }
    if gaze.timestamps.windows(2).any(|w| !(w[1] >= w[0])) {
        out.push("gaze.timestamps must be non-decreasing".to_string());
    }
    if gaze.timestamps.iter().any(|t| !t.is_finite()) {
        out.push("gaze.timestamps must be finite".to_string());
    }
    if gaze.positions.iter().any(|p| !p[0].is_finite() || !p[1].is_finite()) {
        out.push("gaze.positions must be finite".to_string());
    }

    let duration = if fs_ok { Some(session.duration()) } else { None };
    for (i, m) in session.markers.iter().enumerate() {
        if let Some(d) = duration {
            if !(m.time >= 0.0 && m.time <= d) {
                out.push(format!("markers[{i}].time must lie within session duration"));
            }
        }
        match (m.kind.has_direction(), m.direction.is_some()) {
            (true, false) => out.push(format!("markers[{i}].direction required for {}", m.kind.as_str())),
            (false, true) => out.push(format!("markers[{i}].direction not allowed for {}", m.kind.as_str())),
            _ => {}
        }
    }

    for (i, r) in session.runs.iter().enumerate() {
        if !(r[0] < r[1]) {
            out.push(format!("runs[{i}] must have start < end"));
        }
        if let Some(d) = duration {
            if r[0] < 0.0 || r[1] > d {
                out.push(format!("runs[{i}] must lie within session duration"));
            }
        }
    }
    let mut overlap = false;
    let mut unordered = false;
    for w in session.runs.windows(2) {
        if w[1][0] < w[0][0] {
            unordered = true;
        } else if w[1][0] < w[0][1] {
            overlap = true;
        }
    }
    if unordered {
        out.push("runs must be ordered".to_string());
    }
    if overlap {
        out.push("runs overlap".to_string());
    }
    out
}
