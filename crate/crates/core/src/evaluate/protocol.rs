use std::fmt;
use std::str::FromStr;

use log::warn;
use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{auc_from_proba, make_loro, wait_time_stats, WaitTimeStats};
use crate::artifacts::{detect_r_peaks, ts_car, DEFAULT_WINDOW_MS};
use crate::classify::{self, grid_search, ClassifierSpec, GridResult, TrainedModel};
use crate::decompose::{apply_to_epochs, xdawn_fit, UnmixingModel};
use crate::epoching::{
    annotate, detect_saccade_onsets, extract_epochs, extract_fixation_epochs, fixation_intervals, label_trials,
    EpochConfig, Geometry, LabelledEvent, SaccadeEvent,
};
use crate::features::{feature_matrix, raw_features, FeatureMatrix, FeatureSet, MinMaxScaler};
use crate::model::{run_of, Direction, Epoch, LabelRole, NeuralSignal, Session, Task};
use crate::preprocess::{apply_filter, resample, FirSpec};
use crate::{Error, Result};

/// Signal chain applied to every run before epoching: high-pass, notch,
/// cardiac TS-CAR, then downsampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChainConfig {
    pub highpass_hz: Option<f64>,
    pub notch_hz: Option<f64>,
    pub cardiac: bool,
    pub ts_car_window_ms: f64,
    pub target_fs: Option<f64>,
}

impl Default for ChainConfig {
    fn default() -> Self {
        ChainConfig {
            highpass_hz: Some(0.5),
            notch_hz: Some(50.0),
            cardiac: true,
            ts_car_window_ms: DEFAULT_WINDOW_MS,
            target_fs: Some(64.0),
        }
    }
}

pub fn run_chain(signal: &NeuralSignal, cfg: &ChainConfig) -> Result<NeuralSignal> {
    let mut s = signal.clone();
    if let Some(hp) = cfg.highpass_hz {
        s = apply_filter(&s, &FirSpec::highpass(hp)).map_err(|e| e.context("high-pass"))?;
    }
    if let Some(notch) = cfg.notch_hz {
        s = apply_filter(&s, &FirSpec::notch(notch)).map_err(|e| e.context("notch"))?;
    }
    if cfg.cardiac {
        let peaks = detect_r_peaks(&s).map_err(|e| e.context("r-peak detection"))?;
        s = ts_car(&s, &peaks, cfg.ts_car_window_ms).map_err(|e| e.context("ts-car"))?;
    }
    if let Some(fs) = cfg.target_fs {
        if (fs - s.fs).abs() > 1e-9 {
            s = resample(&s, fs).map_err(|e| e.context("downsample"))?;
        }
    }
    Ok(s)
}

/// Analysis window relative to saccade onset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interval {
    /// [-500, 500) ms
    Full,
    /// [-250, 250) ms
    PrePost,
    /// [-500, 0) ms
    Pre,
    /// [0, 500) ms
    Post,
}

impl Interval {
    pub const TABLE: [Interval; 3] = [Interval::PrePost, Interval::Pre, Interval::Post];

    pub fn window(self) -> EpochConfig {
        let w = match self {
            Interval::Full => [-0.5, 0.5],
            Interval::PrePost => [-0.25, 0.25],
            Interval::Pre => [-0.5, 0.0],
            Interval::Post => [0.0, 0.5],
        };
        EpochConfig { window: w }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Interval::Full => "full",
            Interval::PrePost => "pre_post",
            Interval::Pre => "pre",
            Interval::Post => "post",
        }
    }
}

impl FromStr for Interval {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Interval::Full),
            "pre_post" | "pre+post" => Ok(Interval::PrePost),
            "pre" => Ok(Interval::Pre),
            "post" => Ok(Interval::Post),
            other => Err(Error::InvalidConfig(format!("unknown interval '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Comparison {
    /// Fixation versus saccade.
    Onset,
    FourClass,
    Pairwise(Direction, Direction),
}

impl Comparison {
    /// Onset, 4-class, then the six direction pairs.
    pub fn all() -> Vec<Comparison> {
        let mut v = vec![Comparison::Onset, Comparison::FourClass];
        for (i, &a) in Direction::ALL.iter().enumerate() {
            for &b in &Direction::ALL[i + 1..] {
                v.push(Comparison::Pairwise(a, b));
            }
        }
        v
    }

    pub fn is_direction(self) -> bool {
        self != Comparison::Onset
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Comparison::Onset => write!(f, "onset"),
            Comparison::FourClass => write!(f, "4class"),
            Comparison::Pairwise(a, b) => write!(f, "{a}_vs_{b}"),
        }
    }
}

impl From<Comparison> for String {
    fn from(c: Comparison) -> String {
        c.to_string()
    }
}

impl FromStr for Comparison {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "onset" => Ok(Comparison::Onset),
            "4class" => Ok(Comparison::FourClass),
            _ => {
                let (a, b) = s
                    .split_once("_vs_")
                    .ok_or_else(|| Error::InvalidConfig(format!("unknown comparison '{s}'")))?;
                let (a, b): (Direction, Direction) = (a.parse()?, b.parse()?);
                if a == b {
                    return Err(Error::InvalidConfig(format!("comparison '{s}' pairs a direction with itself")));
                }
                Ok(Comparison::Pairwise(a, b))
            }
        }
    }
}

impl TryFrom<String> for Comparison {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    /// Leave-one-run-out inside each session.
    Within,
    /// Train on every other session, test on one.
    Cross,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Within => "within",
            Protocol::Cross => "cross",
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "within" => Ok(Protocol::Within),
            "cross" => Ok(Protocol::Cross),
            other => Err(Error::InvalidConfig(format!("unknown protocol '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProtocolConfig {
    pub chain: ChainConfig,
    pub geometry: Geometry,
    pub intervals: Vec<Interval>,
    pub roles: Vec<LabelRole>,
    pub comparisons: Vec<Comparison>,
    pub xdawn_components: usize,
    pub classifier: ClassifierSpec,
    /// When set, each training set picks its classifier by inner
    /// leave-one-run-out grid search.
    pub grid: Option<Vec<ClassifierSpec>>,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            chain: ChainConfig::default(),
            geometry: Geometry::default(),
            intervals: Interval::TABLE.to_vec(),
            roles: LabelRole::ALL.to_vec(),
            comparisons: Comparison::all(),
            xdawn_components: 2,
            classifier: ClassifierSpec::random_forest(100, None, 0),
            grid: None,
        }
    }
}

/// One run after the signal chain. Times inside `signal` are relative to
/// `t_start` (session seconds).
#[derive(Debug, Clone)]
pub struct PreparedRun {
    pub run_index: usize,
    pub t_start: f64,
    pub signal: NeuralSignal,
}

#[derive(Debug, Clone)]
pub struct PreparedSession {
    pub session_id: String,
    pub task: Task,
    pub channel_ids: Vec<String>,
    pub run_bounds: Vec<[f64; 2]>,
    pub runs: Vec<PreparedRun>,
    pub events: Vec<SaccadeEvent>,
    pub fixations: Vec<[f64; 2]>,
}

/// Runs the signal chain on each run separately, so nothing computed for
/// one run depends on samples of another. `keep_runs` restricts the
/// session to a subset of runs.
pub fn prepare_session(session: &Session, cfg: &ProtocolConfig, keep_runs: Option<&[usize]>) -> Result<PreparedSession> {
    let keep = |r: usize| keep_runs.is_none_or(|k| k.contains(&r));
    if session.runs.is_empty() {
        return Err(Error::InvalidInput(format!("session {} has no runs", session.session_id)));
    }
    let fs = session.neural.fs;
    let runs: Vec<PreparedRun> = session
        .runs
        .par_iter()
        .enumerate()
        .filter(|(r, _)| keep(*r))
        .map(|(r, b)| {
            let a = ((b[0] * fs).ceil().max(0.0) as usize).min(session.neural.n_samples());
            let z = ((b[1] * fs).floor() as usize + 1).min(session.neural.n_samples());
            let data = session.neural.data.slice(ndarray::s![a..z, ..]).to_owned();
            let signal = run_chain(&session.neural.with_data(data), &cfg.chain)
                .map_err(|e| e.context(format!("session {} run {r}", session.session_id)))?;
            Ok(PreparedRun { run_index: r, t_start: a as f64 / fs, signal })
        })
        .collect::<Result<_>>()?;
    let mut events = detect_saccade_onsets(&session.gaze, &cfg.geometry);
    annotate(&mut events, session);
    events.retain(|e| e.run_index.is_some_and(keep));
    let fixations = fixation_intervals(session)
        .into_iter()
        .filter(|iv| run_of(&session.runs, 0.5 * (iv[0] + iv[1])).is_some_and(keep))
        .collect();
    Ok(PreparedSession {
        session_id: session.session_id.clone(),
        task: session.task,
        channel_ids: session.neural.channel_ids.clone(),
        run_bounds: session.runs.clone(),
        runs,
        events,
        fixations,
    })
}

impl PreparedSession {
    pub fn run_indices(&self) -> Vec<usize> {
        self.runs.iter().map(|r| r.run_index).collect()
    }

    /// Saccade epochs of `role` and an equal number of fixation epochs per run.
    pub fn epochs(&self, role: LabelRole, interval: Interval) -> Result<EpochBundle> {
        self.epochs_window(role, &interval.window())
    }

    pub fn epochs_window(&self, role: LabelRole, cfg: &EpochConfig) -> Result<EpochBundle> {
        let cfg = *cfg;
        let labelled = label_trials(&self.events, self.task, role);
        let mut saccades = Vec::new();
        let mut fixations = Vec::new();
        for run in &self.runs {
            let shifted: Vec<LabelledEvent> = labelled
                .iter()
                .filter(|l| l.label.run_index == run.run_index)
                .map(|l| LabelledEvent { time: l.time - run.t_start, label: l.label.clone() })
                .collect();
            let set = extract_epochs(&run.signal, &shifted, &cfg, &[]);
            let n = set.epochs.len();
            saccades.extend(set.epochs.into_iter().map(|mut e| {
                e.label.run_index = run.run_index;
                e
            }));
            let bounds = self.run_bounds[run.run_index];
            let ivs: Vec<[f64; 2]> = self
                .fixations
                .iter()
                .filter(|iv| iv[0] >= bounds[0] - 1e-9 && iv[1] <= bounds[1] + 1e-9)
                .map(|iv| [iv[0] - run.t_start, iv[1] - run.t_start])
                .collect();
            if n == 0 {
                continue;
            }
            if ivs.is_empty() {
                warn!("{}: run {} has no fixation interval", self.session_id, run.run_index);
                continue;
            }
            let fix = extract_fixation_epochs(&run.signal, &ivs, n, &cfg, &[])
                .map_err(|e| e.context(format!("{} run {} fixation epochs", self.session_id, run.run_index)))?;
            if fix.epochs.len() < n {
                warn!("{}: run {} yielded {} of {n} fixation epochs", self.session_id, run.run_index, fix.epochs.len());
            }
            fixations.extend(fix.epochs.into_iter().map(|mut e| {
                e.label.run_index = run.run_index;
                e
            }));
        }
        Ok(EpochBundle { saccades, fixations })
    }
}

#[derive(Debug, Clone, Default)]
pub struct EpochBundle {
    pub saccades: Vec<Epoch>,
    pub fixations: Vec<Epoch>,
}

/// Epochs and integer labels for one comparison: onset uses 1 for saccade
/// and 0 for fixation, direction comparisons use the direction index.
pub fn comparison_data(
    bundle: &EpochBundle,
    comparison: Comparison,
    keep_run: impl Fn(usize) -> bool,
) -> (Vec<&Epoch>, Vec<usize>) {
    let mut epochs = Vec::new();
    let mut y = Vec::new();
    let sacc = bundle.saccades.iter().filter(|e| keep_run(e.label.run_index));
    match comparison {
        Comparison::Onset => {
            for e in sacc {
                epochs.push(e);
                y.push(1);
            }
            for e in bundle.fixations.iter().filter(|e| keep_run(e.label.run_index)) {
                epochs.push(e);
                y.push(0);
            }
        }
        Comparison::FourClass => {
            for e in sacc {
                if let Some(d) = e.label.direction {
                    epochs.push(e);
                    y.push(d.index());
                }
            }
        }
        Comparison::Pairwise(a, b) => {
            for e in sacc {
                if let Some(d) = e.label.direction.filter(|d| *d == a || *d == b) {
                    epochs.push(e);
                    y.push(d.index());
                }
            }
        }
    }
    (epochs, y)
}

/// Everything fitted on a training set: xDAWN (onset only), the scaler and
/// the classifier.
#[derive(Debug, Clone, Serialize)]
pub struct FittedFold {
    pub xdawn: Option<UnmixingModel>,
    pub scaler: MinMaxScaler,
    pub model: TrainedModel,
    /// Inner grid-search table, when a grid was configured.
    pub grid: Option<GridResult>,
}

fn component_ids(k: usize) -> Vec<String> {
    (0..k).map(|i| format!("xdawn{i}")).collect()
}

fn raw_feature_matrix(xdawn: Option<&UnmixingModel>, epochs: &[Epoch], channel_ids: &[String]) -> Result<FeatureMatrix> {
    match xdawn {
        Some(m) => {
            let comps = apply_to_epochs(m, epochs);
            feature_matrix(&comps, &component_ids(m.n_components()), FeatureSet::ALL)
        }
        None => raw_features(epochs, channel_ids),
    }
}

impl FittedFold {
    pub fn features(&self, epochs: &[Epoch], channel_ids: &[String]) -> Result<FeatureMatrix> {
        let x = raw_feature_matrix(self.xdawn.as_ref(), epochs, channel_ids)?;
        self.scaler.transform(&x)
    }

    pub fn predict_proba(&self, epochs: &[Epoch], channel_ids: &[String]) -> Result<Array2<f64>> {
        classify::predict_proba(&self.model, &self.features(epochs, channel_ids)?)
    }
}

/// Fits the decoding chain for `comparison` on training epochs only.
/// `groups` holds one run key per epoch and drives the optional inner grid
/// search.
pub fn fit_fold(
    epochs: &[Epoch],
    y: &[usize],
    groups: &[usize],
    comparison: Comparison,
    cfg: &ProtocolConfig,
    channel_ids: &[String],
) -> Result<FittedFold> {
    let xdawn = if comparison == Comparison::Onset {
        let target: Vec<bool> = y.iter().map(|&v| v == 1).collect();
        Some(xdawn_fit(epochs, &target, cfg.xdawn_components, channel_ids).map_err(|e| e.context("xdawn"))?)
    } else {
        None
    };
    let x = raw_feature_matrix(xdawn.as_ref(), epochs, channel_ids)?;
    let scaler = MinMaxScaler::fit(&x, None)?;
    let xs = scaler.transform(&x)?;
    let mut spec = cfg.classifier.clone();
    let mut table = None;
    if let Some(grid) = cfg.grid.as_ref().filter(|g| !g.is_empty()) {
        match make_loro(groups).and_then(|cv| grid_search(grid, &xs, y, groups, &cv)) {
            Ok(r) => {
                spec = r.best.clone();
                table = Some(r);
            }
            Err(e) => warn!("grid search skipped: {e}"),
        }
    }
    let model = classify::train(&spec, &xs, y)?;
    Ok(FittedFold { xdawn, scaler, model, grid: table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: Task,
    pub protocol: Protocol,
    /// Session the scores come from.
    pub test_set: String,
    pub role: LabelRole,
    pub comparison: Comparison,
    pub interval: Interval,
    /// Unweighted mean over the folds that could be scored.
    pub mean_auc: Option<f64>,
    pub fold_labels: Vec<String>,
    /// `None` marks a fold skipped for a missing class.
    pub fold_aucs: Vec<Option<f64>>,
    pub n_train: Vec<usize>,
    pub n_test: Vec<usize>,
    /// Trials in the test set(s) per class label.
    pub class_counts: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionWaitTimes {
    pub session_id: String,
    pub stats: WaitTimeStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ReportRow>,
    pub wait_times: Vec<SessionWaitTimes>,
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |a| format!("{a:.6}"))
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "task,protocol,test_set,role,comparison,interval,mean_auc,n_folds,fold_aucs,n_train,n_test";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.rows {
            let join = |v: Vec<String>| v.join(";");
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.task.as_str(),
                r.protocol.as_str(),
                r.test_set,
                r.role.as_str(),
                r.comparison,
                r.interval.as_str(),
                fmt_auc(r.mean_auc),
                r.fold_aucs.iter().flatten().count(),
                join(r.fold_aucs.iter().map(|a| fmt_auc(*a)).collect()),
                join(r.n_train.iter().map(|n| n.to_string()).collect()),
                join(r.n_test.iter().map(|n| n.to_string()).collect()),
            ));
        }
        s
    }

    pub fn rows_where(&self, protocol: Protocol, comparison: Comparison) -> impl Iterator<Item = &ReportRow> {
        self.rows.iter().filter(move |r| r.protocol == protocol && r.comparison == comparison)
    }
}

struct RowSpec {
    protocol: Protocol,
    test_session: usize,
    role: usize,
    interval: usize,
    comparison: Comparison,
    folds: Vec<FoldSpec>,
}

#[derive(Clone)]
struct FoldSpec {
    label: String,
    /// (session, run) pairs used for training.
    train: Vec<(usize, usize)>,
    test: Vec<(usize, usize)>,
}

struct FoldOutcome {
    auc: Option<f64>,
    n_train: usize,
    n_test: usize,
    counts: Vec<(usize, usize)>,
}

type Bundles = Vec<Vec<Vec<EpochBundle>>>;

fn gather(
    bundles: &Bundles,
    role: usize,
    interval: usize,
    parts: &[(usize, usize)],
    comparison: Comparison,
) -> (Vec<Epoch>, Vec<usize>, Vec<usize>) {
    let mut epochs = Vec::new();
    let mut y = Vec::new();
    let mut groups = Vec::new();
    let mut sessions: Vec<usize> = parts.iter().map(|p| p.0).collect();
    sessions.dedup();
    for s in sessions {
        let runs: Vec<usize> = parts.iter().filter(|p| p.0 == s).map(|p| p.1).collect();
        let (e, l) = comparison_data(&bundles[s][role][interval], comparison, |r| runs.contains(&r));
        for (ep, lab) in e.into_iter().zip(l) {
            groups.push(s * 10_000 + ep.label.run_index);
            epochs.push(ep.clone());
            y.push(lab);
        }
    }
    (epochs, y, groups)
}

fn class_counts(y: &[usize]) -> Vec<(usize, usize)> {
    let mut c: Vec<(usize, usize)> = Vec::new();
    for &v in y {
        match c.iter_mut().find(|p| p.0 == v) {
            Some(p) => p.1 += 1,
            None => c.push((v, 1)),
        }
    }
    c.sort_unstable();
    c
}

fn run_fold(
    bundles: &Bundles,
    row: &RowSpec,
    fold: &FoldSpec,
    cfg: &ProtocolConfig,
    channel_ids: &[String],
) -> Result<FoldOutcome> {
    let (tr, ytr, gtr) = gather(bundles, row.role, row.interval, &fold.train, row.comparison);
    let (te, yte, _) = gather(bundles, row.role, row.interval, &fold.test, row.comparison);
    let counts = class_counts(&yte);
    let train_counts = class_counts(&ytr);
    let outcome = |auc| FoldOutcome { auc, n_train: ytr.len(), n_test: yte.len(), counts: counts.clone() };
    let needed = match row.comparison {
        Comparison::FourClass => 4,
        _ => 2,
    };
    if counts.len() < needed || train_counts.len() < needed || train_counts.iter().any(|c| c.1 < 2) {
        warn!(
            "{} {} {}: fold {} skipped, a class is missing (train {:?}, test {:?})",
            row.protocol.as_str(),
            row.comparison,
            cfg.intervals[row.interval].as_str(),
            fold.label,
            train_counts,
            counts
        );
        return Ok(outcome(None));
    }
    let fitted = fit_fold(&tr, &ytr, &gtr, row.comparison, cfg, channel_ids)?;
    let proba = fitted.predict_proba(&te, channel_ids)?;
    let auc = auc_from_proba(proba.view(), &fitted.model.classes, &yte)?;
    Ok(outcome(Some(auc)))
}

/// Prepares every session, then evaluates each requested protocol.
pub fn run_protocol(sessions: &[Session], cfg: &ProtocolConfig, protocols: &[Protocol]) -> Result<EvalReport> {
    let prepared = sessions
        .par_iter()
        .map(|s| prepare_session(s, cfg, None))
        .collect::<Result<Vec<_>>>()?;
    evaluate_prepared(&prepared, cfg, protocols)
}

pub fn evaluate_prepared(prepared: &[PreparedSession], cfg: &ProtocolConfig, protocols: &[Protocol]) -> Result<EvalReport> {
    cfg.classifier.validate()?;
    let first = prepared.first().ok_or_else(|| Error::InvalidInput("no sessions to evaluate".into()))?;
    let channel_ids = first.channel_ids.clone();
    if let Some(p) = prepared.iter().find(|p| p.channel_ids != channel_ids) {
        return Err(Error::ChannelMismatch(format!("session {} has different channels", p.session_id)));
    }
    for &protocol in protocols {
        match protocol {
            Protocol::Within => {
                if let Some(p) = prepared.iter().find(|p| p.runs.len() < 2) {
                    return Err(Error::InvalidInput(format!(
                        "within-session protocol needs >= 2 runs, session {} has {}",
                        p.session_id,
                        p.runs.len()
                    )));
                }
            }
            Protocol::Cross if prepared.len() < 2 => {
                return Err(Error::InvalidInput("cross-session protocol needs >= 2 sessions".into()));
            }
            Protocol::Cross => {}
        }
    }

    let pairs: Vec<(usize, usize, usize)> = (0..prepared.len())
        .flat_map(|s| (0..cfg.roles.len()).flat_map(move |r| (0..cfg.intervals.len()).map(move |i| (s, r, i))))
        .collect();
    let flat: Vec<EpochBundle> = pairs
        .par_iter()
        .map(|&(s, r, i)| prepared[s].epochs(cfg.roles[r], cfg.intervals[i]))
        .collect::<Result<_>>()?;
    let mut bundles: Bundles = vec![vec![vec![EpochBundle::default(); cfg.intervals.len()]; cfg.roles.len()]; prepared.len()];
    for (&(s, r, i), b) in pairs.iter().zip(flat) {
        bundles[s][r][i] = b;
    }

    let all_parts = |s: usize| -> Vec<(usize, usize)> { prepared[s].run_indices().into_iter().map(|r| (s, r)).collect() };
    let mut rows = Vec::new();
    for &protocol in protocols {
        for s in 0..prepared.len() {
            let folds: Vec<FoldSpec> = match protocol {
                Protocol::Within => prepared[s]
                    .run_indices()
                    .into_iter()
                    .map(|test| FoldSpec {
                        label: format!("run{test}"),
                        train: all_parts(s).into_iter().filter(|p| p.1 != test).collect(),
                        test: vec![(s, test)],
                    })
                    .collect(),
                Protocol::Cross => {
                    let others: Vec<usize> = (0..prepared.len()).filter(|&o| o != s).collect();
                    let names: Vec<&str> = others.iter().map(|&o| prepared[o].session_id.as_str()).collect();
                    vec![FoldSpec {
                        label: format!("train:{}", names.join("+")),
                        train: others.iter().flat_map(|&o| all_parts(o)).collect(),
                        test: all_parts(s),
                    }]
                }
            };
            for role in 0..cfg.roles.len() {
                for &comparison in &cfg.comparisons {
                    for interval in 0..cfg.intervals.len() {
                        rows.push(RowSpec { protocol, test_session: s, role, interval, comparison, folds: folds.clone() });
                    }
                }
            }
        }
    }

    let jobs: Vec<(usize, usize)> = rows.iter().enumerate().flat_map(|(r, row)| (0..row.folds.len()).map(move |f| (r, f))).collect();
    let outcomes: Vec<FoldOutcome> = jobs
        .par_iter()
        .map(|&(r, f)| {
            let row = &rows[r];
            run_fold(&bundles, row, &row.folds[f], cfg, &channel_ids).map_err(|e| {
                e.context(format!(
                    "{} {} {} {} {} fold {}",
                    row.protocol.as_str(),
                    prepared[row.test_session].session_id,
                    cfg.roles[row.role].as_str(),
                    row.comparison,
                    cfg.intervals[row.interval].as_str(),
                    row.folds[f].label
                ))
            })
        })
        .collect::<Result<_>>()?;

    let mut report_rows = Vec::with_capacity(rows.len());
    let mut it = outcomes.into_iter();
    for row in &rows {
        let outs: Vec<FoldOutcome> = it.by_ref().take(row.folds.len()).collect();
        let scored: Vec<f64> = outs.iter().filter_map(|o| o.auc).collect();
        let mean_auc = (!scored.is_empty()).then(|| scored.iter().sum::<f64>() / scored.len() as f64);
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for o in &outs {
            for &(c, n) in &o.counts {
                match counts.iter_mut().find(|p| p.0 == c) {
                    Some(p) => p.1 += n,
                    None => counts.push((c, n)),
                }
            }
        }
        counts.sort_unstable();
        report_rows.push(ReportRow {
            task: prepared[row.test_session].task,
            protocol: row.protocol,
            test_set: prepared[row.test_session].session_id.clone(),
            role: cfg.roles[row.role],
            comparison: row.comparison,
            interval: cfg.intervals[row.interval],
            mean_auc,
            fold_labels: row.folds.iter().map(|f| f.label.clone()).collect(),
            fold_aucs: outs.iter().map(|o| o.auc).collect(),
            n_train: outs.iter().map(|o| o.n_train).collect(),
            n_test: outs.iter().map(|o| o.n_test).collect(),
            class_counts: counts,
        });
    }

    let wait_times = prepared
        .iter()
        .filter(|p| p.task == Task::VisuallyGuided)
        .filter_map(|p| {
            let waits: Vec<f64> = p.events.iter().filter_map(|e| e.wait_time_s).collect();
            wait_time_stats(&waits).ok().map(|stats| SessionWaitTimes { session_id: p.session_id.clone(), stats })
        })
        .collect();
    Ok(EvalReport { rows: report_rows, wait_times })
}
