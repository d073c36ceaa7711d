//! Stage operations shared by the subcommands and the pipeline runner.
//! Parameter structs double as the pipeline's per-stage TOML/JSON tables.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use saccade_core::analysis::{biserial_r2_columns, compute_erp, morlet_spectrogram, r2_spectrum, Baseline, SpectrogramConfig, DEFAULT_SMOOTH_HZ};
use saccade_core::artifacts::{detect_r_peaks, ts_car, RPeakSet, DEFAULT_WINDOW_MS};
use saccade_core::classify::{default_grid, ClassifierKind, ClassifierParams, ClassifierSpec};
use saccade_core::decompose::{apply_to_epochs, apply_unmixing, fastica_fit, xdawn_fit, UnmixingModel};
use saccade_core::epoching::Geometry;
use saccade_core::evaluate::{
    comparison_data, evaluate_prepared, fit_fold, prepare_session, wait_time_stats, ChainConfig, Comparison, EpochBundle,
    EvalReport, FittedFold, Interval, Protocol, ProtocolConfig,
};
use saccade_core::features::{feature_matrix, raw_features, FeatureMatrix, FeatureSet};
use saccade_core::io;
use saccade_core::model::{Epoch, Klass, LabelRole, Session, Task};
use saccade_core::preprocess::{apply_filter, resample, FirSpec};
use saccade_core::synthgen::{generate_session, GenConfig, GroundTruth};

use crate::provenance::{self, Provenance};
use crate::{exit, require_input, svg, Failure};

/// A session plus the signal-chain steps already applied to it.
#[derive(Clone, Debug)]
pub struct Loaded {
    pub session: Session,
    pub steps: Vec<String>,
}

impl Loaded {
    pub fn raw(session: Session) -> Self {
        Loaded { session, steps: Vec::new() }
    }

    fn has_step(&self, name: &str) -> bool {
        self.steps.iter().any(|s| s.split(':').next() == Some(name))
    }
}

pub fn load_session(stage: &str, dir: &Path) -> anyhow::Result<Loaded> {
    require_input(stage, &dir.join("meta.json"))?;
    let session = io::read_session(dir).with_context(|| format!("[{stage}] reading session {}", dir.display()))?;
    Ok(Loaded { session, steps: provenance::steps_of(dir)? })
}

pub fn save_session(dir: &Path, l: &Loaded, prov: &Provenance) -> anyhow::Result<()> {
    io::write_session(&l.session, dir)?;
    provenance::write(dir, &prov.clone().with_steps(l.steps.clone()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthParams {
    pub task: Task,
    pub runs: usize,
    /// Trials per direction over the whole session.
    pub trials_per_direction: usize,
    pub fs: f64,
    pub channels: usize,
    pub erp_amplitude_uv: f64,
    pub direction_depth: f64,
    /// Seeds the channel layout; sessions sharing it look like one subject.
    pub subject_seed: Option<u64>,
}

impl Default for SynthParams {
    fn default() -> Self {
        let g = GenConfig::default();
        SynthParams {
            task: g.task,
            runs: g.n_runs,
            trials_per_direction: g.n_trials_per_direction,
            fs: g.fs_neural,
            channels: g.n_channels,
            erp_amplitude_uv: g.erp_amplitude_uv,
            direction_depth: g.direction_depth,
            subject_seed: None,
        }
    }
}

impl SynthParams {
    pub fn gen_config(&self, seed: u64, session_id: Option<String>) -> GenConfig {
        GenConfig {
            seed,
            subject_seed: self.subject_seed,
            session_id,
            task: self.task,
            n_runs: self.runs,
            n_trials_per_direction: self.trials_per_direction,
            fs_neural: self.fs,
            n_channels: self.channels,
            erp_amplitude_uv: self.erp_amplitude_uv,
            direction_depth: self.direction_depth,
            ..GenConfig::default()
        }
    }
}

pub fn synth(cfg: &GenConfig) -> anyhow::Result<(Loaded, GroundTruth)> {
    let (s, gt) = generate_session(cfg).context("[synth] generating session")?;
    Ok((Loaded::raw(s), gt))
}

pub fn write_synth(dir: &Path, l: &Loaded, gt: &GroundTruth, prov: &Provenance) -> anyhow::Result<()> {
    save_session(dir, l, prov)?;
    provenance::write_json(&dir.join("ground_truth.json"), prov, gt)
}

fn refilter(l: &mut Loaded, spec: &FirSpec, step: String, stage: &str) -> anyhow::Result<()> {
    l.session.neural = apply_filter(&l.session.neural, spec).with_context(|| format!("[{stage}] {step}"))?;
    l.steps.push(step);
    Ok(())
}

pub fn highpass(l: &mut Loaded, hz: f64) -> anyhow::Result<()> {
    refilter(l, &FirSpec::highpass(hz), format!("highpass:{hz}"), "highpass")
}

pub fn notch(l: &mut Loaded, hz: f64) -> anyhow::Result<()> {
    refilter(l, &FirSpec::notch(hz), format!("notch:{hz}"), "notch")
}

pub fn downsample(l: &mut Loaded, fs: f64) -> anyhow::Result<()> {
    if (fs - l.session.neural.fs).abs() > 1e-9 {
        l.session.neural = resample(&l.session.neural, fs).context("[downsample] resampling")?;
    }
    l.steps.push(format!("downsample:{fs}"));
    Ok(())
}

/// Drops excluded channels, detects R-peaks and, when `apply` is set,
/// removes the cardiac artifact by TS-CAR.
pub fn cardiac(l: &mut Loaded, apply: bool, window_ms: f64, exclude: &[String]) -> anyhow::Result<RPeakSet> {
    if apply && l.has_step("downsample") {
        return Err(Failure::new(
            exit::ORDER_VIOLATION,
            "ts_car",
            "TS-CAR must run before downsampling; this session has already been downsampled",
        )
        .into());
    }
    if !exclude.is_empty() {
        l.session.neural = l.session.neural.exclude_channels(exclude).context("[ts_car] excluding channels")?;
        l.steps.push(format!("exclude:{}", exclude.join("+")));
    }
    let peaks = detect_r_peaks(&l.session.neural).context("[ts_car] detecting R-peaks")?;
    info!("{}: {} R-peaks", l.session.session_id, peaks.len());
    if apply {
        l.session.neural = ts_car(&l.session.neural, &peaks, window_ms).context("[ts_car]")?;
        l.steps.push(format!("ts_car:{window_ms}"));
    }
    Ok(peaks)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EpochParams {
    pub window: [f64; 2],
    pub role: LabelRole,
    /// Add fixation epochs, matched per run to the saccade count.
    pub fixations: bool,
    pub eccentricity_cm: f64,
}

impl Default for EpochParams {
    fn default() -> Self {
        EpochParams { window: [-0.5, 0.5], role: LabelRole::Combined, fixations: true, eccentricity_cm: 8.5 }
    }
}

/// Epochs of one session (saccades first, then fixations).
#[derive(Clone, Debug)]
pub struct EpochData {
    pub session_id: String,
    pub epochs: Vec<Epoch>,
    pub channel_ids: Vec<String>,
}

impl EpochData {
    pub fn read(stage: &str, dir: &Path) -> anyhow::Result<EpochData> {
        require_input(stage, &dir.join("epochs.json"))?;
        let (epochs, channel_ids) = io::read_epochs(dir).with_context(|| format!("[{stage}] reading {}", dir.display()))?;
        let session_id = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        Ok(EpochData { session_id, epochs, channel_ids })
    }

    pub fn write(&self, dir: &Path, prov: &Provenance) -> anyhow::Result<()> {
        io::write_epochs(&self.epochs, &self.channel_ids, dir)?;
        provenance::write(dir, prov)
    }

    fn bundle(&self) -> EpochBundle {
        let (saccades, fixations) = self.epochs.iter().cloned().partition(|e| e.label.klass == Klass::Saccade);
        EpochBundle { saccades, fixations }
    }

    fn of_class(&self, k: Klass) -> Vec<Epoch> {
        self.epochs.iter().filter(|e| e.label.klass == k).cloned().collect()
    }
}

fn no_chain() -> ChainConfig {
    ChainConfig { highpass_hz: None, notch_hz: None, cardiac: false, ts_car_window_ms: DEFAULT_WINDOW_MS, target_fs: None }
}

pub fn epoch(l: &Loaded, p: &EpochParams) -> anyhow::Result<EpochData> {
    let window = saccade_core::epoching::EpochConfig::new(p.window[0], p.window[1]).context("[epoch]")?;
    let cfg = ProtocolConfig {
        chain: no_chain(),
        geometry: Geometry { eccentricity_cm: p.eccentricity_cm },
        ..ProtocolConfig::default()
    };
    let prepared = prepare_session(&l.session, &cfg, None).context("[epoch]")?;
    let bundle = prepared.epochs_window(p.role, &window).context("[epoch]")?;
    let mut epochs = bundle.saccades;
    if p.fixations {
        epochs.extend(bundle.fixations);
    }
    if epochs.is_empty() {
        bail!("[epoch] no epochs could be cut from session {}", l.session.session_id);
    }
    Ok(EpochData { session_id: l.session.session_id.clone(), epochs, channel_ids: prepared.channel_ids })
}

/// Wait times of a visually guided session, if any were found.
pub fn wait_times_csv(l: &Loaded, eccentricity_cm: f64) -> anyhow::Result<Option<String>> {
    if l.session.task != Task::VisuallyGuided {
        return Ok(None);
    }
    let mut events = saccade_core::epoching::detect_saccade_onsets(&l.session.gaze, &Geometry { eccentricity_cm });
    saccade_core::epoching::annotate(&mut events, &l.session);
    let waits: Vec<f64> = events.iter().filter_map(|e| e.wait_time_s).collect();
    if waits.is_empty() {
        return Ok(None);
    }
    let stats = wait_time_stats(&waits)?;
    Ok(Some(stats.histogram_csv()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    All,
    Time,
    Band,
    Raw,
}

impl FromStr for FeatureKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "all" => Ok(FeatureKind::All),
            "time" => Ok(FeatureKind::Time),
            "band" => Ok(FeatureKind::Band),
            "raw" => Ok(FeatureKind::Raw),
            other => Err(anyhow!("unknown feature set '{other}' (all, time, band, raw)")),
        }
    }
}

pub fn features(data: &EpochData, kind: FeatureKind) -> anyhow::Result<FeatureMatrix> {
    let set = match kind {
        FeatureKind::Raw => return raw_features(&data.epochs, &data.channel_ids).context("[features]"),
        FeatureKind::All => FeatureSet::ALL,
        FeatureKind::Time => FeatureSet { time: true, band: false },
        FeatureKind::Band => FeatureSet { time: false, band: true },
    };
    feature_matrix(&data.epochs, &data.channel_ids, set).context("[features]")
}

pub fn features_csv(data: &EpochData, fm: &FeatureMatrix) -> String {
    let mut s = String::from("idx,klass,direction,run");
    for name in &fm.schema {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (i, (e, row)) in data.epochs.iter().zip(fm.data.rows()).enumerate() {
        let d = e.label.direction.map_or("", |d| d.as_str());
        let _ = write!(s, "{i},{},{d},{}", e.label.klass.as_str(), e.label.run_index);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierOptions {
    pub kind: ClassifierKind,
    pub trees: usize,
    pub max_depth: Option<usize>,
    pub k: usize,
    pub l2: f64,
    /// Pick the classifier per training set from the default grid.
    pub grid: bool,
}

impl Default for ClassifierOptions {
    fn default() -> Self {
        let p = ClassifierParams::default();
        ClassifierOptions { kind: ClassifierKind::RandomForest, trees: p.n_estimators, max_depth: p.max_depth, k: p.k, l2: p.l2, grid: false }
    }
}

impl ClassifierOptions {
    pub fn spec(&self, seed: u64) -> ClassifierSpec {
        let params = ClassifierParams { n_estimators: self.trees, max_depth: self.max_depth, k: self.k, l2: self.l2, ..ClassifierParams::default() };
        ClassifierSpec { kind: self.kind, params, seed: Some(seed) }
    }

    fn apply(&self, cfg: &mut ProtocolConfig, seed: u64) {
        cfg.classifier = self.spec(seed);
        cfg.grid = self.grid.then(|| default_grid(seed));
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub comparison: Comparison,
    pub xdawn_components: usize,
    pub classifier: ClassifierOptions,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams { comparison: Comparison::Onset, xdawn_components: 2, classifier: ClassifierOptions::default() }
    }
}

pub fn train(data: &EpochData, p: &TrainParams, seed: u64) -> anyhow::Result<FittedFold> {
    let bundle = data.bundle();
    let (epochs, y) = comparison_data(&bundle, p.comparison, |_| true);
    let epochs: Vec<Epoch> = epochs.into_iter().cloned().collect();
    let groups: Vec<usize> = epochs.iter().map(|e| e.label.run_index).collect();
    let mut cfg = ProtocolConfig { xdawn_components: p.xdawn_components, ..ProtocolConfig::default() };
    p.classifier.apply(&mut cfg, seed);
    fit_fold(&epochs, &y, &groups, p.comparison, &cfg, &data.channel_ids).context("[train]")
}

pub fn grid_csv(fold: &FittedFold) -> Option<String> {
    let g = fold.grid.as_ref()?;
    let mut s = String::from("index,classifier,mean_auc,fold_aucs,best\n");
    for (i, row) in g.table.iter().enumerate() {
        let folds: Vec<String> = row.fold_aucs.iter().map(|a| a.map_or("NA".into(), |v| format!("{v:.6}"))).collect();
        let _ = writeln!(s, "{i},{},{:.6},{},{}", row.spec.describe(), row.mean_auc, folds.join(";"), i == g.best_index);
    }
    Some(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChainMode {
    /// Standard chain per run for raw sessions, nothing for processed ones.
    Auto,
    Standard,
    None,
}

impl FromStr for ChainMode {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "auto" => Ok(ChainMode::Auto),
            "standard" => Ok(ChainMode::Standard),
            "none" => Ok(ChainMode::None),
            other => Err(anyhow!("unknown chain mode '{other}' (auto, standard, none)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalParams {
    pub protocols: Vec<Protocol>,
    pub roles: Vec<LabelRole>,
    pub intervals: Vec<Interval>,
    pub comparisons: Vec<Comparison>,
    pub chain: ChainMode,
    pub xdawn_components: usize,
    pub eccentricity_cm: f64,
    pub classifier: ClassifierOptions,
}

impl Default for EvalParams {
    fn default() -> Self {
        let d = ProtocolConfig::default();
        EvalParams {
            protocols: vec![Protocol::Within, Protocol::Cross],
            roles: d.roles,
            intervals: d.intervals,
            comparisons: d.comparisons,
            chain: ChainMode::Auto,
            xdawn_components: d.xdawn_components,
            eccentricity_cm: d.geometry.eccentricity_cm,
            classifier: ClassifierOptions::default(),
        }
    }
}

pub fn evaluate(sessions: &[Loaded], p: &EvalParams, seed: u64) -> anyhow::Result<EvalReport> {
    if sessions.is_empty() {
        return Err(Failure::new(exit::MISSING_INPUT, "eval", "no sessions to evaluate").into());
    }
    let processed = sessions.iter().filter(|l| !l.steps.is_empty()).count();
    let chain = match p.chain {
        ChainMode::Standard => ChainConfig::default(),
        ChainMode::None => no_chain(),
        ChainMode::Auto if processed == 0 => ChainConfig::default(),
        ChainMode::Auto if processed == sessions.len() => no_chain(),
        ChainMode::Auto => bail!("[eval] some sessions are preprocessed and some are raw; pick --chain explicitly"),
    };
    let mut protocols = p.protocols.clone();
    if sessions.len() < 2 && protocols.contains(&Protocol::Cross) {
        warn!("one session only: skipping the cross-session protocol");
        protocols.retain(|&x| x != Protocol::Cross);
    }
    if protocols.is_empty() {
        bail!("[eval] no protocol left to run");
    }
    let mut cfg = ProtocolConfig {
        chain,
        geometry: Geometry { eccentricity_cm: p.eccentricity_cm },
        intervals: p.intervals.clone(),
        roles: p.roles.clone(),
        comparisons: p.comparisons.clone(),
        xdawn_components: p.xdawn_components,
        ..ProtocolConfig::default()
    };
    p.classifier.apply(&mut cfg, seed);
    let prepared = sessions
        .iter()
        .map(|l| prepare_session(&l.session, &cfg, None))
        .collect::<saccade_core::Result<Vec<_>>>()
        .context("[eval] preparing sessions")?;
    evaluate_prepared(&prepared, &cfg, &protocols).context("[eval]")
}

pub fn write_report(dir: &Path, report: &EvalReport, prov: &Provenance) -> anyhow::Result<()> {
    provenance::write_json(&dir.join("report.json"), prov, report)?;
    fs::write(dir.join("report.csv"), report.to_csv())?;
    for w in &report.wait_times {
        fs::write(dir.join(format!("wait_times_{}.csv", w.session_id)), w.stats.histogram_csv())?;
    }
    provenance::write(dir, prov)
}

pub fn read_report(stage: &str, path: &Path) -> anyhow::Result<EvalReport> {
    require_input(stage, path)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("[{stage}] parsing {}", path.display()))
}

/// Mean AUC over test sets for each (task, protocol, role, comparison, interval).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub task: Task,
    pub protocol: Protocol,
    pub role: LabelRole,
    pub comparison: Comparison,
    pub interval: Interval,
    pub n_sets: usize,
    pub mean_auc: Option<f64>,
    pub min_auc: Option<f64>,
    pub max_auc: Option<f64>,
}

pub fn summarize(report: &EvalReport) -> Vec<SummaryRow> {
    let mut out: Vec<SummaryRow> = Vec::new();
    for r in &report.rows {
        let key = (r.task, r.protocol, r.role, r.comparison, r.interval);
        if out.iter().any(|s| (s.task, s.protocol, s.role, s.comparison, s.interval) == key) {
            continue;
        }
        let aucs: Vec<f64> = report
            .rows
            .iter()
            .filter(|x| (x.task, x.protocol, x.role, x.comparison, x.interval) == key)
            .filter_map(|x| x.mean_auc)
            .collect();
        let n = aucs.len();
        let agg = |f: fn(f64, f64) -> f64| aucs.iter().copied().reduce(f);
        out.push(SummaryRow {
            task: r.task,
            protocol: r.protocol,
            role: r.role,
            comparison: r.comparison,
            interval: r.interval,
            n_sets: n,
            mean_auc: (n > 0).then(|| aucs.iter().sum::<f64>() / n as f64),
            min_auc: agg(f64::min),
            max_auc: agg(f64::max),
        });
    }
    out
}

fn na(v: Option<f64>) -> String {
    v.map_or("NA".into(), |x| format!("{x:.4}"))
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let mut s = String::from("task,protocol,role,comparison,interval,n_sets,mean_auc,min_auc,max_auc\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{}",
            r.task.as_str(),
            r.protocol.as_str(),
            r.role.as_str(),
            r.comparison,
            r.interval.as_str(),
            r.n_sets,
            na(r.mean_auc),
            na(r.min_auc),
            na(r.max_auc)
        );
    }
    s
}

pub fn summary_text(rows: &[SummaryRow], report: &EvalReport) -> String {
    let mut s = format!("{:<8} {:<9} {:<15} {:<9} {:>7} {:>7} {:>7}\n", "protocol", "role", "comparison", "interval", "mean", "min", "max");
    for r in rows {
        let _ = writeln!(
            s,
            "{:<8} {:<9} {:<15} {:<9} {:>7} {:>7} {:>7}",
            r.protocol.as_str(),
            r.role.as_str(),
            r.comparison.to_string(),
            r.interval.as_str(),
            na(r.mean_auc),
            na(r.min_auc),
            na(r.max_auc)
        );
    }
    for w in &report.wait_times {
        let _ = writeln!(s, "wait time {}: {}", w.session_id, w.stats.render());
    }
    s
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnalyzeKind {
    Erp,
    R2,
    Spectrogram,
}

impl FromStr for AnalyzeKind {
    type Err = anyhow::Error;
    fn from_str(s: &str) -> anyhow::Result<Self> {
        match s {
            "erp" => Ok(AnalyzeKind::Erp),
            "r2" => Ok(AnalyzeKind::R2),
            "spectrogram" => Ok(AnalyzeKind::Spectrogram),
            other => Err(anyhow!("unknown analysis '{other}' (erp, r2, spectrogram)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzeParams {
    pub kinds: Vec<AnalyzeKind>,
    pub smooth_hz: Option<f64>,
    /// Spectrogram channel; the first channel when unset.
    pub channel: Option<String>,
    pub fmin: f64,
    pub fmax: f64,
    pub df: f64,
    /// Baseline span relative to epoch start; whole epoch when unset.
    pub baseline: Option<[f64; 2]>,
}

impl Default for AnalyzeParams {
    fn default() -> Self {
        let sc = SpectrogramConfig::default();
        AnalyzeParams {
            kinds: vec![AnalyzeKind::Erp, AnalyzeKind::R2],
            smooth_hz: Some(DEFAULT_SMOOTH_HZ),
            channel: None,
            fmin: sc.fmin,
            fmax: sc.fmax,
            df: sc.df,
            baseline: None,
        }
    }
}

fn matrix_csv(first: &str, cols: &[String], rows: impl Iterator<Item = (String, Vec<f64>)>) -> String {
    let mut s = String::from(first);
    for c in cols {
        s.push(',');
        s.push_str(c);
    }
    s.push('\n');
    for (label, vals) in rows {
        s.push_str(&label);
        for v in vals {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<PathBuf> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

/// Writes the requested analyses to `dir`; returns the files written.
pub fn analyze(data: &EpochData, p: &AnalyzeParams, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let sacc = data.of_class(Klass::Saccade);
    let fix = data.of_class(Klass::Fixation);
    for kind in &p.kinds {
        match kind {
            AnalyzeKind::Erp => {
                for (name, set) in [("saccade", &sacc), ("fixation", &fix)] {
                    if set.is_empty() {
                        continue;
                    }
                    let erp = compute_erp(set, p.smooth_hz).with_context(|| format!("[analyze] ERP of {name} epochs"))?;
                    let t: Vec<f64> = (0..erp.mean.nrows()).map(|k| k as f64 / erp.fs - erp.t0_offset).collect();
                    let rows = t.iter().enumerate().map(|(k, tk)| (format!("{tk}"), erp.mean.row(k).to_vec()));
                    written.push(write_file(&dir.join(format!("erp_{name}.csv")), &matrix_csv("t_s", &data.channel_ids, rows))?);
                    let series: Vec<(String, Vec<f64>)> =
                        data.channel_ids.iter().enumerate().map(|(c, id)| (id.clone(), erp.mean.column(c).to_vec())).collect();
                    let plot = svg::line_plot(&format!("ERP, {name} (n={})", erp.n_trials), "time (s)", "amplitude", &t, &series);
                    written.push(write_file(&dir.join(format!("erp_{name}.svg")), &plot)?);
                }
            }
            AnalyzeKind::R2 => {
                if sacc.is_empty() || fix.is_empty() {
                    bail!("[analyze] r² needs both saccade and fixation epochs");
                }
                let r2 = r2_spectrum(&sacc, &fix).context("[analyze] r² spectrum")?;
                let cols: Vec<String> = r2.freqs.iter().map(|f| format!("{f}")).collect();
                let rows = data.channel_ids.iter().enumerate().map(|(c, id)| (id.clone(), r2.r2.row(c).to_vec()));
                written.push(write_file(&dir.join("r2.csv"), &matrix_csv("channel", &cols, rows))?);
                let z: Vec<Vec<f64>> = r2.r2.rows().into_iter().map(|r| r.to_vec()).collect();
                let ys: Vec<f64> = (0..z.len()).map(|c| c as f64).collect();
                let plot = svg::heatmap("r² saccade vs fixation", "frequency (Hz)", "channel", &r2.freqs, &ys, &z);
                written.push(write_file(&dir.join("r2.svg"), &plot)?);
                // time-domain r² on the ERP samples, per channel
                let (n, c) = sacc[0].data.dim();
                let mut per_t = Vec::with_capacity(n);
                for k in 0..n {
                    let a = ndarray::Array2::from_shape_fn((sacc.len(), c), |(i, j)| sacc[i].data[[k, j]]);
                    let b = ndarray::Array2::from_shape_fn((fix.len(), c), |(i, j)| fix[i].data[[k, j]]);
                    per_t.push(biserial_r2_columns(&a, &b)?);
                }
                let rows = (0..n).map(|k| (format!("{}", k as f64 / sacc[0].fs - sacc[0].t0_offset), per_t[k].clone()));
                written.push(write_file(&dir.join("r2_time.csv"), &matrix_csv("t_s", &data.channel_ids, rows))?);
            }
            AnalyzeKind::Spectrogram => {
                if sacc.is_empty() {
                    bail!("[analyze] spectrogram needs saccade epochs");
                }
                let ch = match &p.channel {
                    Some(name) => data
                        .channel_ids
                        .iter()
                        .position(|c| c == name)
                        .ok_or_else(|| anyhow!("[analyze] unknown channel '{name}'"))?,
                    None => 0,
                };
                let cfg = SpectrogramConfig { fmin: p.fmin, fmax: p.fmax, df: p.df };
                let baseline = match p.baseline {
                    Some([a, b]) => Baseline::Span { start_s: a, end_s: b },
                    None => Baseline::Whole,
                };
                let sg = morlet_spectrogram(&sacc, ch, &cfg, &baseline).context("[analyze] spectrogram")?;
                let cols: Vec<String> = sg.times.iter().map(|t| format!("{t}")).collect();
                let rows = sg.freqs.iter().enumerate().map(|(i, f)| (format!("{f}"), sg.power_db.row(i).to_vec()));
                written.push(write_file(&dir.join("spectrogram.csv"), &matrix_csv("freq_hz", &cols, rows))?);
                let z: Vec<Vec<f64>> = sg.power_db.rows().into_iter().map(|r| r.to_vec()).collect();
                let title = format!("spectrogram dB, {}", data.channel_ids[ch]);
                written.push(write_file(&dir.join("spectrogram.svg"), &svg::heatmap(&title, "time (s)", "frequency (Hz)", &sg.times, &sg.freqs, &z))?);
            }
        }
    }
    Ok(written)
}

pub fn ica_fit(l: &Loaded, k: usize, seed: u64) -> anyhow::Result<UnmixingModel> {
    let mut m = fastica_fit(&l.session.neural, k, seed).context("[ica] fitting")?;
    m.fitted_on = vec![l.session.session_id.clone()];
    if !m.converged {
        warn!("FastICA did not converge in {} iterations", m.n_iter);
    }
    Ok(m)
}

/// Replaces the session's channels by the model's components.
pub fn unmix_session(l: &Loaded, model: &UnmixingModel, stage: &str) -> anyhow::Result<Loaded> {
    let src = apply_unmixing(model, &l.session.neural).with_context(|| format!("[{stage}] applying model"))?;
    let mut out = l.clone();
    out.session.neural = src.into_signal()?;
    out.steps.push(stage.to_string());
    Ok(out)
}

pub fn xdawn_fit_epochs(data: &EpochData, k: usize) -> anyhow::Result<UnmixingModel> {
    let target: Vec<bool> = data.epochs.iter().map(|e| e.label.klass == Klass::Saccade).collect();
    let mut m = xdawn_fit(&data.epochs, &target, k, &data.channel_ids).context("[xdawn] fitting")?;
    m.fitted_on = vec![data.session_id.clone()];
    Ok(m)
}

pub fn xdawn_apply_epochs(data: &EpochData, model: &UnmixingModel) -> anyhow::Result<EpochData> {
    saccade_core::decompose::check_channels(model, &data.channel_ids).context("[xdawn] applying model")?;
    Ok(EpochData {
        session_id: data.session_id.clone(),
        epochs: apply_to_epochs(model, &data.epochs),
        channel_ids: (0..model.n_components()).map(|i| format!("xdawn{i}")).collect(),
    })
}

pub fn read_model(stage: &str, path: &Path) -> anyhow::Result<UnmixingModel> {
    require_input(stage, path)?;
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).with_context(|| format!("[{stage}] parsing {}", path.display()))
}
