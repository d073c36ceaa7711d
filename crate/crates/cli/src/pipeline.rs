//! Configured chains of stages.
//!
//! ```toml
//! seed = 7
//! out = "runs/demo"
//!
//! [[stages]]
//! stage = "synth"
//! sessions = 2
//! fs = 512.0
//!
//! [[stages]]
//! stage = "preprocess"
//!
//! [[stages]]
//! stage = "eval"
//! ```
//!
//! Stages run in the listed order. Signal stages (`highpass`, `notch`,
//! `ts_car`, `downsample`, `preprocess`, `ica`) must come before `epoch`
//! and `eval`, and TS-CAR must come before downsampling.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use log::info;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::ops::{self, AnalyzeParams, EpochData, EpochParams, EvalParams, FeatureKind, Loaded, SynthParams, TrainParams};
use crate::provenance::{self, Provenance};
use crate::{exit, Failure};

pub const STAGE_NAMES: [&str; 14] = [
    "synth", "load", "highpass", "notch", "ts_car", "downsample", "preprocess", "ica", "epoch", "features", "analyze", "train",
    "eval", "report",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HzParams {
    pub hz: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TsCarParams {
    pub window_ms: f64,
    pub exclude_channels: Vec<String>,
}

impl Default for TsCarParams {
    fn default() -> Self {
        TsCarParams { window_ms: saccade_core::artifacts::DEFAULT_WINDOW_MS, exclude_channels: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DownsampleParams {
    pub fs: f64,
}

/// The standard chain in one stage; each step can be switched off.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessParams {
    pub highpass_hz: Option<f64>,
    pub notch_hz: Option<f64>,
    pub ts_car: bool,
    pub window_ms: f64,
    pub target_fs: Option<f64>,
}

impl Default for PreprocessParams {
    fn default() -> Self {
        PreprocessParams {
            highpass_hz: Some(0.5),
            notch_hz: Some(50.0),
            ts_car: true,
            window_ms: saccade_core::artifacts::DEFAULT_WINDOW_MS,
            target_fs: Some(64.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoadParams {
    pub paths: Vec<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IcaParams {
    pub k: usize,
}

impl Default for IcaParams {
    fn default() -> Self {
        IcaParams { k: 5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeaturesParams {
    pub set: FeatureKind,
}

impl Default for FeaturesParams {
    fn default() -> Self {
        FeaturesParams { set: FeatureKind::All }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "stage", rename_all = "snake_case")]
pub enum Stage {
    Synth {
        sessions: usize,
        #[serde(flatten)]
        params: SynthParams,
    },
    Load(LoadParams),
    Highpass(HzParams),
    Notch(HzParams),
    TsCar(TsCarParams),
    Downsample(DownsampleParams),
    Preprocess(PreprocessParams),
    Ica(IcaParams),
    Epoch(EpochParams),
    Features(FeaturesParams),
    Analyze(AnalyzeParams),
    Train(TrainParams),
    Eval(EvalParams),
    Report,
}

impl Stage {
    pub fn name(&self) -> &'static str {
        match self {
            Stage::Synth { .. } => "synth",
            Stage::Load(_) => "load",
            Stage::Highpass(_) => "highpass",
            Stage::Notch(_) => "notch",
            Stage::TsCar(_) => "ts_car",
            Stage::Downsample(_) => "downsample",
            Stage::Preprocess(_) => "preprocess",
            Stage::Ica(_) => "ica",
            Stage::Epoch(_) => "epoch",
            Stage::Features(_) => "features",
            Stage::Analyze(_) => "analyze",
            Stage::Train(_) => "train",
            Stage::Eval(_) => "eval",
            Stage::Report => "report",
        }
    }

    fn is_source(&self) -> bool {
        matches!(self, Stage::Synth { .. } | Stage::Load(_))
    }

    fn is_signal(&self) -> bool {
        matches!(
            self,
            Stage::Highpass(_) | Stage::Notch(_) | Stage::TsCar(_) | Stage::Downsample(_) | Stage::Preprocess(_) | Stage::Ica(_)
        )
    }

    fn removes_cardiac(&self) -> bool {
        matches!(self, Stage::TsCar(_)) || matches!(self, Stage::Preprocess(p) if p.ts_car)
    }

    fn downsamples(&self) -> bool {
        matches!(self, Stage::Downsample(_)) || matches!(self, Stage::Preprocess(p) if p.target_fs.is_some())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    /// Keep the session data written by every signal stage, not just the last.
    pub keep_intermediate: bool,
    pub stages: Vec<Stage>,
}

fn parse_params<T: DeserializeOwned>(index: usize, name: &str, table: Map<String, Value>) -> anyhow::Result<T> {
    serde_json::from_value(Value::Object(table)).with_context(|| format!("stage {index} ({name}): bad parameters"))
}

fn order_error(msg: String) -> anyhow::Error {
    Failure::new(exit::ORDER_VIOLATION, "pipeline", msg).into()
}

impl PipelineConfig {
    /// Parses a configuration; relative `load` paths resolve against `base`.
    pub fn from_value(value: Value, base: &Path) -> anyhow::Result<PipelineConfig> {
        let Value::Object(mut top) = value else {
            anyhow::bail!("pipeline configuration must be a table");
        };
        let seed = match top.remove("seed") {
            Some(v) => v.as_u64().context("seed must be a non-negative integer")?,
            None => 0,
        };
        let out = top.remove("out").map(|v| v.as_str().map(PathBuf::from).context("out must be a string")).transpose()?;
        let keep_intermediate = match top.remove("keep_intermediate") {
            Some(v) => v.as_bool().context("keep_intermediate must be a boolean")?,
            None => false,
        };
        let stages_value = top.remove("stages").context("pipeline configuration has no stages")?;
        if let Some(k) = top.keys().next() {
            anyhow::bail!("unknown pipeline key '{k}'");
        }
        let Value::Array(list) = stages_value else {
            anyhow::bail!("stages must be a list");
        };
        let mut stages = Vec::with_capacity(list.len());
        for (i, entry) in list.into_iter().enumerate() {
            let Value::Object(mut table) = entry else {
                anyhow::bail!("stage {i} must be a table");
            };
            let name = match table.remove("stage") {
                Some(Value::String(s)) => s,
                _ => anyhow::bail!("stage {i} has no 'stage' name"),
            };
            let stage = match name.as_str() {
                "synth" => {
                    let sessions = match table.remove("sessions") {
                        Some(v) => v.as_u64().context("sessions must be a positive integer")? as usize,
                        None => 2,
                    };
                    Stage::Synth { sessions, params: parse_params(i, &name, table)? }
                }
                "load" => {
                    let mut p: LoadParams = parse_params(i, &name, table)?;
                    p.paths = p.paths.into_iter().map(|q| if q.is_relative() { base.join(q) } else { q }).collect();
                    Stage::Load(p)
                }
                "highpass" => Stage::Highpass(parse_params(i, &name, table)?),
                "notch" => Stage::Notch(parse_params(i, &name, table)?),
                "ts_car" => Stage::TsCar(parse_params(i, &name, table)?),
                "downsample" => Stage::Downsample(parse_params(i, &name, table)?),
                "preprocess" => Stage::Preprocess(parse_params(i, &name, table)?),
                "ica" => Stage::Ica(parse_params(i, &name, table)?),
                "epoch" => Stage::Epoch(parse_params(i, &name, table)?),
                "features" => Stage::Features(parse_params(i, &name, table)?),
                "analyze" => Stage::Analyze(parse_params(i, &name, table)?),
                "train" => Stage::Train(parse_params(i, &name, table)?),
                "eval" => Stage::Eval(parse_params(i, &name, table)?),
                "report" => {
                    if let Some(k) = table.keys().next() {
                        anyhow::bail!("stage {i} (report): unknown parameter '{k}'");
                    }
                    Stage::Report
                }
                other => {
                    return Err(Failure::new(
                        exit::UNKNOWN_STAGE,
                        "pipeline",
                        format!("stage {i}: unknown stage '{other}' (known: {})", STAGE_NAMES.join(", ")),
                    )
                    .into())
                }
            };
            stages.push(stage);
        }
        let cfg = PipelineConfig { seed, out, keep_intermediate, stages };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks the stage order.
    pub fn validate(&self) -> anyhow::Result<()> {
        let Some(first) = self.stages.first() else {
            return Err(Failure::new(exit::MISSING_INPUT, "pipeline", "no stages").into());
        };
        if !first.is_source() {
            return Err(Failure::new(exit::MISSING_INPUT, "pipeline", "the first stage must be synth or load").into());
        }
        let mut downsampled_at = None;
        let mut epoch_at = None;
        let mut eval_at = None;
        let mut consumed_at = None;
        for (i, s) in self.stages.iter().enumerate().skip(1) {
            let name = s.name();
            if s.is_source() {
                return Err(order_error(format!("stage {i} ({name}): only the first stage may be synth or load")));
            }
            if s.removes_cardiac() {
                if let Some(d) = downsampled_at {
                    return Err(order_error(format!(
                        "stage {i} ({name}): TS-CAR must run before downsampling (stage {d} downsamples)"
                    )));
                }
            }
            if s.downsamples() {
                downsampled_at.get_or_insert(i);
            }
            if s.is_signal() {
                if let Some(c) = consumed_at {
                    return Err(order_error(format!(
                        "stage {i} ({name}): signal stages must come before epoch and eval (stage {c})"
                    )));
                }
            }
            match s {
                Stage::Epoch(_) => {
                    epoch_at.get_or_insert(i);
                    consumed_at.get_or_insert(i);
                }
                Stage::Eval(_) => {
                    eval_at.get_or_insert(i);
                    consumed_at.get_or_insert(i);
                }
                Stage::Features(_) | Stage::Analyze(_) | Stage::Train(_) if epoch_at.is_none() => {
                    return Err(order_error(format!("stage {i} ({name}) needs an earlier epoch stage")));
                }
                Stage::Report if eval_at.is_none() => {
                    return Err(order_error(format!("stage {i} (report) needs an earlier eval stage")));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Default)]
struct State {
    sessions: Vec<Loaded>,
    epochs: Vec<EpochData>,
    report: Option<saccade_core::evaluate::EvalReport>,
}

/// Runs every stage, writing `out/NN_stage/` per stage plus `report.json`
/// and `report.csv` at the top when an eval stage ran.
pub fn run(cfg: &PipelineConfig, out: &Path, force: bool) -> anyhow::Result<()> {
    let root = Provenance::new("pipeline", Some(cfg.seed), cfg);
    provenance::prepare_output(out, &root, force)?;
    provenance::write(out, &root)?;
    fs::write(out.join("pipeline.json"), serde_json::to_string_pretty(cfg)? + "\n")?;
    let last_signal = cfg.stages.iter().rposition(|s| s.is_signal() || s.is_source());
    let mut st = State::default();
    for (i, stage) in cfg.stages.iter().enumerate() {
        let name = stage.name();
        let dir = out.join(format!("{i:02}_{name}"));
        fs::create_dir_all(&dir)?;
        let prov = Provenance::new(name, Some(cfg.seed), &(&root.config_hash, i, stage));
        info!("stage {i}: {name}");
        let write_sessions = cfg.keep_intermediate || Some(i) == last_signal;
        run_stage(stage, cfg.seed, &dir, &prov, write_sessions, &mut st).with_context(|| format!("stage {i} ({name}) failed"))?;
        provenance::write(&dir, &prov)?;
    }
    if let Some(report) = &st.report {
        provenance::write_json(&out.join("report.json"), &root, report)?;
        fs::write(out.join("report.csv"), report.to_csv())?;
    }
    Ok(())
}

fn write_all_sessions(st: &State, dir: &Path, prov: &Provenance) -> anyhow::Result<()> {
    for l in &st.sessions {
        ops::save_session(&dir.join(&l.session.session_id), l, prov)?;
    }
    Ok(())
}

fn run_stage(stage: &Stage, seed: u64, dir: &Path, prov: &Provenance, write_sessions: bool, st: &mut State) -> anyhow::Result<()> {
    match stage {
        Stage::Synth { sessions, params } => {
            // sessions share one layout unless a subject seed is given
            let params = SynthParams { subject_seed: params.subject_seed.or(Some(seed)), ..params.clone() };
            for k in 0..*sessions {
                let id = format!("S{:02}", k + 1);
                let g = params.gen_config(seed + k as u64, Some(id.clone()));
                let (l, gt) = ops::synth(&g)?;
                if write_sessions {
                    ops::write_synth(&dir.join(&id), &l, &gt, prov)?;
                } else {
                    fs::create_dir_all(dir.join(&id))?;
                    provenance::write_json(&dir.join(&id).join("ground_truth.json"), prov, &gt)?;
                }
                st.sessions.push(l);
            }
        }
        Stage::Load(p) => {
            for path in &p.paths {
                st.sessions.push(ops::load_session("load", path)?);
            }
        }
        Stage::Highpass(p) => st.sessions.iter_mut().try_for_each(|l| ops::highpass(l, p.hz))?,
        Stage::Notch(p) => st.sessions.iter_mut().try_for_each(|l| ops::notch(l, p.hz))?,
        Stage::Downsample(p) => st.sessions.iter_mut().try_for_each(|l| ops::downsample(l, p.fs))?,
        Stage::TsCar(p) => {
            for l in &mut st.sessions {
                let peaks = ops::cardiac(l, true, p.window_ms, &p.exclude_channels)?;
                provenance::write_json(&dir.join(format!("rpeaks_{}.json", l.session.session_id)), prov, &peaks)?;
            }
        }
        Stage::Preprocess(p) => {
            for l in &mut st.sessions {
                if let Some(hz) = p.highpass_hz {
                    ops::highpass(l, hz)?;
                }
                if let Some(hz) = p.notch_hz {
                    ops::notch(l, hz)?;
                }
                if p.ts_car {
                    let peaks = ops::cardiac(l, true, p.window_ms, &[])?;
                    provenance::write_json(&dir.join(format!("rpeaks_{}.json", l.session.session_id)), prov, &peaks)?;
                }
                if let Some(fs) = p.target_fs {
                    ops::downsample(l, fs)?;
                }
            }
        }
        Stage::Ica(p) => {
            for l in &mut st.sessions {
                let m = ops::ica_fit(l, p.k, seed)?;
                provenance::write_json(&dir.join(format!("ica_{}.json", l.session.session_id)), prov, &m)?;
                *l = ops::unmix_session(l, &m, "ica")?;
            }
        }
        Stage::Epoch(p) => {
            st.epochs.clear();
            for l in &st.sessions {
                let data = ops::epoch(l, p)?;
                data.write(&dir.join(&data.session_id), prov)?;
                if let Some(csv) = ops::wait_times_csv(l, p.eccentricity_cm)? {
                    fs::write(dir.join(&data.session_id).join("wait_times.csv"), csv)?;
                }
                st.epochs.push(data);
            }
        }
        Stage::Features(p) => {
            for data in &st.epochs {
                let fm = ops::features(data, p.set)?;
                fs::write(dir.join(format!("{}.csv", data.session_id)), ops::features_csv(data, &fm))?;
            }
        }
        Stage::Analyze(p) => {
            for data in &st.epochs {
                let sub = dir.join(&data.session_id);
                fs::create_dir_all(&sub)?;
                ops::analyze(data, p, &sub)?;
            }
        }
        Stage::Train(p) => {
            for data in &st.epochs {
                let fold = ops::train(data, p, seed)?;
                let sub = dir.join(&data.session_id);
                fs::create_dir_all(&sub)?;
                provenance::write_json(&sub.join("model.json"), prov, &fold)?;
                if let Some(csv) = ops::grid_csv(&fold) {
                    fs::write(sub.join("grid.csv"), csv)?;
                }
            }
        }
        Stage::Eval(p) => {
            let report = ops::evaluate(&st.sessions, p, seed)?;
            ops::write_report(dir, &report, prov)?;
            st.report = Some(report);
        }
        Stage::Report => {
            let report = st.report.as_ref().expect("validated: report follows eval");
            let rows = ops::summarize(report);
            fs::write(dir.join("summary.csv"), ops::summary_csv(&rows))?;
            let text = ops::summary_text(&rows, report);
            fs::write(dir.join("summary.txt"), &text)?;
            print!("{text}");
        }
    }
    if write_sessions && stage.is_signal() {
        write_all_sessions(st, dir, prov)?;
    }
    Ok(())
}
