//! Subcommand definitions and dispatch.

use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;

use saccade_core::evaluate::{Comparison, Interval, Protocol};
use saccade_core::model::{LabelRole, Task};
use saccade_core::synthgen::GenConfig;

use crate::ops::{self, AnalyzeKind, AnalyzeParams, ChainMode, ClassifierOptions, EpochParams, EvalParams, FeatureKind, TrainParams};
use crate::provenance::{self, Provenance};
use crate::{output_dir, pipeline, require_input};

fn parse_with<T: FromStr>(s: &str) -> Result<T, String>
where
    T::Err: Display,
{
    s.parse::<T>().map_err(|e| e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "saccade", version, about = "Offline saccade decoding from endovascular neural recordings")]
pub struct Cli {
    /// More log output (repeat for debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    /// Overwrite outputs written with a different configuration.
    #[arg(long, global = true)]
    pub force: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic session with planted ground truth.
    Synth(SynthArgs),
    /// High-pass, notch and resample a session.
    Preprocess(PreprocessArgs),
    /// Detect R-peaks and remove the cardiac artifact by TS-CAR.
    Artifacts(ArtifactsArgs),
    /// FastICA unmixing.
    #[command(subcommand)]
    Ica(IcaCommand),
    /// xDAWN spatial filters on epochs.
    #[command(subcommand)]
    Xdawn(XdawnCommand),
    /// Detect saccades from gaze and cut labelled epochs.
    Epoch(EpochArgs),
    /// Time and band-power features per epoch.
    Features(FeaturesArgs),
    /// ERP, r² and spectrogram analyses (CSV plus SVG).
    Analyze(AnalyzeArgs),
    /// Fit the decoding chain on one epoch set.
    Train(TrainArgs),
    /// Within- and cross-session evaluation.
    Eval(EvalArgs),
    /// Summarise a report.json.
    Report(ReportArgs),
    /// Run a chain of stages described in a TOML or JSON file.
    Pipeline(PipelineArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Generator configuration (JSON or TOML); flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub subject_seed: Option<u64>,
    #[arg(long)]
    pub session_id: Option<String>,
    /// fv (free viewing) or vg (visually guided).
    #[arg(long, value_parser = parse_with::<Task>)]
    pub task: Option<Task>,
    #[arg(long)]
    pub runs: Option<usize>,
    /// Trials per direction over the whole session.
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub fs: Option<f64>,
    #[arg(long)]
    pub channels: Option<usize>,
    /// Saccadic potential amplitude (µV).
    #[arg(long)]
    pub amp: Option<f64>,
    /// Direction coding depth relative to the saccadic potential.
    #[arg(long)]
    pub depth: Option<f64>,
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    pub hp: f64,
    #[arg(long)]
    pub no_hp: bool,
    #[arg(long, default_value_t = 50.0)]
    pub notch: f64,
    #[arg(long)]
    pub no_notch: bool,
    /// Target sampling rate; no resampling when omitted.
    #[arg(long)]
    pub resample: Option<f64>,
}

#[derive(Debug, Args)]
pub struct ArtifactsArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Subtract the cardiac artifact; without it only R-peaks are written.
    #[arg(long)]
    pub ts_car: bool,
    #[arg(long, default_value_t = saccade_core::artifacts::DEFAULT_WINDOW_MS)]
    pub window_ms: f64,
    /// Channels dropped before detection and correction.
    #[arg(long, value_delimiter = ',')]
    pub exclude_channels: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum IcaCommand {
    Fit {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Subcommand)]
pub enum XdawnCommand {
    /// Fit on an epoch set; saccade epochs are the target class.
    Fit {
        #[arg(long)]
        epochs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    Apply {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        epochs: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct EpochArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Window in seconds around onset.
    #[arg(long, num_args = 2, allow_negative_numbers = true, default_values_t = [-0.5, 0.5])]
    pub window: Vec<f64>,
    /// initial, back or combined.
    #[arg(long, default_value = "combined", value_parser = parse_with::<LabelRole>)]
    pub role: LabelRole,
    #[arg(long)]
    pub no_fixations: bool,
    #[arg(long, default_value_t = 8.5)]
    pub eccentricity: f64,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub epochs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// all, time, band or raw.
    #[arg(long, default_value = "all", value_parser = parse_with::<FeatureKind>)]
    pub set: FeatureKind,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    /// erp, r2 or spectrogram.
    #[arg(value_parser = parse_with::<AnalyzeKind>)]
    pub kind: AnalyzeKind,
    #[arg(long)]
    pub epochs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = saccade_core::analysis::DEFAULT_SMOOTH_HZ)]
    pub smooth_hz: f64,
    #[arg(long)]
    pub no_smooth: bool,
    #[arg(long)]
    pub channel: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    pub fmin: f64,
    #[arg(long, default_value_t = 30.0)]
    pub fmax: f64,
    #[arg(long, default_value_t = 0.1)]
    pub df: f64,
    /// Baseline span in seconds from epoch start; whole epoch by default.
    #[arg(long, num_args = 2, allow_negative_numbers = true)]
    pub baseline: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Args)]
pub struct ClassifierArgs {
    /// rf, knn, logistic or lda.
    #[arg(long, default_value = "rf", value_parser = parse_with::<saccade_core::classify::ClassifierKind>)]
    pub clf: saccade_core::classify::ClassifierKind,
    #[arg(long, default_value_t = 100)]
    pub trees: usize,
    #[arg(long)]
    pub max_depth: Option<usize>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub l2: f64,
    /// `default` selects trees and depth per training set by inner
    /// leave-one-run-out search; `none` uses the flags as given.
    #[arg(long, default_value = "none", value_parser = ["none", "default"])]
    pub grid: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

impl ClassifierArgs {
    fn options(&self) -> ClassifierOptions {
        ClassifierOptions { kind: self.clf, trees: self.trees, max_depth: self.max_depth, k: self.k, l2: self.l2, grid: self.grid == "default" }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// onset, 4class or a pair such as left_vs_right.
    #[arg(long, default_value = "onset", value_parser = parse_with::<Comparison>)]
    pub comparison: Comparison,
    #[arg(long, default_value_t = 2)]
    pub xdawn_k: usize,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Session directories.
    #[arg(long, num_args = 1.., required = true)]
    pub sessions: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// within, cross or all.
    #[arg(long, default_value = "all", value_delimiter = ',')]
    pub protocol: Vec<String>,
    /// all or a list of initial, back, combined.
    #[arg(long, default_value = "all", value_delimiter = ',')]
    pub roles: Vec<String>,
    /// all, table, or a list of full, pre_post, pre, post.
    #[arg(long, default_value = "table", value_delimiter = ',')]
    pub intervals: Vec<String>,
    /// all or a list such as onset,4class,left_vs_right.
    #[arg(long, default_value = "all", value_delimiter = ',')]
    pub comparisons: Vec<String>,
    /// auto, standard or none.
    #[arg(long, default_value = "auto", value_parser = parse_with::<ChainMode>)]
    pub chain: ChainMode,
    #[arg(long, default_value_t = 2)]
    pub xdawn_k: usize,
    #[arg(long, default_value_t = 8.5)]
    pub eccentricity: f64,
    #[command(flatten)]
    pub classifier: ClassifierArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// report.json written by `eval` or `pipeline`.
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PipelineArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the `out` entry of the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn list<T: FromStr + Clone>(values: &[String], all: &[T], named: &[(&str, Vec<T>)]) -> anyhow::Result<Vec<T>>
where
    T::Err: Display,
{
    let mut out = Vec::new();
    for v in values {
        if v == "all" {
            out.extend_from_slice(all);
        } else if let Some((_, set)) = named.iter().find(|(n, _)| n == v) {
            out.extend_from_slice(set);
        } else {
            out.push(v.parse::<T>().map_err(|e| anyhow::anyhow!("{e}"))?);
        }
    }
    Ok(out)
}

impl EvalArgs {
    fn params(&self) -> anyhow::Result<EvalParams> {
        let all_intervals = [Interval::Full, Interval::PrePost, Interval::Pre, Interval::Post];
        Ok(EvalParams {
            protocols: list(&self.protocol, &[Protocol::Within, Protocol::Cross], &[])?,
            roles: list(&self.roles, &LabelRole::ALL, &[])?,
            intervals: list(&self.intervals, &all_intervals, &[("table", Interval::TABLE.to_vec())])?,
            comparisons: list(&self.comparisons, &Comparison::all(), &[])?,
            chain: self.chain,
            xdawn_components: self.xdawn_k,
            eccentricity_cm: self.eccentricity,
            classifier: self.classifier.options(),
        })
    }
}

fn read_config_value(path: &Path) -> anyhow::Result<serde_json::Value> {
    require_input("config", path)?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e == "toml");
    Ok(if is_toml {
        serde_json::to_value(toml::from_str::<toml::Value>(&text).with_context(|| format!("parsing {}", path.display()))?)?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    let force = cli.force;
    match cli.command {
        Command::Synth(a) => {
            let mut cfg: GenConfig = match &a.config {
                Some(p) => serde_json::from_value(read_config_value(p)?).context("[synth] generator configuration")?,
                None => GenConfig::default(),
            };
            if let Some(v) = a.seed {
                cfg.seed = v;
            }
            cfg.subject_seed = a.subject_seed.or(cfg.subject_seed);
            cfg.session_id = a.session_id.clone().or(cfg.session_id);
            cfg.task = a.task.unwrap_or(cfg.task);
            cfg.n_runs = a.runs.unwrap_or(cfg.n_runs);
            cfg.n_trials_per_direction = a.trials.unwrap_or(cfg.n_trials_per_direction);
            cfg.fs_neural = a.fs.unwrap_or(cfg.fs_neural);
            cfg.n_channels = a.channels.unwrap_or(cfg.n_channels);
            cfg.erp_amplitude_uv = a.amp.unwrap_or(cfg.erp_amplitude_uv);
            cfg.direction_depth = a.depth.unwrap_or(cfg.direction_depth);
            let out = output_dir(a.out, "synth");
            let prov = Provenance::new("synth", Some(cfg.seed), &cfg);
            provenance::prepare_output(&out, &prov, force)?;
            let (l, gt) = ops::synth(&cfg)?;
            ops::write_synth(&out, &l, &gt, &prov)?;
            info!("wrote session {} to {}", l.session.session_id, out.display());
        }
        Command::Preprocess(a) => {
            let out = output_dir(a.out.clone(), "preprocess");
            let hp = (!a.no_hp).then_some(a.hp);
            let notch = (!a.no_notch).then_some(a.notch);
            let prov = Provenance::new("preprocess", None, &(&a.input, hp, notch, a.resample));
            let mut l = ops::load_session("preprocess", &a.input)?;
            provenance::prepare_output(&out, &prov, force)?;
            if let Some(hz) = hp {
                ops::highpass(&mut l, hz)?;
            }
            if let Some(hz) = notch {
                ops::notch(&mut l, hz)?;
            }
            if let Some(fs) = a.resample {
                ops::downsample(&mut l, fs)?;
            }
            ops::save_session(&out, &l, &prov)?;
        }
        Command::Artifacts(a) => {
            let out = output_dir(a.out.clone(), "artifacts");
            let prov = Provenance::new("artifacts", None, &(&a.input, a.ts_car, a.window_ms, &a.exclude_channels));
            let mut l = ops::load_session("artifacts", &a.input)?;
            provenance::prepare_output(&out, &prov, force)?;
            let peaks = ops::cardiac(&mut l, a.ts_car, a.window_ms, &a.exclude_channels)?;
            ops::save_session(&out, &l, &prov)?;
            provenance::write_json(&out.join("rpeaks.json"), &prov, &peaks)?;
        }
        Command::Ica(IcaCommand::Fit { input, out, k, seed }) => {
            let out = output_dir(out, "ica");
            let prov = Provenance::new("ica_fit", Some(seed), &(&input, k));
            let l = ops::load_session("ica", &input)?;
            provenance::prepare_output(&out, &prov, force)?;
            let model = ops::ica_fit(&l, k, seed)?;
            provenance::write_json(&out.join("model.json"), &prov, &model)?;
            provenance::write(&out, &prov)?;
        }
        Command::Ica(IcaCommand::Apply { model, input, out }) => {
            let out = output_dir(out, "ica_apply");
            let prov = Provenance::new("ica_apply", None, &(&model, &input));
            let m = ops::read_model("ica", &model)?;
            let l = ops::load_session("ica", &input)?;
            provenance::prepare_output(&out, &prov, force)?;
            let unmixed = ops::unmix_session(&l, &m, "ica")?;
            ops::save_session(&out, &unmixed, &prov)?;
        }
        Command::Xdawn(XdawnCommand::Fit { epochs, out, k }) => {
            let out = output_dir(out, "xdawn");
            let prov = Provenance::new("xdawn_fit", None, &(&epochs, k));
            let data = ops::EpochData::read("xdawn", &epochs)?;
            provenance::prepare_output(&out, &prov, force)?;
            let model = ops::xdawn_fit_epochs(&data, k)?;
            provenance::write_json(&out.join("model.json"), &prov, &model)?;
            provenance::write(&out, &prov)?;
        }
        Command::Xdawn(XdawnCommand::Apply { model, epochs, out }) => {
            let out = output_dir(out, "xdawn_apply");
            let prov = Provenance::new("xdawn_apply", None, &(&model, &epochs));
            let m = ops::read_model("xdawn", &model)?;
            let data = ops::EpochData::read("xdawn", &epochs)?;
            provenance::prepare_output(&out, &prov, force)?;
            ops::xdawn_apply_epochs(&data, &m)?.write(&out, &prov)?;
        }
        Command::Epoch(a) => {
            let out = output_dir(a.out.clone(), "epoch");
            let p = EpochParams { window: [a.window[0], a.window[1]], role: a.role, fixations: !a.no_fixations, eccentricity_cm: a.eccentricity };
            let prov = Provenance::new("epoch", None, &(&a.input, &p));
            let l = ops::load_session("epoch", &a.input)?;
            provenance::prepare_output(&out, &prov, force)?;
            let data = ops::epoch(&l, &p)?;
            data.write(&out, &prov)?;
            if let Some(csv) = ops::wait_times_csv(&l, p.eccentricity_cm)? {
                fs::write(out.join("wait_times.csv"), csv)?;
            }
            info!("{} epochs", data.epochs.len());
        }
        Command::Features(a) => {
            let out = output_dir(a.out.clone(), "features");
            let prov = Provenance::new("features", None, &(&a.epochs, a.set));
            let data = ops::EpochData::read("features", &a.epochs)?;
            provenance::prepare_output(&out, &prov, force)?;
            let fm = ops::features(&data, a.set)?;
            fs::write(out.join("features.csv"), ops::features_csv(&data, &fm))?;
            provenance::write(&out, &prov)?;
        }
        Command::Analyze(a) => {
            let out = output_dir(a.out.clone(), "analyze");
            let p = AnalyzeParams {
                kinds: vec![a.kind],
                smooth_hz: (!a.no_smooth).then_some(a.smooth_hz),
                channel: a.channel.clone(),
                fmin: a.fmin,
                fmax: a.fmax,
                df: a.df,
                baseline: a.baseline.as_ref().map(|b| [b[0], b[1]]),
            };
            let prov = Provenance::new("analyze", None, &(&a.epochs, &p));
            let data = ops::EpochData::read("analyze", &a.epochs)?;
            provenance::prepare_output(&out, &prov, force)?;
            ops::analyze(&data, &p, &out)?;
            provenance::write(&out, &prov)?;
        }
        Command::Train(a) => {
            let out = output_dir(a.out.clone(), "train");
            let p = TrainParams { comparison: a.comparison, xdawn_components: a.xdawn_k, classifier: a.classifier.options() };
            let seed = a.classifier.seed;
            let prov = Provenance::new("train", Some(seed), &(&a.epochs, &p));
            let data = ops::EpochData::read("train", &a.epochs)?;
            provenance::prepare_output(&out, &prov, force)?;
            let fold = ops::train(&data, &p, seed)?;
            provenance::write_json(&out.join("model.json"), &prov, &fold)?;
            if let Some(csv) = ops::grid_csv(&fold) {
                fs::write(out.join("grid.csv"), csv)?;
            }
            provenance::write(&out, &prov)?;
        }
        Command::Eval(a) => {
            let out = output_dir(a.out.clone(), "eval");
            let p = a.params()?;
            let seed = a.classifier.seed;
            let prov = Provenance::new("eval", Some(seed), &(&a.sessions, &p));
            let sessions = a.sessions.iter().map(|d| ops::load_session("eval", d)).collect::<anyhow::Result<Vec<_>>>()?;
            provenance::prepare_output(&out, &prov, force)?;
            let report = ops::evaluate(&sessions, &p, seed)?;
            ops::write_report(&out, &report, &prov)?;
            info!("{} report rows written to {}", report.rows.len(), out.display());
        }
        Command::Report(a) => {
            let out = output_dir(a.out.clone(), "report");
            let prov = Provenance::new("report", None, &a.report);
            let report = ops::read_report("report", &a.report)?;
            provenance::prepare_output(&out, &prov, force)?;
            let rows = ops::summarize(&report);
            fs::write(out.join("summary.csv"), ops::summary_csv(&rows))?;
            let text = ops::summary_text(&rows, &report);
            fs::write(out.join("summary.txt"), &text)?;
            provenance::write(&out, &prov)?;
            print!("{text}");
        }
        Command::Pipeline(a) => {
            let value = read_config_value(&a.config)?;
            let base = a.config.parent().map(Path::to_path_buf).unwrap_or_default();
            let cfg = pipeline::PipelineConfig::from_value(value, &base)?;
            let out = a.out.clone().or_else(|| cfg.out.clone()).unwrap_or_else(|| output_dir(None, "pipeline"));
            pipeline::run(&cfg, &out, force)?;
        }
    }
    Ok(())
}
