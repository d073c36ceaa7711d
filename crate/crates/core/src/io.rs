//! On-disk formats: session directories and epoch sets.
//!
//! A session directory holds `meta.json`, `neural.f32` (little-endian f32,
//! sample-major), `gaze.csv` (`t,x_cm,y_cm`) and `markers.csv`
//! (`t,kind,direction,role`). An epoch set holds `epochs.json`,
//! `epochs.f32` (epoch-major, then sample-major) and `labels.csv`
//! (`idx,klass,direction,role,valid,run`).

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    Direction, Epoch, EventKind, EventMarker, GazeTrack, Klass, LabelRole, NeuralSignal, SaccadeRole, Session,
    Task, TrialLabel,
};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct SessionMeta {
    pub session_id: String,
    pub task: Task,
    pub fs_neural: f64,
    pub n_channels: usize,
    pub channel_ids: Vec<String>,
    pub fs_gaze_nominal: f64,
    pub runs: Vec<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io { path: path.display().to_string(), source }
}

fn format_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format { path: path.display().to_string(), msg: msg.into() }
}

pub fn write_f32_le(path: &Path, values: impl Iterator<Item = f64>) -> Result<()> {
    let f = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(f);
    for v in values {
        w.write_all(&(v as f32).to_le_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path).map_err(io_err(path))?.read_to_end(&mut bytes).map_err(io_err(path))?;
    if bytes.len() % 4 != 0 {
        return Err(format_err(path, "length is not a multiple of 4 bytes"));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn dir_str(v: Option<Direction>) -> &'static str {
    v.map(Direction::as_str).unwrap_or("")
}

pub fn write_session(session: &Session, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = SessionMeta {
        session_id: session.session_id.clone(),
        task: session.task,
        fs_neural: session.neural.fs,
        n_channels: session.neural.n_channels(),
        channel_ids: session.neural.channel_ids.clone(),
        fs_gaze_nominal: session.gaze.fs_nominal,
        runs: session.runs.clone(),
        seed: session.seed,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&meta_path))?;

    write_f32_le(&dir.join("neural.f32"), session.neural.data.iter().copied())?;

    let gaze_path = dir.join("gaze.csv");
    let mut w = BufWriter::new(File::create(&gaze_path).map_err(io_err(&gaze_path))?);
    writeln!(w, "t,x_cm,y_cm").map_err(io_err(&gaze_path))?;
    for (t, p) in session.gaze.timestamps.iter().zip(&session.gaze.positions) {
        writeln!(w, "{},{},{}", t, p[0], p[1]).map_err(io_err(&gaze_path))?;
    }
    w.flush().map_err(io_err(&gaze_path))?;

    let markers_path = dir.join("markers.csv");
    let mut w = BufWriter::new(File::create(&markers_path).map_err(io_err(&markers_path))?);
    writeln!(w, "t,kind,direction,role").map_err(io_err(&markers_path))?;
    for m in &session.markers {
        writeln!(
            w,
            "{},{},{},{}",
            m.time,
            m.kind.as_str(),
            dir_str(m.direction),
            m.role.map(|r| r.as_str()).unwrap_or("")
        )
        .map_err(io_err(&markers_path))?;
    }
    w.flush().map_err(io_err(&markers_path))
}

fn read_csv(path: &Path, header: &str) -> Result<Vec<Vec<String>>> {
    let f = File::open(path).map_err(io_err(path))?;
    let mut lines = BufReader::new(f).lines();
    let first = lines.next().transpose().map_err(io_err(path))?.unwrap_or_default();
    if first.trim_end() != header {
        return Err(format_err(path, format!("expected header '{header}', found '{first}'")));
    }
    let n_cols = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<String> = line.trim_end().split(',').map(str::to_string).collect();
        if cols.len() != n_cols {
            return Err(format_err(path, format!("line {}: expected {n_cols} fields", i + 2)));
        }
        rows.push(cols);
    }
    Ok(rows)
}

fn parse_f64(path: &Path, s: &str) -> Result<f64> {
    s.parse::<f64>().map_err(|_| format_err(path, format!("bad number '{s}'")))
}

pub fn read_session(dir: &Path) -> Result<Session> {
    let meta_path = dir.join("meta.json");
    let meta: SessionMeta =
        serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;

    let neural_path = dir.join("neural.f32");
    let values = read_f32_le(&neural_path)?;
    if meta.n_channels == 0 || values.len() % meta.n_channels != 0 {
        return Err(format_err(&neural_path, "sample count is not a multiple of n_channels"));
    }
    let n = values.len() / meta.n_channels;
    let data = Array2::from_shape_vec((n, meta.n_channels), values)
        .map_err(|e| format_err(&neural_path, e.to_string()))?;
    let neural = NeuralSignal { data, fs: meta.fs_neural, channel_ids: meta.channel_ids.clone() };

    let gaze_path = dir.join("gaze.csv");
    let mut timestamps = Vec::new();
    let mut positions = Vec::new();
    for row in read_csv(&gaze_path, "t,x_cm,y_cm")? {
        timestamps.push(parse_f64(&gaze_path, &row[0])?);
        positions.push([parse_f64(&gaze_path, &row[1])?, parse_f64(&gaze_path, &row[2])?]);
    }

    let markers_path = dir.join("markers.csv");
    let mut markers = Vec::new();
    for row in read_csv(&markers_path, "t,kind,direction,role")? {
        let wrap = |e: Error| format_err(&markers_path, e.to_string());
        markers.push(EventMarker {
            time: parse_f64(&markers_path, &row[0])?,
            kind: row[1].parse::<EventKind>().map_err(wrap)?,
            direction: if row[2].is_empty() { None } else { Some(row[2].parse::<Direction>().map_err(wrap)?) },
            role: if row[3].is_empty() { None } else { Some(row[3].parse::<SaccadeRole>().map_err(wrap)?) },
        });
    }

    Ok(Session {
        session_id: meta.session_id,
        task: meta.task,
        neural,
        gaze: GazeTrack { timestamps, positions, fs_nominal: meta.fs_gaze_nominal },
        markers,
        runs: meta.runs,
        seed: meta.seed,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EpochSetMeta {
    pub n_epochs: usize,
    pub n_samples: usize,
    pub n_channels: usize,
    pub fs: f64,
    pub t0_offset: f64,
    pub channel_ids: Vec<String>,
}

/// Writes epochs sharing one shape and time base.
pub fn write_epochs(epochs: &[Epoch], channel_ids: &[String], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let (n_samples, n_channels, fs, t0) = match epochs.first() {
        Some(e) => (e.n_samples(), e.n_channels(), e.fs, e.t0_offset),
        None => (0, channel_ids.len(), 0.0, 0.0),
    };
    if epochs.iter().any(|e| e.data.dim() != (n_samples, n_channels)) {
        return Err(Error::InvalidInput("epochs must share one shape".into()));
    }
    let meta = EpochSetMeta {
        n_epochs: epochs.len(),
        n_samples,
        n_channels,
        fs,
        t0_offset: t0,
        channel_ids: channel_ids.to_vec(),
    };
    let meta_path = dir.join("epochs.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n").map_err(io_err(&meta_path))?;
    write_f32_le(&dir.join("epochs.f32"), epochs.iter().flat_map(|e| e.data.iter().copied()))?;

    let labels_path = dir.join("labels.csv");
    let mut w = BufWriter::new(File::create(&labels_path).map_err(io_err(&labels_path))?);
    writeln!(w, "idx,klass,direction,role,valid,run").map_err(io_err(&labels_path))?;
    for (i, e) in epochs.iter().enumerate() {
        let l = &e.label;
        writeln!(
            w,
            "{},{},{},{},{},{}",
            i,
            l.klass.as_str(),
            dir_str(l.direction),
            l.role.map(|r| r.as_str()).unwrap_or(""),
            l.valid,
            l.run_index
        )
        .map_err(io_err(&labels_path))?;
    }
    w.flush().map_err(io_err(&labels_path))
}

pub fn read_labels(path: &Path) -> Result<Vec<TrialLabel>> {
    let mut labels = Vec::new();
    for row in read_csv(path, "idx,klass,direction,role,valid,run")? {
        let wrap = |e: Error| format_err(path, e.to_string());
        labels.push(TrialLabel {
            klass: row[1].parse::<Klass>().map_err(wrap)?,
            direction: if row[2].is_empty() { None } else { Some(row[2].parse::<Direction>().map_err(wrap)?) },
            role: if row[3].is_empty() { None } else { Some(row[3].parse::<LabelRole>().map_err(wrap)?) },
            valid: row[4].parse::<bool>().map_err(|_| format_err(path, "bad bool"))?,
            run_index: row[5].parse::<usize>().map_err(|_| format_err(path, "bad run index"))?,
        });
    }
    Ok(labels)
}

/// Reads an epoch set; returns the epochs and their channel ids.
pub fn read_epochs(dir: &Path) -> Result<(Vec<Epoch>, Vec<String>)> {
    let meta_path = dir.join("epochs.json");
    let meta: EpochSetMeta = serde_json::from_str(&fs::read_to_string(&meta_path).map_err(io_err(&meta_path))?)?;
    let data_path = dir.join("epochs.f32");
    let values = read_f32_le(&data_path)?;
    let per = meta.n_samples * meta.n_channels;
    if values.len() != per * meta.n_epochs {
        return Err(format_err(&data_path, "size does not match epochs.json"));
    }
    let labels = read_labels(&dir.join("labels.csv"))?;
    if labels.len() != meta.n_epochs {
        return Err(format_err(&dir.join("labels.csv"), "label count does not match epochs.json"));
    }
    let epochs = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| Epoch {
            data: Array2::from_shape_vec((meta.n_samples, meta.n_channels), values[i * per..(i + 1) * per].to_vec())
                .expect("shape checked"),
            t0_offset: meta.t0_offset,
            fs: meta.fs,
            label,
        })
        .collect();
    Ok((epochs, meta.channel_ids))
}
