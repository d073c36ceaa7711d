//! Provenance records. Every output directory gets a `provenance.json`
//! sidecar, and JSON outputs embed the same record under `"provenance"`.

use std::fs;
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{exit, Failure};

pub const FILE: &str = "provenance.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool: String,
    pub version: String,
    pub stage: String,
    pub seed: Option<u64>,
    /// SHA-256 of the canonical JSON of the stage configuration.
    pub config_hash: String,
    /// Signal-chain steps applied to the data so far, oldest first.
    #[serde(default)]
    pub steps: Vec<String>,
}

pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let bytes = serde_json::to_vec(cfg).expect("configuration serialises");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Provenance {
    pub fn new<T: Serialize>(stage: &str, seed: Option<u64>, cfg: &T) -> Self {
        Provenance {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            stage: stage.to_string(),
            seed,
            config_hash: config_hash(&(stage, seed, cfg)),
            steps: Vec::new(),
        }
    }

    pub fn with_steps(mut self, steps: Vec<String>) -> Self {
        self.steps = steps;
        self
    }
}

/// Provenance of an existing output directory, if it has one.
pub fn read(dir: &Path) -> anyhow::Result<Option<Provenance>> {
    let path = dir.join(FILE);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Some(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?))
}

/// Steps already applied to a session directory (empty for raw data).
pub fn steps_of(dir: &Path) -> anyhow::Result<Vec<String>> {
    Ok(read(dir)?.map(|p| p.steps).unwrap_or_default())
}

/// Creates `dir` for writing. An existing directory is reused only when it
/// was produced by the same configuration, unless `force` is set.
pub fn prepare_output(dir: &Path, prov: &Provenance, force: bool) -> anyhow::Result<()> {
    if !force && dir.exists() {
        match read(dir)? {
            Some(old) if old.config_hash != prov.config_hash => {
                return Err(Failure::new(
                    exit::OVERWRITE_REFUSED,
                    &prov.stage,
                    format!(
                        "{} was written with a different configuration ({} vs {}); pass --force to overwrite",
                        dir.display(),
                        &old.config_hash[..12],
                        &prov.config_hash[..12]
                    ),
                )
                .into());
            }
            Some(_) => {}
            None => {
                let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
                if occupied {
                    return Err(Failure::new(
                        exit::OVERWRITE_REFUSED,
                        &prov.stage,
                        format!("{} is not empty and has no provenance; pass --force to overwrite", dir.display()),
                    )
                    .into());
                }
            }
        }
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

pub fn write(dir: &Path, prov: &Provenance) -> anyhow::Result<()> {
    let path = dir.join(FILE);
    fs::write(&path, serde_json::to_string_pretty(prov)? + "\n").with_context(|| format!("writing {}", path.display()))
}

/// Writes `value` as pretty JSON with the provenance record embedded.
pub fn write_json<T: Serialize>(path: &Path, prov: &Provenance, value: &T) -> anyhow::Result<()> {
    let mut v = serde_json::to_value(value)?;
    match v.as_object_mut() {
        Some(obj) => {
            obj.insert("provenance".into(), serde_json::to_value(prov)?);
        }
        None => v = serde_json::json!({ "provenance": prov, "data": v }),
    }
    fs::write(path, serde_json::to_string_pretty(&v)? + "\n").with_context(|| format!("writing {}", path.display()))
}
