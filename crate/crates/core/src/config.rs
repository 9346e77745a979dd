//! Run configuration files.
//!
//! A run is described by one TOML file. Relative paths resolve against the
//! file's directory, command-line `key=value` overrides are applied to the
//! parsed document before it is interpreted, and every problem found is
//! reported at once before any data is touched.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::PointDataset;
use crate::error::{Error, Result};
use crate::rational_net::Architecture;
use crate::term_library::Library;
use crate::trainer::{DatasetSpec, EarlyStop, PhaseConfig, PhaseKind, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub train: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    pub hidden_layers: usize,
    pub units: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub collocation_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseEntry {
    pub epochs: usize,
    #[serde(default = "one")]
    pub w_data: f64,
    #[serde(default = "one")]
    pub w_coll: f64,
    #[serde(default)]
    pub w_lp: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneEntry {
    pub epochs: usize,
    #[serde(default = "one")]
    pub w_data: f64,
    #[serde(default = "one")]
    pub w_coll: f64,
    #[serde(default)]
    pub w_lp: f64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_window")]
    pub patience: usize,
    #[serde(default = "default_window")]
    pub lp_window: usize,
    #[serde(default = "default_lp_tolerance")]
    pub lp_tolerance: f64,
}

fn one() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    1e-3
}
fn default_window() -> usize {
    100
}
fn default_lp_tolerance() -> f64 {
    1e-3
}
fn default_p() -> f64 {
    0.1
}
fn default_delta() -> f64 {
    1e-8
}
fn default_n_coll() -> usize {
    3000
}
fn default_threshold() -> f64 {
    5e-4
}
fn default_chunk() -> usize {
    64
}
fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub library: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_p")]
    pub p: f64,
    #[serde(default = "default_delta")]
    pub delta: f64,
    #[serde(default = "default_n_coll")]
    pub n_random_coll: usize,
    #[serde(default = "default_threshold")]
    pub prune_threshold: f64,
    #[serde(default = "default_chunk")]
    pub chunk_size: usize,
    #[serde(default = "yes")]
    pub normalize_inputs: bool,
    #[serde(rename = "dataset")]
    pub datasets: Vec<DatasetEntry>,
    pub burn_in: PhaseEntry,
    pub sparsification: PhaseEntry,
    pub fine_tune: FineTuneEntry,
}

/// Apply `key.path=value` overrides to a parsed document. Values are read as
/// TOML, falling back to a plain string; numeric path segments index arrays.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    let mut root = toml::Value::Table(std::mem::take(doc));
    let result = overrides.iter().try_for_each(|o| {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::config(format!("override {o:?} is not key=value")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        set_path(&mut root, &parts, parse_value(raw.trim()), key)
    });
    if let toml::Value::Table(t) = root {
        *doc = t;
    }
    result
}

fn set_path(node: &mut toml::Value, parts: &[&str], value: toml::Value, key: &str) -> Result<()> {
    let (part, rest) = parts.split_first().expect("non-empty path");
    let slot = match node {
        toml::Value::Table(t) => {
            if rest.is_empty() {
                t.insert(part.to_string(), value);
                return Ok(());
            }
            t.entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
        }
        toml::Value::Array(a) => {
            let i: usize = part.parse().map_err(|_| {
                Error::config(format!("override {key:?}: {part:?} is not an index"))
            })?;
            let len = a.len();
            let elem = a.get_mut(i).ok_or_else(|| {
                Error::config(format!(
                    "override {key:?}: index {i} out of range ({len} entries)"
                ))
            })?;
            if rest.is_empty() {
                *elem = value;
                return Ok(());
            }
            elem
        }
        _ => {
            return Err(Error::config(format!(
                "override {key:?}: {part:?} is not inside a table"
            )))
        }
    };
    set_path(slot, rest, value, key)
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Table = toml::from_str(text)
            .map_err(|e| Error::parse(span(text, e.span()), e.message().to_string()))?;
        apply_overrides(&mut doc, overrides)?;
        let rendered = toml::to_string(&doc).expect("table serialises");
        toml::from_str(&rendered).map_err(|e| Error::Validation(vec![e.message().to_string()]))
    }

    /// Load and resolve relative paths against the file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml_str(&text, overrides).map_err(|e| match e {
            Error::Parse { position, message } => Error::Parse {
                position: format!("{}: {position}", path.display()),
                message,
            },
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.library);
        for d in &mut self.datasets {
            fix(&mut d.train);
            if let Some(t) = &mut d.test {
                fix(t);
            }
        }
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation.
    pub fn hash(&self) -> String {
        let digest = Sha256::digest(self.to_toml_string().as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    fn phases(&self) -> Vec<PhaseConfig> {
        let make = |kind, e: &PhaseEntry| PhaseConfig {
            kind,
            epochs: e.epochs,
            w_data: e.w_data,
            w_coll: e.w_coll,
            w_lp: e.w_lp,
            lr: e.lr,
            early_stop: None,
        };
        let f = &self.fine_tune;
        let entry = PhaseEntry {
            epochs: f.epochs,
            w_data: f.w_data,
            w_coll: f.w_coll,
            w_lp: f.w_lp,
            lr: f.lr,
        };
        let mut fine = make(PhaseKind::FineTune, &entry);
        fine.early_stop = Some(EarlyStop {
            patience: self.fine_tune.patience,
            lp_window: self.fine_tune.lp_window,
            lp_tolerance: self.fine_tune.lp_tolerance,
        });
        vec![
            make(PhaseKind::BurnIn, &self.burn_in),
            make(PhaseKind::Sparsification, &self.sparsification),
            fine,
        ]
    }

    /// Read every referenced file and assemble the training configuration,
    /// collecting all problems before failing.
    pub fn into_train_config(&self) -> Result<TrainConfig> {
        let mut problems = Vec::new();
        if self.datasets.is_empty() {
            problems.push("at least one [[dataset]] is required".to_string());
        }
        let mut specs = Vec::new();
        for (i, d) in self.datasets.iter().enumerate() {
            let train = match PointDataset::load(&d.train) {
                Ok(t) => Some(t),
                Err(e) => {
                    problems.push(format!("dataset {i}: {e}"));
                    None
                }
            };
            let test = match &d.test {
                None => None,
                Some(p) => match PointDataset::load(p) {
                    Ok(t) => Some(t),
                    Err(e) => {
                        problems.push(format!("dataset {i} test set: {e}"));
                        None
                    }
                },
            };
            if let Some(train) = train {
                let dims = train.domain.spatial_dims();
                specs.push(DatasetSpec {
                    architecture: Architecture::new(1 + dims, d.hidden_layers, d.units),
                    test,
                    train,
                    network_seed: d.network_seed.unwrap_or(self.seed),
                    collocation_seed: d.collocation_seed.unwrap_or(self.seed),
                });
            }
        }
        let dims = specs.first().map_or(1, |s| s.train.domain.spatial_dims());
        let library = match Library::load(&self.library, dims) {
            Ok(l) => Some(l),
            Err(Error::Validation(v)) => {
                problems.extend(v.into_iter().map(|m| format!("library: {m}")));
                None
            }
            Err(e) => {
                problems.push(format!("library: {e}"));
                None
            }
        };
        let phases = self.phases();
        let Some(library) = library else {
            for p in &phases {
                problems.extend(p.problems());
            }
            return Err(Error::Validation(problems));
        };
        let mut cfg = TrainConfig::new(library, specs, phases);
        cfg.p = self.p;
        cfg.delta = self.delta;
        cfg.n_random_coll = self.n_random_coll;
        cfg.prune_threshold = self.prune_threshold;
        cfg.chunk_size = self.chunk_size;
        cfg.normalize_inputs = self.normalize_inputs;
        cfg.metadata = BTreeMap::from([
            ("config_hash".to_string(), self.hash()),
            ("seed".to_string(), self.seed.to_string()),
            ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
        ]);
        if let Err(Error::Validation(v)) = cfg.validate() {
            problems.extend(v);
        }
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Validation(problems))
        }
    }
}

fn span(text: &str, span: Option<std::ops::Range<usize>>) -> String {
    match span {
        None => "unknown position".into(),
        Some(r) => {
            let line = text[..r.start.min(text.len())].matches('\n').count() + 1;
            format!("line {line}")
        }
    }
}
