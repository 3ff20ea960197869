//! Labeled sequence records stored as JSON lines.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{check_configuration, Configuration, StateGrid, TransitionLevels};
use crate::error::{Error, Result};
use crate::model::ObservationSequence;
use crate::topology::Topology;

/// One sequence: observations, and optionally its state grid `x[level][t]`
/// and interior transition levels `e`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub o: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub x: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub e: Option<Vec<usize>>,
}

impl Record {
    pub fn labeled(cfg: &Configuration, o: &ObservationSequence) -> Self {
        Record {
            o: o.symbols().to_vec(),
            x: Some(cfg.grid.0.clone()),
            e: Some(cfg.levels.0.clone()),
        }
    }

    pub fn unlabeled(o: &ObservationSequence) -> Self {
        Record {
            o: o.symbols().to_vec(),
            x: None,
            e: None,
        }
    }

    pub fn observations(&self, alphabet_size: usize) -> Result<ObservationSequence> {
        ObservationSequence::new(self.o.clone(), alphabet_size)
    }

    /// The labeled configuration, or `None` when either label is missing.
    pub fn configuration(&self) -> Option<Configuration> {
        match (&self.x, &self.e) {
            (Some(x), Some(e)) => Some(Configuration {
                grid: StateGrid(x.clone()),
                levels: TransitionLevels(e.clone()),
            }),
            _ => None,
        }
    }
}

/// A labeled record checked against a topology and alphabet.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSequence {
    pub config: Configuration,
    pub observations: ObservationSequence,
}

pub type Dataset = Vec<Record>;

/// Checks every record and returns its configuration and observations.
/// `index` in errors is the zero-based record position.
pub fn labeled_sequences(
    data: &[Record],
    topo: &Topology,
    alphabet_size: usize,
) -> Result<Vec<LabeledSequence>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    data.iter()
        .enumerate()
        .map(|(i, r)| {
            let config = r.configuration().ok_or(Error::UnlabeledRecord(i))?;
            let observations = r.observations(alphabet_size)?;
            check_configuration(&config, topo)?;
            if config.levels.length() != observations.len() {
                return Err(Error::ShapeMismatch(format!(
                    "record {i}: labels have length {}, observations {}",
                    config.levels.length(),
                    observations.len()
                )));
            }
            Ok(LabeledSequence {
                config,
                observations,
            })
        })
        .collect()
}

pub fn load_jsonl(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

pub fn save_jsonl(path: impl AsRef<Path>, data: &[Record]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in data {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Settings for generating a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    /// Path of the topology JSON, relative to this file's directory when not absolute.
    pub topology_ref: PathBuf,
    #[serde(rename = "M")]
    pub alphabet_size: usize,
    #[serde(rename = "T")]
    pub length: usize,
    pub n: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: GeneratorConfig = serde_json::from_str(&text)?;
        if cfg.topology_ref.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.topology_ref = dir.join(&cfg.topology_ref);
            }
        }
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
