//! Marginal tables and their CSV/JSON export.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// State marginals `P(x_t^level = s | o)` and transition marginals `P(e_t = level | o)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSet {
    /// `states[level][t][s]`
    pub states: Vec<Vec<Vec<f64>>>,
    /// `transitions[t][level]` for each interior boundary `t`.
    pub transitions: Vec<Vec<f64>>,
    /// `log Z(o)` for exact results; `None` for estimates.
    pub log_partition: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    log_partition: Option<f64>,
    depth: usize,
    length: usize,
}

#[derive(Serialize, Deserialize)]
struct StateRow {
    level: usize,
    time: usize,
    state: usize,
    probability: f64,
}

#[derive(Serialize, Deserialize)]
struct TransitionRow {
    time: usize,
    level: usize,
    probability: f64,
}

impl MarginalSet {
    pub fn depth(&self) -> usize {
        self.states.len()
    }

    pub fn length(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    /// Largest deviation of any row sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        self.states
            .iter()
            .flatten()
            .chain(self.transitions.iter())
            .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Largest absolute entry-wise difference in states and transitions.
    pub fn max_abs_diff(&self, other: &MarginalSet) -> f64 {
        let a = self.states.iter().flatten().flatten();
        let b = other.states.iter().flatten().flatten();
        let c = self.transitions.iter().flatten();
        let d = other.transitions.iter().flatten();
        a.zip(b)
            .chain(c.zip(d))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    pub fn same_shape(&self, other: &MarginalSet) -> bool {
        self.states.len() == other.states.len()
            && self.states.iter().zip(&other.states).all(|(a, b)| {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.len() == y.len())
            })
            && self.transitions.len() == other.transitions.len()
            && self
                .transitions
                .iter()
                .zip(&other.transitions)
                .all(|(a, b)| a.len() == b.len())
    }

    /// Writes `<prefix>_states.csv`, `<prefix>_transitions.csv` and `<prefix>.json`.
    pub fn write(&self, prefix: impl AsRef<Path>) -> Result<()> {
        let prefix = prefix.as_ref();
        let (states, transitions, sidecar) = paths(prefix);
        let mut w = csv::Writer::from_path(&states)?;
        for (level, rows) in self.states.iter().enumerate() {
            for (time, row) in rows.iter().enumerate() {
                for (state, &probability) in row.iter().enumerate() {
                    w.serialize(StateRow {
                        level,
                        time,
                        state,
                        probability,
                    })?;
                }
            }
        }
        w.flush().map_err(|e| Error::io(&states, e))?;
        let mut w = csv::Writer::from_path(&transitions)?;
        for (time, row) in self.transitions.iter().enumerate() {
            for (level, &probability) in row.iter().enumerate() {
                w.serialize(TransitionRow {
                    time,
                    level,
                    probability,
                })?;
            }
        }
        w.flush().map_err(|e| Error::io(&transitions, e))?;
        let side = Sidecar {
            log_partition: self.log_partition,
            depth: self.depth(),
            length: self.length(),
        };
        std::fs::write(&sidecar, serde_json::to_string_pretty(&side)?)
            .map_err(|e| Error::io(&sidecar, e))
    }

    /// Reads back a set written by [`MarginalSet::write`].
    pub fn read(prefix: impl AsRef<Path>) -> Result<Self> {
        let (states_path, trans_path, sidecar) = paths(prefix.as_ref());
        let text = std::fs::read_to_string(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let side: Sidecar = serde_json::from_str(&text)?;
        let mut states: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); side.length]; side.depth];
        for row in csv::Reader::from_path(&states_path)?.deserialize() {
            let row: StateRow = row?;
            let cell = states
                .get_mut(row.level)
                .and_then(|l| l.get_mut(row.time))
                .ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "state row out of range in {}",
                        states_path.display()
                    ))
                })?;
            if cell.len() <= row.state {
                cell.resize(row.state + 1, 0.0);
            }
            cell[row.state] = row.probability;
        }
        let mut transitions: Vec<Vec<f64>> =
            vec![vec![0.0; side.depth]; side.length.saturating_sub(1)];
        for row in csv::Reader::from_path(&trans_path)?.deserialize() {
            let row: TransitionRow = row?;
            let cell = transitions
                .get_mut(row.time)
                .and_then(|r| r.get_mut(row.level))
                .ok_or_else(|| {
                    Error::ShapeMismatch(format!(
                        "transition row out of range in {}",
                        trans_path.display()
                    ))
                })?;
            *cell = row.probability;
        }
        Ok(MarginalSet {
            states,
            transitions,
            log_partition: side.log_partition,
        })
    }
}

fn paths(prefix: &Path) -> (std::path::PathBuf, std::path::PathBuf, std::path::PathBuf) {
    let base = prefix.as_os_str().to_string_lossy().into_owned();
    (
        format!("{base}_states.csv").into(),
        format!("{base}_transitions.csv").into(),
        format!("{base}.json").into(),
    )
}
