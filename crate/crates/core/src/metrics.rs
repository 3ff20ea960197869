//! Accuracy of estimated marginals against exact ones.
//!
//! Every metric averages uniformly over `(level, t)` cells. KL uses the
//! estimate floored at [`KL_FLOOR`] and renormalized, so zero estimates stay finite.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::marginals::MarginalSet;
use crate::rbgs::decode;

pub const KL_FLOOR: f64 = 1e-10;

fn check(exact: &MarginalSet, est: &MarginalSet) -> Result<()> {
    if exact.same_shape(est) {
        Ok(())
    } else {
        Err(Error::ShapeMismatch(format!(
            "marginal sets differ in shape (depth {} length {} vs depth {} length {})",
            exact.depth(),
            exact.length(),
            est.depth(),
            est.length()
        )))
    }
}

/// `KL(p ‖ q)` with `q` floored then renormalized.
pub fn kl(p: &[f64], q: &[f64]) -> f64 {
    let floored: Vec<f64> = q.iter().map(|&x| x.max(KL_FLOOR)).collect();
    let z: f64 = floored.iter().sum();
    p.iter()
        .zip(&floored)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a * (a / (b / z)).ln())
        .sum()
}

pub fn l1(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn state_cells<'a>(
    m: &'a MarginalSet,
    e: &'a MarginalSet,
) -> impl Iterator<Item = (&'a [f64], &'a [f64])> {
    m.states
        .iter()
        .flatten()
        .zip(e.states.iter().flatten())
        .map(|(a, b)| (a.as_slice(), b.as_slice()))
}

/// Mean state-marginal KL(exact ‖ estimate) over cells.
pub fn avg_kl(exact: &MarginalSet, est: &MarginalSet) -> Result<f64> {
    check(exact, est)?;
    Ok(mean(state_cells(exact, est).map(|(p, q)| kl(p, q))))
}

/// Mean state-marginal L1 distance over cells.
pub fn avg_l1(exact: &MarginalSet, est: &MarginalSet) -> Result<f64> {
    check(exact, est)?;
    Ok(mean(state_cells(exact, est).map(|(p, q)| l1(p, q))))
}

/// Fraction of cells where the per-cell maximal-marginal decodes agree.
pub fn decode_match(exact: &MarginalSet, est: &MarginalSet) -> Result<f64> {
    check(exact, est)?;
    let a = decode(exact);
    let b = decode(est);
    Ok(mean(
        a.0.iter()
            .flatten()
            .zip(b.0.iter().flatten())
            .map(|(x, y)| if x == y { 1.0 } else { 0.0 }),
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub kl: f64,
    pub l1: f64,
    pub decode_match: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub kl: f64,
    pub l1: f64,
    pub decode_match: f64,
    /// Same metrics on the transition-level marginals.
    pub transition_kl: f64,
    pub transition_l1: f64,
    pub per_level: Vec<LevelReport>,
}

impl ComparisonReport {
    pub fn compare(exact: &MarginalSet, est: &MarginalSet) -> Result<Self> {
        check(exact, est)?;
        let a = decode(exact);
        let b = decode(est);
        let per_level = (0..exact.depth())
            .map(|level| {
                let cells = || exact.states[level].iter().zip(&est.states[level]);
                LevelReport {
                    level,
                    kl: mean(cells().map(|(p, q)| kl(p, q))),
                    l1: mean(cells().map(|(p, q)| l1(p, q))),
                    decode_match: mean(a.0[level].iter().zip(&b.0[level]).map(|(x, y)| {
                        if x == y {
                            1.0
                        } else {
                            0.0
                        }
                    })),
                }
            })
            .collect();
        let trans = || exact.transitions.iter().zip(&est.transitions);
        Ok(ComparisonReport {
            kl: avg_kl(exact, est)?,
            l1: avg_l1(exact, est)?,
            decode_match: decode_match(exact, est)?,
            transition_kl: mean(trans().map(|(p, q)| kl(p, q))),
            transition_l1: mean(trans().map(|(p, q)| l1(p, q))),
            per_level,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    /// One row per level plus an `all` row.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["level", "kl", "l1", "decode_match"])?;
        for r in &self.per_level {
            w.write_record([
                r.level.to_string(),
                r.kl.to_string(),
                r.l1.to_string(),
                r.decode_match.to_string(),
            ])?;
        }
        w.write_record([
            "all".to_string(),
            self.kl.to_string(),
            self.l1.to_string(),
            self.decode_match.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))
    }
}

impl ComparisonReport {
    /// `(name, value)` pairs in a fixed order, including per-level entries.
    pub fn entries(&self) -> Vec<(String, f64)> {
        let mut out = vec![
            ("avg_kl".to_string(), self.kl),
            ("avg_l1".to_string(), self.l1),
            ("decode_match".to_string(), self.decode_match),
            ("transition_kl".to_string(), self.transition_kl),
            ("transition_l1".to_string(), self.transition_l1),
        ];
        for r in &self.per_level {
            out.push((format!("level{}_kl", r.level), r.kl));
            out.push((format!("level{}_l1", r.level), r.l1));
            out.push((format!("level{}_decode_match", r.level), r.decode_match));
        }
        out
    }
}

/// Mean and standard deviation of each metric across sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub sequences: usize,
    pub mean: std::collections::BTreeMap<String, f64>,
    pub std: std::collections::BTreeMap<String, f64>,
}

impl AggregateReport {
    pub fn from_reports(reports: &[ComparisonReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let n = reports.len() as f64;
        let mut mean = std::collections::BTreeMap::new();
        let mut std = std::collections::BTreeMap::new();
        for (i, (name, _)) in reports[0].entries().into_iter().enumerate() {
            let xs: Vec<f64> = reports.iter().map(|r| r.entries()[i].1).collect();
            let m = xs.iter().sum::<f64>() / n;
            let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
            mean.insert(name.clone(), m);
            std.insert(name, v.sqrt());
        }
        Ok(AggregateReport {
            sequences: reports.len(),
            mean,
            std,
        })
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// CSV with one `sequence,metric,value` row per metric of every report.
pub fn write_metric_rows(
    path: impl AsRef<Path>,
    reports: &[(String, ComparisonReport)],
) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["sequence", "metric", "value"])?;
    for (id, r) in reports {
        for (name, value) in r.entries() {
            w.write_record([id.as_str(), name.as_str(), value.to_string().as_str()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(states: Vec<Vec<Vec<f64>>>) -> MarginalSet {
        let len = states[0].len();
        let depth = states.len();
        MarginalSet {
            states,
            transitions: vec![vec![1.0 / depth as f64; depth]; len - 1],
            log_partition: None,
        }
    }

    #[test]
    fn identical_sets_score_perfectly() {
        let a = set(vec![
            vec![vec![1.0]; 2],
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
        ]);
        let r = ComparisonReport::compare(&a, &a).unwrap();
        assert!(r.kl.abs() < 1e-15);
        assert_eq!(r.l1, 0.0);
        assert_eq!(r.decode_match, 1.0);
    }

    #[test]
    fn zero_estimate_gives_finite_kl() {
        let p = [0.5, 0.5];
        let q = [1.0, 0.0];
        let v = kl(&p, &q);
        assert!(v.is_finite() && v > 5.0);
        // Floor 1e-10 renormalized: 0.5 ln(0.5 (1+1e-10)) + 0.5 ln(0.5 (1+1e-10) / 1e-10).
        let z: f64 = 1.0 + 1e-10;
        let want = 0.5 * (0.5 * z).ln() + 0.5 * (0.5 * z / 1e-10).ln();
        assert!((v - want).abs() < 1e-12);
    }

    #[test]
    fn hand_values() {
        let a = set(vec![
            vec![vec![1.0]; 2],
            vec![vec![0.5, 0.5], vec![1.0, 0.0]],
        ]);
        let b = set(vec![
            vec![vec![1.0]; 2],
            vec![vec![0.25, 0.75], vec![0.0, 1.0]],
        ]);
        // Cells: two trivial, then l1 0.5 and 2.0.
        assert!((avg_l1(&a, &b).unwrap() - 2.5 / 4.0).abs() < 1e-15);
        // Decodes: trivial cells agree, (0 vs 1), (0 vs 1).
        assert_eq!(decode_match(&a, &b).unwrap(), 0.5);
        let kl_cell = 0.5 * (0.5f64 / 0.25).ln() + 0.5 * (0.5f64 / 0.75).ln();
        let k = avg_kl(&a, &b).unwrap();
        assert!(k > kl_cell / 4.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = set(vec![vec![vec![1.0]; 2], vec![vec![0.5, 0.5]; 2]]);
        let b = set(vec![vec![vec![1.0]; 3], vec![vec![0.5, 0.5]; 3]]);
        assert!(matches!(avg_kl(&a, &b), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn metric_rows_and_aggregate() {
        let a = set(vec![
            vec![vec![1.0]; 2],
            vec![vec![0.5, 0.5], vec![1.0, 0.0]],
        ]);
        let b = set(vec![
            vec![vec![1.0]; 2],
            vec![vec![0.25, 0.75], vec![0.0, 1.0]],
        ]);
        let r1 = ComparisonReport::compare(&a, &a).unwrap();
        let r2 = ComparisonReport::compare(&a, &b).unwrap();
        let agg = AggregateReport::from_reports(&[r1.clone(), r2.clone()]).unwrap();
        assert_eq!(agg.sequences, 2);
        assert!((agg.mean["avg_l1"] - r2.l1 / 2.0).abs() < 1e-15);
        assert!((agg.std["decode_match"] - 0.25).abs() < 1e-15);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rows.csv");
        write_metric_rows(&p, &[("s0".into(), r1), ("s1".into(), r2)]).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().next().unwrap(), "sequence,metric,value");
        assert_eq!(text.lines().count(), 1 + 2 * (5 + 3 * 2));
        assert!(text.contains("s1,decode_match,0.5"));
    }

    #[test]
    fn csv_has_level_rows() {
        let a = set(vec![
            vec![vec![1.0]; 2],
            vec![vec![0.3, 0.7], vec![0.6, 0.4]],
        ]);
        let r = ComparisonReport::compare(&a, &a).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        r.write_csv(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.lines().last().unwrap().starts_with("all,"));
    }
}
