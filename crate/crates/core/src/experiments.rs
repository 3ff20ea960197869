//! Convergence and length-scaling studies comparing sampled and exact marginals.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exact::CollapsedSliceChain;
use crate::marginals::MarginalSet;
use crate::metrics::ComparisonReport;
use crate::model::{Model, ObservationSequence};
use crate::rbgs::{run_checkpoints, run_rbgs};

pub const CONVERGENCE_CHECKPOINTS: [usize; 7] = [10, 50, 100, 500, 1000, 2000, 5000];
pub const SCALING_LENGTHS: [usize; 5] = [20, 40, 60, 80, 100];
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Convergence,
    Scaling,
}

/// Sweeps allotted to a sequence of length `T`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BudgetRule {
    Fixed { iterations: usize },
    Linear { per_step: f64 },
    Quadratic { per_step_squared: f64 },
}

impl BudgetRule {
    /// 100 sweeps regardless of length.
    pub fn fixed() -> Self {
        BudgetRule::Fixed { iterations: 100 }
    }

    /// `5 T` sweeps.
    pub fn linear() -> Self {
        BudgetRule::Linear { per_step: 5.0 }
    }

    /// `T² / 4` sweeps.
    pub fn quadratic() -> Self {
        BudgetRule::Quadratic {
            per_step_squared: 0.25,
        }
    }

    pub fn by_name(name: &str) -> Option<Self> {
        match name {
            "fixed" => Some(Self::fixed()),
            "linear" => Some(Self::linear()),
            "quadratic" => Some(Self::quadratic()),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            BudgetRule::Fixed { .. } => "fixed",
            BudgetRule::Linear { .. } => "linear",
            BudgetRule::Quadratic { .. } => "quadratic",
        }
    }

    pub fn iterations(&self, length: usize) -> usize {
        let t = length as f64;
        match *self {
            BudgetRule::Fixed { iterations } => iterations,
            BudgetRule::Linear { per_step } => (per_step * t).round() as usize,
            BudgetRule::Quadratic { per_step_squared } => {
                (per_step_squared * t * t).round() as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub mode: Mode,
    /// Sequence lengths for scaling; ignored for convergence.
    pub lengths: Vec<usize>,
    pub budgets: Vec<BudgetRule>,
    /// Sweep counts at which convergence estimates are reported.
    pub checkpoints: Vec<usize>,
    pub burn_in_fraction: f64,
    /// Sequence `i` uses seed `seed + i`.
    pub seed: u64,
    /// Timed repetitions per measurement; the median is reported.
    pub timing_runs: usize,
    /// Use at most this many sequences.
    #[serde(default)]
    pub max_sequences: Option<usize>,
}

impl ExperimentPlan {
    pub fn convergence(seed: u64) -> Self {
        ExperimentPlan {
            mode: Mode::Convergence,
            lengths: Vec::new(),
            budgets: Vec::new(),
            checkpoints: CONVERGENCE_CHECKPOINTS.to_vec(),
            burn_in_fraction: 0.1,
            seed,
            timing_runs: 1,
            max_sequences: None,
        }
    }

    pub fn scaling(seed: u64) -> Self {
        ExperimentPlan {
            mode: Mode::Scaling,
            lengths: SCALING_LENGTHS.to_vec(),
            budgets: vec![
                BudgetRule::fixed(),
                BudgetRule::linear(),
                BudgetRule::quadratic(),
            ],
            checkpoints: Vec::new(),
            burn_in_fraction: 0.1,
            seed,
            timing_runs: 3,
            max_sequences: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSettings(m.to_string()));
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return bad("burn-in fraction must lie in [0, 1)");
        }
        if self.timing_runs == 0 {
            return bad("timing_runs must be positive");
        }
        if self.max_sequences == Some(0) {
            return bad("max_sequences must be positive");
        }
        match self.mode {
            Mode::Convergence => {
                if self.checkpoints.is_empty() || self.checkpoints.windows(2).any(|w| w[0] >= w[1])
                {
                    return bad("checkpoints must be non-empty and strictly increasing");
                }
            }
            Mode::Scaling => {
                if self.lengths.is_empty() || self.lengths.windows(2).any(|w| w[0] >= w[1]) {
                    return bad("lengths must be non-empty and strictly increasing");
                }
                if self.lengths[0] < 2 {
                    return bad("lengths must be at least 2");
                }
                if self.budgets.is_empty() {
                    return bad("at least one budget rule is required");
                }
                for b in &self.budgets {
                    for &t in &self.lengths {
                        if b.iterations(t) == 0 {
                            return bad("every budget must give at least one sweep");
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let plan: ExperimentPlan = serde_json::from_str(&text)?;
        plan.validate()?;
        Ok(plan)
    }

    fn take<'a>(&self, seqs: &'a [ObservationSequence]) -> Result<&'a [ObservationSequence]> {
        if seqs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        Ok(&seqs[..self.max_sequences.map_or(seqs.len(), |n| n.min(seqs.len()))])
    }
}

/// Mean and population standard deviation.
fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceCheckpoint {
    pub sequence: usize,
    pub checkpoint: usize,
    pub kl: f64,
    pub l1: f64,
    pub decode_match: f64,
}

/// Metrics at one checkpoint averaged over sequences.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub checkpoint: usize,
    pub avg_kl: f64,
    pub avg_l1: f64,
    pub decode_match: f64,
    pub kl_std: f64,
    pub l1_std: f64,
    pub decode_match_std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvergenceStudy {
    pub rows: Vec<ConvergenceRow>,
    pub per_sequence: Vec<SequenceCheckpoint>,
    pub seeds: Vec<u64>,
}

/// One growing chain per sequence, compared with exact marginals at every checkpoint.
pub fn run_convergence_study(
    model: &Model,
    sequences: &[ObservationSequence],
    plan: &ExperimentPlan,
) -> Result<ConvergenceStudy> {
    plan.validate()?;
    let seqs = plan.take(sequences)?;
    let chain = CollapsedSliceChain::new(model)?;
    let mut per_sequence = Vec::new();
    let mut seeds = Vec::new();
    for (i, o) in seqs.iter().enumerate() {
        let seed = plan.seed.wrapping_add(i as u64);
        seeds.push(seed);
        let exact = chain.marginals(model, o)?;
        for (checkpoint, est) in
            run_checkpoints(model, o, &plan.checkpoints, plan.burn_in_fraction, seed)?
        {
            let r = ComparisonReport::compare(&exact, &est)?;
            per_sequence.push(SequenceCheckpoint {
                sequence: i,
                checkpoint,
                kl: r.kl,
                l1: r.l1,
                decode_match: r.decode_match,
            });
        }
        log::info!("convergence: sequence {} of {} done", i + 1, seqs.len());
    }
    let rows = plan
        .checkpoints
        .iter()
        .map(|&c| {
            let sel: Vec<&SequenceCheckpoint> =
                per_sequence.iter().filter(|r| r.checkpoint == c).collect();
            let (avg_kl, kl_std) = mean_std(&sel.iter().map(|r| r.kl).collect::<Vec<_>>());
            let (avg_l1, l1_std) = mean_std(&sel.iter().map(|r| r.l1).collect::<Vec<_>>());
            let (dm, dm_std) = mean_std(&sel.iter().map(|r| r.decode_match).collect::<Vec<_>>());
            ConvergenceRow {
                checkpoint: c,
                avg_kl,
                avg_l1,
                decode_match: dm,
                kl_std,
                l1_std,
                decode_match_std: dm_std,
            }
        })
        .collect();
    Ok(ConvergenceStudy {
        rows,
        per_sequence,
        seeds,
    })
}

impl ConvergenceStudy {
    pub fn row(&self, checkpoint: usize) -> Option<&ConvergenceRow> {
        self.rows.iter().find(|r| r.checkpoint == checkpoint)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.rows)
    }

    pub fn write_per_sequence_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.per_sequence)
    }
}

/// Builds, for each base sequence `j`, a sequence of length `length` by
/// concatenating base sequences `j, j+1, …` (cyclically) and truncating.
pub fn concatenate_to_length(
    base: &[ObservationSequence],
    length: usize,
) -> Result<Vec<ObservationSequence>> {
    if base.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let alphabet = base[0].alphabet_size();
    (0..base.len())
        .map(|j| {
            let symbols: Vec<usize> = base
                .iter()
                .cycle()
                .skip(j)
                .take(base.len())
                .flat_map(|s| s.symbols().iter().copied())
                .cycle()
                .take(length)
                .collect();
            ObservationSequence::new(symbols, alphabet)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingRow {
    pub length: usize,
    pub budget: String,
    pub iterations: usize,
    /// Mean over sequences of the median exact-inference time, seconds.
    pub wall_clock_exact: f64,
    /// Mean over sequences of the median sampler time, seconds.
    pub wall_clock_rbgs: f64,
    pub seconds_per_sweep: f64,
    pub avg_kl: f64,
    pub avg_l1: f64,
    pub decode_match: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScalingStudy {
    pub rows: Vec<ScalingRow>,
    pub seeds: Vec<u64>,
}

impl ScalingStudy {
    pub fn row(&self, length: usize, budget: &str) -> Option<&ScalingRow> {
        self.rows
            .iter()
            .find(|r| r.length == length && r.budget == budget)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        write_rows(path, &self.rows)
    }
}

/// Exact and sampled inference on concatenated sequences of increasing length.
pub fn run_scaling_study(
    model: &Model,
    base: &[ObservationSequence],
    plan: &ExperimentPlan,
) -> Result<ScalingStudy> {
    plan.validate()?;
    let base = plan.take(base)?;
    let chain = CollapsedSliceChain::new(model)?;
    let seeds: Vec<u64> = (0..base.len())
        .map(|i| plan.seed.wrapping_add(i as u64))
        .collect();
    let mut rows = Vec::new();
    for &length in &plan.lengths {
        let seqs = concatenate_to_length(base, length)?;
        let mut exact = Vec::with_capacity(seqs.len());
        let mut exact_times = Vec::with_capacity(seqs.len());
        for o in &seqs {
            let mut times = Vec::with_capacity(plan.timing_runs);
            let mut result: Option<MarginalSet> = None;
            for _ in 0..plan.timing_runs {
                let start = Instant::now();
                let m = chain.marginals(model, o)?;
                times.push(start.elapsed().as_secs_f64());
                result = Some(m);
            }
            exact.push(result.expect("at least one timing run"));
            exact_times.push(median(times));
        }
        let wall_clock_exact = exact_times.iter().sum::<f64>() / seqs.len() as f64;
        for budget in &plan.budgets {
            let iterations = budget.iterations(length);
            let mut totals = Vec::new();
            let mut per_sweep = Vec::new();
            let mut reports = Vec::new();
            for ((o, ex), &seed) in seqs.iter().zip(&exact).zip(&seeds) {
                let mut times = Vec::with_capacity(plan.timing_runs);
                let mut est = None;
                for _ in 0..plan.timing_runs {
                    let start = Instant::now();
                    let r = run_rbgs(model, o, iterations, plan.burn_in_fraction, seed)?;
                    times.push(start.elapsed().as_secs_f64());
                    est = Some(r.marginals);
                }
                let t = median(times);
                totals.push(t);
                per_sweep.push(t / iterations as f64);
                reports.push(ComparisonReport::compare(
                    ex,
                    &est.expect("at least one timing run"),
                )?);
            }
            let n = seqs.len() as f64;
            rows.push(ScalingRow {
                length,
                budget: budget.name().to_string(),
                iterations,
                wall_clock_exact,
                wall_clock_rbgs: totals.iter().sum::<f64>() / n,
                seconds_per_sweep: per_sweep.iter().sum::<f64>() / n,
                avg_kl: reports.iter().map(|r| r.kl).sum::<f64>() / n,
                avg_l1: reports.iter().map(|r| r.l1).sum::<f64>() / n,
                decode_match: reports.iter().map(|r| r.decode_match).sum::<f64>() / n,
            });
            log::info!("scaling: T={length} budget {} done", budget.name());
        }
    }
    Ok(ScalingStudy { rows, seeds })
}

fn write_rows<T: Serialize>(path: impl AsRef<Path>, rows: &[T]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Written next to every study CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyManifest {
    pub version: String,
    pub plan: ExperimentPlan,
    pub seeds: Vec<u64>,
    /// Input files by role.
    pub inputs: BTreeMap<String, String>,
}

impl StudyManifest {
    pub fn new(plan: &ExperimentPlan, seeds: &[u64], inputs: BTreeMap<String, String>) -> Self {
        StudyManifest {
            version: VERSION.to_string(),
            plan: plan.clone(),
            seeds: seeds.to_vec(),
            inputs,
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}
