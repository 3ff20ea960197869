//! Rao-Blackwellised Gibbs sampling over the transition levels.
//!
//! The chain state is the vector `e` of interior transition levels only; the
//! state grid is always summed out. Each site update draws
//! `e_t ~ P(e_t | e_¬t, o) ∝ Σ_x Φ(x, e, o)`, and the state-marginal estimate
//! averages the exact conditional marginals `P(x | e, o)` of the kept samples.
//!
//! Two sweep implementations produce the same conditionals: the naive sweep
//! re-evaluates the whole collapsed tree for each candidate level, and the
//! incremental sweep walks left to right reusing forward and backward tables.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{StateGrid, TransitionLevels};
use crate::error::{Error, Result};
use crate::logspace::normalize_log;
use crate::marginals::MarginalSet;
use crate::model::{Model, ObservationSequence};
use crate::tree::{sample_grid, tree_log_sum, tree_state_marginals};
use crate::walking::{OpenTables, Walker};

/// Picks an index from a probability vector.
pub trait Draw {
    fn pick(&mut self, probs: &[f64]) -> usize;
}

impl<R: Rng> Draw for R {
    fn pick(&mut self, probs: &[f64]) -> usize {
        inverse_cdf(self.random::<f64>(), probs)
    }
}

/// Deterministic stand-in for a random source: always takes the most probable
/// index (lowest index on ties).
#[derive(Debug, Default, Clone, Copy)]
pub struct ArgmaxDraw;

impl Draw for ArgmaxDraw {
    fn pick(&mut self, probs: &[f64]) -> usize {
        argmax(probs)
    }
}

/// First index whose cumulative probability exceeds `u`; zero entries are never chosen.
pub fn inverse_cdf(u: f64, probs: &[f64]) -> usize {
    let mut acc = 0.0;
    let mut last = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
    }
    last
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn check_inputs(model: &Model, o: &ObservationSequence, e: &TransitionLevels) -> Result<()> {
    model.check_observations(o)?;
    if e.length() != o.len() {
        return Err(Error::MalformedLevels(format!(
            "levels describe length {}, observations have length {}",
            e.length(),
            o.len()
        )));
    }
    e.check(model.topology())
}

/// `P(e_t = k | e_¬t, o)` for every level `k`, by re-evaluating the collapsed tree
/// once per candidate. Non-candidate levels get probability zero.
pub fn gibbs_conditional(
    model: &Model,
    o: &ObservationSequence,
    e: &TransitionLevels,
    t: usize,
) -> Result<Vec<f64>> {
    check_inputs(model, o, e)?;
    if t + 1 >= o.len() {
        return Err(Error::BoundaryOutOfRange { t, length: o.len() });
    }
    let mut scratch = e.clone();
    let mut logs = vec![f64::NEG_INFINITY; model.depth()];
    for k in model.topology().candidate_levels() {
        scratch.0[t] = k;
        logs[k] = tree_log_sum(model, o, &scratch)?;
    }
    Ok(normalize_log(&logs))
}

/// Conditionals used at each boundary during one sweep, in visiting order.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepTrace {
    pub conditionals: Vec<Vec<f64>>,
}

struct WalkCache {
    forward: Vec<OpenTables>,
    backward: Vec<OpenTables>,
}

/// How kept samples are turned into state-marginal estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Estimator {
    /// Average the exact `P(x | e, o)` of each kept `e`.
    #[default]
    RaoBlackwell,
    /// Draw one grid from `P(x | e, o)` per kept `e` and bin it.
    SampledGrid,
}

/// A single Gibbs chain over transition levels with its running estimates.
pub struct GibbsChainState {
    levels: TransitionLevels,
    iteration: usize,
    burn_in: usize,
    seed: u64,
    rng: ChaCha8Rng,
    grid_rng: ChaCha8Rng,
    state_sums: Vec<Vec<Vec<f64>>>,
    transition_counts: Vec<Vec<u64>>,
    kept: usize,
    cache: Option<WalkCache>,
}

impl GibbsChainState {
    /// Starts from the finest segmentation (every boundary at the bottom level).
    pub fn new(model: &Model, o: &ObservationSequence, burn_in: usize, seed: u64) -> Result<Self> {
        let levels = TransitionLevels::finest(o.len(), model.depth());
        check_inputs(model, o, &levels)?;
        let topo = model.topology();
        Ok(GibbsChainState {
            levels,
            iteration: 0,
            burn_in,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            grid_rng: ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15),
            state_sums: (0..topo.depth)
                .map(|level| vec![vec![0.0; topo.size(level)]; o.len()])
                .collect(),
            transition_counts: vec![vec![0; topo.depth]; o.len() - 1],
            kept: 0,
            cache: None,
        })
    }

    pub fn levels(&self) -> &TransitionLevels {
        &self.levels
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn burn_in(&self) -> usize {
        self.burn_in
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn samples_kept(&self) -> usize {
        self.kept
    }

    /// Replaces the current levels (for example to start from a chosen point).
    pub fn set_levels(
        &mut self,
        model: &Model,
        o: &ObservationSequence,
        levels: TransitionLevels,
    ) -> Result<()> {
        check_inputs(model, o, &levels)?;
        self.levels = levels;
        self.cache = None;
        Ok(())
    }

    /// One left-to-right sweep re-evaluating the collapsed tree per candidate.
    pub fn sweep_naive(&mut self, model: &Model, o: &ObservationSequence) -> Result<SweepTrace> {
        let mut rng = self.rng.clone();
        let trace = self.sweep_naive_with(model, o, &mut rng);
        self.rng = rng;
        trace
    }

    pub fn sweep_naive_with(
        &mut self,
        model: &Model,
        o: &ObservationSequence,
        draw: &mut impl Draw,
    ) -> Result<SweepTrace> {
        check_inputs(model, o, &self.levels)?;
        self.cache = None;
        let mut conditionals = Vec::with_capacity(o.len() - 1);
        for t in 0..o.len() - 1 {
            let probs = gibbs_conditional(model, o, &self.levels, t)?;
            self.levels.0[t] = draw.pick(&probs);
            conditionals.push(probs);
        }
        self.iteration += 1;
        Ok(SweepTrace { conditionals })
    }

    /// One left-to-right sweep reusing walking-chain tables; same conditionals
    /// as [`GibbsChainState::sweep_naive`] at linear cost in the length.
    pub fn sweep_incremental(
        &mut self,
        model: &Model,
        o: &ObservationSequence,
    ) -> Result<SweepTrace> {
        let mut rng = self.rng.clone();
        let trace = self.sweep_incremental_with(model, o, &mut rng);
        self.rng = rng;
        trace
    }

    pub fn sweep_incremental_with(
        &mut self,
        model: &Model,
        o: &ObservationSequence,
        draw: &mut impl Draw,
    ) -> Result<SweepTrace> {
        check_inputs(model, o, &self.levels)?;
        let walker = Walker::new(model, o);
        let backward = match self.cache.take() {
            Some(cache) => cache.backward,
            None => walker.backward_all(&self.levels),
        };
        let cands = model.topology().candidate_levels();
        let n = o.len();
        let mut forward = Vec::with_capacity(n);
        forward.push(walker.first());
        let mut conditionals = Vec::with_capacity(n - 1);
        for t in 0..n - 1 {
            let probs = walker.boundary_conditional(&forward[t], &backward[t + 1], cands.clone());
            let k = draw.pick(&probs);
            self.levels.0[t] = k;
            let next = walker.step_forward(&forward[t], k, t);
            forward.push(next);
            conditionals.push(probs);
        }
        let backward = walker.backward_all(&self.levels);
        self.cache = Some(WalkCache { forward, backward });
        self.iteration += 1;
        Ok(SweepTrace { conditionals })
    }

    /// `P(x_t^level | e, o)` for the current levels.
    pub fn current_state_marginals(
        &mut self,
        model: &Model,
        o: &ObservationSequence,
    ) -> Result<Vec<Vec<Vec<f64>>>> {
        match &self.cache {
            Some(cache) => {
                Ok(Walker::new(model, o).state_marginals(&cache.forward, &cache.backward))
            }
            None => tree_state_marginals(model, o, &self.levels),
        }
    }

    /// Adds the current sample to the accumulators once past burn-in.
    pub fn record(
        &mut self,
        model: &Model,
        o: &ObservationSequence,
        estimator: Estimator,
    ) -> Result<bool> {
        if self.iteration <= self.burn_in {
            return Ok(false);
        }
        match estimator {
            Estimator::RaoBlackwell => {
                let marg = self.current_state_marginals(model, o)?;
                for (acc, m) in self
                    .state_sums
                    .iter_mut()
                    .flatten()
                    .zip(marg.iter().flatten())
                {
                    for (a, b) in acc.iter_mut().zip(m) {
                        *a += b;
                    }
                }
            }
            Estimator::SampledGrid => {
                let grid = sample_grid(model, o, &self.levels, &mut self.grid_rng)?;
                for (level, rows) in self.state_sums.iter_mut().enumerate() {
                    for (t, row) in rows.iter_mut().enumerate() {
                        row[grid.get(level, t)] += 1.0;
                    }
                }
            }
        }
        for (t, &k) in self.levels.0.iter().enumerate() {
            self.transition_counts[t][k] += 1;
        }
        self.kept += 1;
        Ok(true)
    }

    /// Raw running sums `(state sums, transition counts)`.
    fn sums(&self) -> (&Vec<Vec<Vec<f64>>>, &Vec<Vec<u64>>) {
        (&self.state_sums, &self.transition_counts)
    }

    /// Normalized estimates from the kept samples.
    pub fn estimate(&self) -> Result<MarginalSet> {
        if self.kept == 0 {
            return Err(Error::AllSamplesBurned {
                n_iters: self.iteration,
                burn_in: self.burn_in,
            });
        }
        let n = self.kept as f64;
        Ok(MarginalSet {
            states: self
                .state_sums
                .iter()
                .map(|rows| {
                    rows.iter()
                        .map(|row| row.iter().map(|x| x / n).collect())
                        .collect()
                })
                .collect(),
            transitions: self
                .transition_counts
                .iter()
                .map(|row| row.iter().map(|&c| c as f64 / n).collect())
                .collect(),
            log_partition: None,
        })
    }
}

/// Settings for [`run_chain`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainConfig {
    pub n_iters: usize,
    pub burn_in_fraction: f64,
    pub seed: u64,
    #[serde(default)]
    pub estimator: Estimator,
    /// Independent chains whose estimates are averaged; chain `c` uses seed `seed + c`.
    #[serde(default = "one")]
    pub chains: usize,
    /// Use the incremental sweep (the naive sweep is kept for verification).
    #[serde(default = "yes")]
    pub incremental: bool,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

impl ChainConfig {
    pub fn new(n_iters: usize, burn_in_fraction: f64, seed: u64) -> Self {
        ChainConfig {
            n_iters,
            burn_in_fraction,
            seed,
            estimator: Estimator::RaoBlackwell,
            chains: 1,
            incremental: true,
        }
    }

    /// Discarded sweeps: `⌈burn_in_fraction · n_iters⌉`.
    pub fn burn_in(&self) -> usize {
        (self.burn_in_fraction * self.n_iters as f64).ceil() as usize
    }

    fn check(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::InvalidSettings("n_iters must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.burn_in_fraction) {
            return Err(Error::InvalidSettings(format!(
                "burn-in fraction {} must lie in [0, 1)",
                self.burn_in_fraction
            )));
        }
        if self.chains == 0 {
            return Err(Error::InvalidSettings(
                "at least one chain is required".into(),
            ));
        }
        if self.burn_in() >= self.n_iters {
            return Err(Error::AllSamplesBurned {
                n_iters: self.n_iters,
                burn_in: self.burn_in(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerReport {
    pub marginals: MarginalSet,
    pub samples_kept: usize,
    pub seconds_per_sweep: f64,
    pub seed: u64,
    pub n_iters: usize,
    pub burn_in: usize,
}

/// JSON manifest written next to exported estimates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub n_iters: usize,
    pub burn_in: usize,
    pub wall_clock_per_sweep: f64,
}

impl RunManifest {
    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

impl SamplerReport {
    pub fn manifest(&self) -> RunManifest {
        RunManifest {
            seed: self.seed,
            n_iters: self.n_iters,
            burn_in: self.burn_in,
            wall_clock_per_sweep: self.seconds_per_sweep,
        }
    }
}

/// Runs burn-in then accumulates estimates for the remaining sweeps.
pub fn run_chain(
    model: &Model,
    o: &ObservationSequence,
    config: &ChainConfig,
) -> Result<SamplerReport> {
    config.check()?;
    let burn_in = config.burn_in();
    let mut estimates = Vec::with_capacity(config.chains);
    let mut seconds = 0.0;
    let mut kept = 0;
    for c in 0..config.chains {
        let mut chain =
            GibbsChainState::new(model, o, burn_in, config.seed.wrapping_add(c as u64))?;
        let start = Instant::now();
        for _ in 0..config.n_iters {
            if config.incremental {
                chain.sweep_incremental(model, o)?;
            } else {
                chain.sweep_naive(model, o)?;
            }
            chain.record(model, o, config.estimator)?;
        }
        seconds += start.elapsed().as_secs_f64();
        kept += chain.samples_kept();
        estimates.push(chain.estimate()?);
    }
    let marginals = if estimates.len() == 1 {
        estimates.pop().expect("one chain")
    } else {
        average(&estimates)
    };
    Ok(SamplerReport {
        marginals,
        samples_kept: kept,
        seconds_per_sweep: seconds / (config.n_iters * config.chains) as f64,
        seed: config.seed,
        n_iters: config.n_iters,
        burn_in,
    })
}

/// Single-chain Rao-Blackwellised run with the default estimator.
pub fn run_rbgs(
    model: &Model,
    o: &ObservationSequence,
    n_iters: usize,
    burn_in_fraction: f64,
    seed: u64,
) -> Result<SamplerReport> {
    run_chain(model, o, &ChainConfig::new(n_iters, burn_in_fraction, seed))
}

fn average(sets: &[MarginalSet]) -> MarginalSet {
    let n = sets.len() as f64;
    let mut out = sets[0].clone();
    for (i, s) in sets.iter().enumerate().skip(1) {
        let _ = i;
        for (a, b) in out
            .states
            .iter_mut()
            .flatten()
            .flatten()
            .zip(s.states.iter().flatten().flatten())
        {
            *a += b;
        }
        for (a, b) in out
            .transitions
            .iter_mut()
            .flatten()
            .zip(s.transitions.iter().flatten())
        {
            *a += b;
        }
    }
    out.states
        .iter_mut()
        .flatten()
        .flatten()
        .for_each(|x| *x /= n);
    out.transitions.iter_mut().flatten().for_each(|x| *x /= n);
    out
}

/// Iteration mark with cumulative state sums and transition counts.
type Snapshot = (usize, Vec<Vec<Vec<f64>>>, Vec<Vec<u64>>);

/// Runs one growing chain and reports, for each checkpoint `N`, the estimate
/// that a fresh run of `N` sweeps with the same seed and burn-in fraction
/// would produce (burn-in `⌈fraction · N⌉`, prefix of the same trajectory).
pub fn run_checkpoints(
    model: &Model,
    o: &ObservationSequence,
    checkpoints: &[usize],
    burn_in_fraction: f64,
    seed: u64,
) -> Result<Vec<(usize, MarginalSet)>> {
    let configs: Vec<ChainConfig> = checkpoints
        .iter()
        .map(|&n| ChainConfig::new(n, burn_in_fraction, seed))
        .collect();
    for c in &configs {
        c.check()?;
    }
    if checkpoints.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::InvalidSettings(
            "checkpoints must be strictly increasing".into(),
        ));
    }
    let last = *checkpoints
        .last()
        .ok_or_else(|| Error::InvalidSettings("no checkpoints".into()))?;
    let mut marks: Vec<usize> = configs
        .iter()
        .flat_map(|c| [c.burn_in(), c.n_iters])
        .collect();
    marks.sort_unstable();
    marks.dedup();

    // Accumulate from iteration 1 and snapshot cumulative sums at every mark.
    let mut chain = GibbsChainState::new(model, o, 0, seed)?;
    let mut snapshots: Vec<Snapshot> = Vec::new();
    if marks.first() == Some(&0) {
        let (s, c) = chain.sums();
        snapshots.push((0, s.clone(), c.clone()));
    }
    for it in 1..=last {
        chain.sweep_incremental(model, o)?;
        chain.record(model, o, Estimator::RaoBlackwell)?;
        if marks.binary_search(&it).is_ok() {
            let (s, c) = chain.sums();
            snapshots.push((it, s.clone(), c.clone()));
        }
    }
    let find = |it: usize| {
        snapshots
            .iter()
            .find(|s| s.0 == it)
            .expect("snapshot recorded")
    };
    Ok(configs
        .iter()
        .map(|c| {
            let (_, hi_s, hi_c) = find(c.n_iters);
            let (_, lo_s, lo_c) = find(c.burn_in());
            let kept = (c.n_iters - c.burn_in()) as f64;
            let states = hi_s
                .iter()
                .zip(lo_s)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q) / kept).collect())
                        .collect()
                })
                .collect();
            let transitions = hi_c
                .iter()
                .zip(lo_c)
                .map(|(a, b)| {
                    a.iter()
                        .zip(b)
                        .map(|(p, q)| (p - q) as f64 / kept)
                        .collect()
                })
                .collect();
            (
                c.n_iters,
                MarginalSet {
                    states,
                    transitions,
                    log_partition: None,
                },
            )
        })
        .collect())
}

/// Maximal-marginal state per cell, lowest id on ties.
pub fn decode(m: &MarginalSet) -> StateGrid {
    StateGrid(
        m.states
            .iter()
            .map(|rows| rows.iter().map(|row| argmax(row)).collect())
            .collect(),
    )
}
