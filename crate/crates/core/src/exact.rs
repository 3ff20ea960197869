//! Exact inference.
//!
//! Two independent engines live here:
//!
//! * [`brute_force_posterior`] enumerates every configuration. It is only
//!   feasible for tiny instances and serves as the oracle for everything else.
//! * [`CollapsedSliceChain`] collapses all levels of one time step into a
//!   single slice variable (an admissible top-to-bottom state tuple) and runs
//!   forward-backward over the slices. Between consecutive slices the
//!   transition level `e_t` is summed inside the slice transition, so the
//!   chain's total mass over length-`T` paths is exactly `Σ_cfg Φ(cfg, o)`.
//!   Cost is linear in `T` and exponential in depth.

use crate::config::{enumerate_configurations, Configuration, TransitionLevels};
use crate::error::{Error, Result};
use crate::logspace::{log_add, log_sum_exp};
use crate::marginals::MarginalSet;
use crate::model::{log_joint_potential, Event, Model, ObservationSequence};

/// Default bound on the number of configurations the oracle will enumerate.
pub const ENUMERATION_LIMIT: u128 = 1_000_000;

/// Default cap on `#tuples × depth` for the collapsed chain.
pub const SLICE_STATE_CAP: usize = 10_000;

/// The full posterior over configurations of one observation sequence.
#[derive(Debug, Clone)]
pub struct BrutePosterior {
    pub configurations: Vec<Configuration>,
    pub log_potentials: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub log_partition: f64,
}

pub fn brute_force_posterior(model: &Model, o: &ObservationSequence) -> Result<BrutePosterior> {
    brute_force_posterior_with_limit(model, o, ENUMERATION_LIMIT)
}

pub fn brute_force_posterior_with_limit(
    model: &Model,
    o: &ObservationSequence,
    limit: u128,
) -> Result<BrutePosterior> {
    model.check_observations(o)?;
    let topo = model.topology();
    let configurations = enumerate_configurations(topo, o.len(), limit)?;
    let log_potentials = configurations
        .iter()
        .map(|cfg| log_joint_potential(model.params(), topo, o, cfg))
        .collect::<Result<Vec<_>>>()?;
    let log_partition = log_sum_exp(&log_potentials);
    let probabilities = log_potentials
        .iter()
        .map(|lp| (lp - log_partition).exp())
        .collect();
    Ok(BrutePosterior {
        configurations,
        log_potentials,
        probabilities,
        log_partition,
    })
}

impl BrutePosterior {
    /// State and transition marginals obtained by summing the table.
    pub fn marginals(&self, model: &Model) -> MarginalSet {
        let topo = model.topology();
        let length = self.configurations[0].levels.length();
        let mut states: Vec<Vec<Vec<f64>>> = (0..topo.depth)
            .map(|level| vec![vec![0.0; topo.size(level)]; length])
            .collect();
        let mut transitions = vec![vec![0.0; topo.depth]; length - 1];
        for (cfg, &p) in self.configurations.iter().zip(&self.probabilities) {
            for (level, row) in states.iter_mut().enumerate() {
                for (t, cell) in row.iter_mut().enumerate() {
                    cell[cfg.grid.get(level, t)] += p;
                }
            }
            for (t, &k) in cfg.levels.0.iter().enumerate() {
                transitions[t][k] += p;
            }
        }
        MarginalSet {
            states,
            transitions,
            log_partition: Some(self.log_partition),
        }
    }

    /// `P(e | o)` for every distinct transition-level vector, in first-seen order.
    pub fn level_posterior(&self) -> Vec<(TransitionLevels, f64)> {
        let mut out: Vec<(TransitionLevels, f64)> = Vec::new();
        let mut index = std::collections::HashMap::new();
        for (cfg, &p) in self.configurations.iter().zip(&self.probabilities) {
            let slot = *index.entry(cfg.levels.clone()).or_insert_with(|| {
                out.push((cfg.levels.clone(), 0.0));
                out.len() - 1
            });
            out[slot].1 += p;
        }
        out
    }

    /// `P(e_t = k | e_¬t, o)` over all levels `k`, from the enumerated table.
    pub fn conditional(&self, e: &TransitionLevels, t: usize, depth: usize) -> Vec<f64> {
        let mut weights = vec![0.0; depth];
        for (cfg, &p) in self.configurations.iter().zip(&self.probabilities) {
            let same_rest = cfg
                .levels
                .0
                .iter()
                .zip(&e.0)
                .enumerate()
                .all(|(s, (a, b))| s == t || a == b);
            if same_rest {
                weights[cfg.levels.0[t]] += p;
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter().map(|w| w / total).collect()
    }
}

/// Collapsed-slice chain over admissible state tuples.
#[derive(Debug, Clone)]
pub struct CollapsedSliceChain {
    depth: usize,
    tuples: Vec<Vec<usize>>,
    /// Log weight of opening every level at the first slice (observations excluded).
    start: Vec<f64>,
    /// Log weight of closing every level at the last slice.
    finish: Vec<f64>,
    transitions: Vec<SliceTransition>,
    /// Start/finish feature indices per tuple, for expected statistics.
    start_features: Vec<Vec<usize>>,
    finish_features: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
struct SliceTransition {
    from: usize,
    to: usize,
    level: usize,
    log_weight: f64,
    features: Vec<usize>,
}

/// Per-sequence forward/backward tables.
struct Messages {
    alpha: Vec<Vec<f64>>,
    beta: Vec<Vec<f64>>,
    log_partition: f64,
}

impl CollapsedSliceChain {
    pub fn new(model: &Model) -> Result<Self> {
        Self::with_cap(model, SLICE_STATE_CAP)
    }

    pub fn with_cap(model: &Model, cap: usize) -> Result<Self> {
        let topo = model.topology();
        let depth = topo.depth;
        let tuples = topo.admissible_tuples();
        let slice_states = tuples.len() * depth;
        if slice_states > cap {
            return Err(Error::DepthTooLarge { slice_states, cap });
        }
        let params = model.params();
        let layout = params.layout();
        let parent = |tuple: &[usize], level: usize| if level == 0 { 0 } else { tuple[level - 1] };

        let open = |tuple: &[usize], from: usize| -> Vec<Event> {
            (from..depth)
                .map(|level| Event::Init {
                    level,
                    parent: parent(tuple, level),
                    child: tuple[level],
                })
                .collect()
        };
        let close = |tuple: &[usize], from: usize| -> Vec<Event> {
            (from..depth)
                .map(|level| Event::End {
                    level,
                    parent: parent(tuple, level),
                    child: tuple[level],
                })
                .collect()
        };
        let sum = |events: &[Event]| events.iter().map(|&ev| params.weight(ev)).sum::<f64>();
        let indices = |events: &[Event]| {
            events
                .iter()
                .map(|&ev| layout.index(ev))
                .collect::<Vec<_>>()
        };

        let mut start = Vec::with_capacity(tuples.len());
        let mut finish = Vec::with_capacity(tuples.len());
        let mut start_features = Vec::with_capacity(tuples.len());
        let mut finish_features = Vec::with_capacity(tuples.len());
        for tuple in &tuples {
            let o = open(tuple, 0);
            let c = close(tuple, 0);
            start.push(sum(&o));
            finish.push(sum(&c));
            start_features.push(indices(&o));
            finish_features.push(indices(&c));
        }

        let mut transitions = Vec::new();
        for (i, a) in tuples.iter().enumerate() {
            for (j, b) in tuples.iter().enumerate() {
                let shared = a.iter().zip(b).take_while(|(x, y)| x == y).count();
                for level in topo.candidate_levels().filter(|&k| k <= shared) {
                    let mut events = vec![Event::Trans {
                        level,
                        parent: parent(a, level),
                        from: a[level],
                        to: b[level],
                    }];
                    events.extend(close(a, level + 1));
                    events.extend(open(b, level + 1));
                    transitions.push(SliceTransition {
                        from: i,
                        to: j,
                        level,
                        log_weight: sum(&events),
                        features: indices(&events),
                    });
                }
            }
        }
        Ok(CollapsedSliceChain {
            depth,
            tuples,
            start,
            finish,
            transitions,
            start_features,
            finish_features,
        })
    }

    pub fn tuple_count(&self) -> usize {
        self.tuples.len()
    }

    /// Number of slice states: admissible tuples × incoming transition level.
    pub fn slice_state_count(&self) -> usize {
        self.tuples.len() * self.depth
    }

    fn bottom(&self, i: usize) -> usize {
        self.tuples[i][self.depth - 1]
    }

    fn messages(&self, model: &Model, o: &ObservationSequence) -> Messages {
        let tables = model.log_tables();
        let n = self.tuples.len();
        let length = o.len();
        let obs = |i: usize, t: usize| tables.obs(self.bottom(i), o.at(t));
        let mut alpha = vec![vec![f64::NEG_INFINITY; n]; length];
        for i in 0..n {
            alpha[0][i] = self.start[i] + obs(i, 0);
        }
        for t in 1..length {
            let (prev, cur) = alpha.split_at_mut(t);
            let (prev, cur) = (&prev[t - 1], &mut cur[0]);
            for tr in &self.transitions {
                cur[tr.to] = log_add(cur[tr.to], prev[tr.from] + tr.log_weight);
            }
            for (j, a) in cur.iter_mut().enumerate() {
                *a += obs(j, t);
            }
        }
        let mut beta = vec![vec![f64::NEG_INFINITY; n]; length];
        beta[length - 1].clone_from(&self.finish);
        for t in (0..length - 1).rev() {
            let (cur, next) = beta.split_at_mut(t + 1);
            let (cur, next) = (&mut cur[t], &next[0]);
            for tr in &self.transitions {
                let v = tr.log_weight + obs(tr.to, t + 1) + next[tr.to];
                cur[tr.from] = log_add(cur[tr.from], v);
            }
        }
        let closing: Vec<f64> = (0..n)
            .map(|i| alpha[length - 1][i] + self.finish[i])
            .collect();
        Messages {
            alpha,
            beta,
            log_partition: log_sum_exp(&closing),
        }
    }

    pub fn log_partition(&self, model: &Model, o: &ObservationSequence) -> Result<f64> {
        model.check_observations(o)?;
        Ok(self.messages(model, o).log_partition)
    }

    pub fn marginals(&self, model: &Model, o: &ObservationSequence) -> Result<MarginalSet> {
        model.check_observations(o)?;
        let topo = model.topology();
        let tables = model.log_tables();
        let msg = self.messages(model, o);
        let z = msg.log_partition;
        let length = o.len();
        let mut states: Vec<Vec<Vec<f64>>> = (0..self.depth)
            .map(|level| vec![vec![0.0; topo.size(level)]; length])
            .collect();
        for t in 0..length {
            for (i, tuple) in self.tuples.iter().enumerate() {
                let p = (msg.alpha[t][i] + msg.beta[t][i] - z).exp();
                for (level, &s) in tuple.iter().enumerate() {
                    states[level][t][s] += p;
                }
            }
        }
        let mut transitions = vec![vec![0.0; self.depth]; length.saturating_sub(1)];
        for (t, row) in transitions.iter_mut().enumerate() {
            for tr in &self.transitions {
                let lp = msg.alpha[t][tr.from]
                    + tr.log_weight
                    + tables.obs(self.bottom(tr.to), o.at(t + 1))
                    + msg.beta[t + 1][tr.to]
                    - z;
                row[tr.level] += lp.exp();
            }
        }
        Ok(MarginalSet {
            states,
            transitions,
            log_partition: Some(z),
        })
    }

    /// `log Z(o)` and the expected feature counts `E[f(x, e, o)]` under the model.
    pub fn expected_counts(
        &self,
        model: &Model,
        o: &ObservationSequence,
    ) -> Result<(f64, Vec<f64>)> {
        model.check_observations(o)?;
        let tables = model.log_tables();
        let layout = model.params().layout();
        let msg = self.messages(model, o);
        let z = msg.log_partition;
        let length = o.len();
        let mut expected = vec![0.0; layout.len()];
        for (i, feats) in self.start_features.iter().enumerate() {
            let p = (msg.alpha[0][i] + msg.beta[0][i] - z).exp();
            for &f in feats {
                expected[f] += p;
            }
        }
        for (i, feats) in self.finish_features.iter().enumerate() {
            let p = (msg.alpha[length - 1][i] + msg.beta[length - 1][i] - z).exp();
            for &f in feats {
                expected[f] += p;
            }
        }
        for t in 0..length {
            for i in 0..self.tuples.len() {
                let p = (msg.alpha[t][i] + msg.beta[t][i] - z).exp();
                expected[layout.obs(self.bottom(i), o.at(t))] += p;
            }
        }
        for t in 0..length.saturating_sub(1) {
            let obs_next = o.at(t + 1);
            for tr in &self.transitions {
                let lp = msg.alpha[t][tr.from]
                    + tr.log_weight
                    + tables.obs(self.bottom(tr.to), obs_next)
                    + msg.beta[t + 1][tr.to]
                    - z;
                if lp == f64::NEG_INFINITY {
                    continue;
                }
                let p = lp.exp();
                for &f in &tr.features {
                    expected[f] += p;
                }
            }
        }
        Ok((z, expected))
    }
}

/// Exact state and transition marginals via the collapsed-slice chain.
pub fn exact_marginals(model: &Model, o: &ObservationSequence) -> Result<MarginalSet> {
    CollapsedSliceChain::new(model)?.marginals(model, o)
}
