//! Log-linear parameterization of the hierarchical semi-Markov CRF.
//!
//! The joint potential factorizes over events of the segmentation tree. Under
//! each parent segment (the top level sits under a single virtual root), the
//! chain of child segments contributes one `init` weight for its first child,
//! one `trans` weight per sibling-to-sibling move, and one `end` weight for its
//! last child. Every time step adds an `obs` weight coupling the bottom-level
//! state with the observed symbol.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::{check_configuration, segmentation_from_e, Configuration};
use crate::error::{Error, Result};
use crate::topology::Topology;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObservationSequence {
    symbols: Vec<usize>,
    alphabet_size: usize,
}

impl ObservationSequence {
    pub fn new(symbols: Vec<usize>, alphabet_size: usize) -> Result<Self> {
        if symbols.is_empty() {
            return Err(Error::InvalidObservation(
                "sequence must be non-empty".into(),
            ));
        }
        if let Some((t, &m)) = symbols
            .iter()
            .enumerate()
            .find(|(_, &m)| m >= alphabet_size)
        {
            return Err(Error::InvalidObservation(format!(
                "symbol {m} at position {t} is outside the alphabet of size {alphabet_size}"
            )));
        }
        Ok(ObservationSequence {
            symbols,
            alphabet_size,
        })
    }

    pub fn symbols(&self) -> &[usize] {
        &self.symbols
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet_size
    }

    #[inline]
    pub fn at(&self, t: usize) -> usize {
        self.symbols[t]
    }
}

/// A single factor firing in a configuration. `level` is the child level, so
/// `level == 0` refers to the top-level chain under the virtual root (parent 0).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Event {
    Init {
        level: usize,
        parent: usize,
        child: usize,
    },
    Trans {
        level: usize,
        parent: usize,
        from: usize,
        to: usize,
    },
    End {
        level: usize,
        parent: usize,
        child: usize,
    },
    Obs {
        state: usize,
        symbol: usize,
    },
}

/// Offsets of every weight group inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    sizes: Vec<usize>,
    alphabet: usize,
    init_off: Vec<usize>,
    trans_off: Vec<usize>,
    end_off: Vec<usize>,
    obs_off: usize,
    len: usize,
}

impl ParamLayout {
    pub fn new(states_per_level: &[usize], alphabet_size: usize) -> Self {
        let mut off = 0;
        let (mut init_off, mut trans_off, mut end_off) = (vec![], vec![], vec![]);
        for level in 0..states_per_level.len() {
            let p = if level == 0 {
                1
            } else {
                states_per_level[level - 1]
            };
            let s = states_per_level[level];
            init_off.push(off);
            off += p * s;
            trans_off.push(off);
            off += p * s * s;
            end_off.push(off);
            off += p * s;
        }
        let obs_off = off;
        off += states_per_level.last().copied().unwrap_or(0) * alphabet_size;
        ParamLayout {
            sizes: states_per_level.to_vec(),
            alphabet: alphabet_size,
            init_off,
            trans_off,
            end_off,
            obs_off,
            len: off,
        }
    }

    pub fn for_topology(topo: &Topology, alphabet_size: usize) -> Self {
        Self::new(&topo.states_per_level, alphabet_size)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn depth(&self) -> usize {
        self.sizes.len()
    }

    pub fn states_per_level(&self) -> &[usize] {
        &self.sizes
    }

    pub fn alphabet_size(&self) -> usize {
        self.alphabet
    }

    fn parent_size(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.sizes[level - 1]
        }
    }

    #[inline]
    pub fn init(&self, level: usize, parent: usize, child: usize) -> usize {
        self.init_off[level] + parent * self.sizes[level] + child
    }

    #[inline]
    pub fn trans(&self, level: usize, parent: usize, from: usize, to: usize) -> usize {
        let s = self.sizes[level];
        self.trans_off[level] + (parent * s + from) * s + to
    }

    #[inline]
    pub fn end(&self, level: usize, parent: usize, child: usize) -> usize {
        self.end_off[level] + parent * self.sizes[level] + child
    }

    #[inline]
    pub fn obs(&self, state: usize, symbol: usize) -> usize {
        self.obs_off + state * self.alphabet + symbol
    }

    pub fn index(&self, event: Event) -> usize {
        match event {
            Event::Init {
                level,
                parent,
                child,
            } => self.init(level, parent, child),
            Event::Trans {
                level,
                parent,
                from,
                to,
            } => self.trans(level, parent, from, to),
            Event::End {
                level,
                parent,
                child,
            } => self.end(level, parent, child),
            Event::Obs { state, symbol } => self.obs(state, symbol),
        }
    }
}

/// Real-valued log-potentials, stored flat according to a [`ParamLayout`].
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: ParamLayout,
    weights: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: ParamLayout) -> Self {
        let weights = vec![0.0; layout.len()];
        ModelParams { layout, weights }
    }

    pub fn from_weights(layout: ParamLayout, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "expected {} weights, got {}",
                layout.len(),
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite()) {
            return Err(Error::ShapeMismatch("weights must be finite".into()));
        }
        Ok(ModelParams { layout, weights })
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    #[inline]
    pub fn weight(&self, event: Event) -> f64 {
        self.weights[self.layout.index(event)]
    }

    /// Errors unless the parameter shapes match `topo` and `alphabet_size`.
    pub fn check_shape(&self, topo: &Topology, alphabet_size: usize) -> Result<()> {
        if self.layout.states_per_level() != topo.states_per_level.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "parameters have level sizes {:?}, topology has {:?}",
                self.layout.states_per_level(),
                topo.states_per_level
            )));
        }
        if self.layout.alphabet_size() != alphabet_size {
            return Err(Error::ShapeMismatch(format!(
                "parameters have alphabet size {}, observations use {}",
                self.layout.alphabet_size(),
                alphabet_size
            )));
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// JSON form of [`ModelParams`], keyed by weight group. `init`, `trans` and
/// `end` hold one entry per non-top level, indexed `[parent][child]` or
/// `[parent][from][to]`.
#[derive(Serialize, Deserialize)]
struct ParamsFile {
    states_per_level: Vec<usize>,
    alphabet_size: usize,
    root_init: Vec<f64>,
    root_trans: Vec<Vec<f64>>,
    root_end: Vec<f64>,
    init: Vec<Vec<Vec<f64>>>,
    trans: Vec<Vec<Vec<Vec<f64>>>>,
    end: Vec<Vec<Vec<f64>>>,
    obs: Vec<Vec<f64>>,
}

impl Serialize for ModelParams {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let l = &self.layout;
        let w = &self.weights;
        let sizes = l.states_per_level();
        let pair = |level: usize, f: &dyn Fn(usize, usize) -> usize| -> Vec<Vec<f64>> {
            (0..l.parent_size(level))
                .map(|p| (0..sizes[level]).map(|c| w[f(p, c)]).collect())
                .collect()
        };
        let triple = |level: usize| -> Vec<Vec<Vec<f64>>> {
            (0..l.parent_size(level))
                .map(|p| {
                    (0..sizes[level])
                        .map(|u| {
                            (0..sizes[level])
                                .map(|v| w[l.trans(level, p, u, v)])
                                .collect()
                        })
                        .collect()
                })
                .collect()
        };
        let depth = sizes.len();
        let file = ParamsFile {
            states_per_level: sizes.to_vec(),
            alphabet_size: l.alphabet_size(),
            root_init: pair(0, &|p, c| l.init(0, p, c)).remove(0),
            root_trans: triple(0).remove(0),
            root_end: pair(0, &|p, c| l.end(0, p, c)).remove(0),
            init: (1..depth)
                .map(|d| pair(d, &|p, c| l.init(d, p, c)))
                .collect(),
            trans: (1..depth).map(triple).collect(),
            end: (1..depth)
                .map(|d| pair(d, &|p, c| l.end(d, p, c)))
                .collect(),
            obs: (0..sizes[depth - 1])
                .map(|s| (0..l.alphabet_size()).map(|m| w[l.obs(s, m)]).collect())
                .collect(),
        };
        file.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for ModelParams {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = ParamsFile::deserialize(deserializer)?;
        let depth = f.states_per_level.len();
        if depth == 0 {
            return Err(D::Error::custom("states_per_level must be non-empty"));
        }
        let layout = ParamLayout::new(&f.states_per_level, f.alphabet_size);
        let mut w = vec![f64::NAN; layout.len()];
        let bad = |what: &str| D::Error::custom(format!("shape mismatch in {what}"));
        let sizes = &f.states_per_level;
        let put_pair = |level: usize, rows: &[Vec<f64>], end: bool, w: &mut Vec<f64>| {
            let ps = if level == 0 { 1 } else { sizes[level - 1] };
            if rows.len() != ps || rows.iter().any(|r| r.len() != sizes[level]) {
                return Err(bad(if end { "end" } else { "init" }));
            }
            for (p, row) in rows.iter().enumerate() {
                for (c, &x) in row.iter().enumerate() {
                    let i = if end {
                        layout.end(level, p, c)
                    } else {
                        layout.init(level, p, c)
                    };
                    w[i] = x;
                }
            }
            Ok(())
        };
        put_pair(0, std::slice::from_ref(&f.root_init), false, &mut w)?;
        put_pair(0, std::slice::from_ref(&f.root_end), true, &mut w)?;
        if f.init.len() != depth - 1 || f.end.len() != depth - 1 || f.trans.len() != depth - 1 {
            return Err(bad("level count"));
        }
        for d in 1..depth {
            put_pair(d, &f.init[d - 1], false, &mut w)?;
            put_pair(d, &f.end[d - 1], true, &mut w)?;
        }
        let put_triple = |level: usize, t: &[Vec<Vec<f64>>], w: &mut Vec<f64>| {
            let ps = if level == 0 { 1 } else { sizes[level - 1] };
            let s = sizes[level];
            if t.len() != ps
                || t.iter()
                    .any(|m| m.len() != s || m.iter().any(|r| r.len() != s))
            {
                return Err(bad("trans"));
            }
            for (p, m) in t.iter().enumerate() {
                for (u, r) in m.iter().enumerate() {
                    for (v, &x) in r.iter().enumerate() {
                        w[layout.trans(level, p, u, v)] = x;
                    }
                }
            }
            Ok(())
        };
        put_triple(0, std::slice::from_ref(&f.root_trans), &mut w)?;
        for d in 1..depth {
            put_triple(d, &f.trans[d - 1], &mut w)?;
        }
        if f.obs.len() != sizes[depth - 1] || f.obs.iter().any(|r| r.len() != f.alphabet_size) {
            return Err(bad("obs"));
        }
        for (s, row) in f.obs.iter().enumerate() {
            for (m, &x) in row.iter().enumerate() {
                w[layout.obs(s, m)] = x;
            }
        }
        ModelParams::from_weights(layout, w).map_err(D::Error::custom)
    }
}

/// Integer event counts, shaped like the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureVector {
    pub counts: Vec<u32>,
}

impl FeatureVector {
    pub fn dot(&self, params: &ModelParams) -> f64 {
        self.counts
            .iter()
            .zip(params.weights())
            .filter(|(&c, _)| c > 0)
            .map(|(&c, &w)| c as f64 * w)
            .sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Visits every event of a valid configuration exactly once.
pub fn for_each_event(
    cfg: &Configuration,
    o: &ObservationSequence,
    topo: &Topology,
    mut visit: impl FnMut(Event),
) -> Result<()> {
    check_configuration(cfg, topo)?;
    if o.len() != cfg.levels.length() {
        return Err(Error::ShapeMismatch(format!(
            "configuration has length {}, observations have length {}",
            cfg.levels.length(),
            o.len()
        )));
    }
    let tree = segmentation_from_e(&cfg.levels, topo.depth)?;
    let grid = &cfg.grid;
    for level in 0..topo.depth {
        let segs = tree.level(level);
        for (i, seg) in segs.iter().enumerate() {
            let state = grid.get(level, seg.start);
            let parent = if level == 0 {
                0
            } else {
                grid.get(level - 1, seg.start)
            };
            if tree.is_first_child(level, i) {
                visit(Event::Init {
                    level,
                    parent,
                    child: state,
                });
            } else {
                let from = grid.get(level, seg.start - 1);
                visit(Event::Trans {
                    level,
                    parent,
                    from,
                    to: state,
                });
            }
            if tree.is_last_child(level, i) {
                visit(Event::End {
                    level,
                    parent,
                    child: state,
                });
            }
        }
    }
    let bottom = topo.bottom();
    for t in 0..o.len() {
        visit(Event::Obs {
            state: grid.get(bottom, t),
            symbol: o.at(t),
        });
    }
    Ok(())
}

/// Sufficient statistics `f(x, e, o)` of a configuration.
pub fn feature_counts(
    cfg: &Configuration,
    o: &ObservationSequence,
    topo: &Topology,
    layout: &ParamLayout,
) -> Result<FeatureVector> {
    let mut counts = vec![0u32; layout.len()];
    for_each_event(cfg, o, topo, |ev| counts[layout.index(ev)] += 1)?;
    Ok(FeatureVector { counts })
}

/// `log Φ(x, e, o) = w · f(x, e, o)`.
pub fn log_joint_potential(
    params: &ModelParams,
    topo: &Topology,
    o: &ObservationSequence,
    cfg: &Configuration,
) -> Result<f64> {
    params.check_shape(topo, o.alphabet_size())?;
    let mut total = 0.0;
    for_each_event(cfg, o, topo, |ev| total += params.weight(ev))?;
    Ok(total)
}

/// Dense log-potential tables with `-inf` at inadmissible entries.
///
/// Tables are indexed by child level; the top level uses a single virtual
/// parent. Top-level transitions are excluded when the root persists.
#[derive(Debug, Clone)]
pub struct LogTables {
    pub sizes: Vec<usize>,
    pub parent_sizes: Vec<usize>,
    pub alphabet: usize,
    /// `init[level][p * S + c]`
    pub init: Vec<Vec<f64>>,
    /// `trans[level][(p * S + u) * S + v]`
    pub trans: Vec<Vec<f64>>,
    /// `end[level][p * S + c]`
    pub end: Vec<Vec<f64>>,
    /// `obs[s * M + m]`
    pub obs: Vec<f64>,
}

impl LogTables {
    pub fn new(topo: &Topology, params: &ModelParams) -> Self {
        let l = params.layout();
        let w = params.weights();
        let depth = topo.depth;
        let sizes = topo.states_per_level.clone();
        let parent_sizes: Vec<usize> = (0..depth).map(|d| topo.parent_size(d)).collect();
        let mut init = Vec::with_capacity(depth);
        let mut trans = Vec::with_capacity(depth);
        let mut end = Vec::with_capacity(depth);
        for level in 0..depth {
            let (ps, s) = (parent_sizes[level], sizes[level]);
            let mut ti = vec![f64::NEG_INFINITY; ps * s];
            let mut tt = vec![f64::NEG_INFINITY; ps * s * s];
            let mut te = vec![f64::NEG_INFINITY; ps * s];
            let lateral = level > 0 || !topo.root_persists;
            for p in 0..ps {
                for c in 0..s {
                    if !topo.admits(level, p, c) {
                        continue;
                    }
                    ti[p * s + c] = w[l.init(level, p, c)];
                    te[p * s + c] = w[l.end(level, p, c)];
                    if !lateral {
                        continue;
                    }
                    for v in 0..s {
                        if topo.admits(level, p, v) {
                            tt[(p * s + c) * s + v] = w[l.trans(level, p, c, v)];
                        }
                    }
                }
            }
            init.push(ti);
            trans.push(tt);
            end.push(te);
        }
        let m = l.alphabet_size();
        let bottom = sizes[depth - 1];
        let obs = (0..bottom * m).map(|i| w[l.obs(i / m, i % m)]).collect();
        LogTables {
            sizes,
            parent_sizes,
            alphabet: m,
            init,
            trans,
            end,
            obs,
        }
    }

    pub fn depth(&self) -> usize {
        self.sizes.len()
    }

    #[inline]
    pub fn obs(&self, state: usize, symbol: usize) -> f64 {
        self.obs[state * self.alphabet + symbol]
    }

    /// Element-wise `exp` of every table.
    pub fn to_linear(&self) -> LogTables {
        let exp = |v: &Vec<f64>| v.iter().map(|x| x.exp()).collect::<Vec<_>>();
        LogTables {
            sizes: self.sizes.clone(),
            parent_sizes: self.parent_sizes.clone(),
            alphabet: self.alphabet,
            init: self.init.iter().map(exp).collect(),
            trans: self.trans.iter().map(exp).collect(),
            end: self.end.iter().map(exp).collect(),
            obs: exp(&self.obs),
        }
    }
}

/// A validated topology paired with shape-checked parameters and their
/// log-domain and linear-domain potential tables.
#[derive(Debug, Clone)]
pub struct Model {
    topology: Topology,
    params: ModelParams,
    log: LogTables,
    linear: LogTables,
}

impl Model {
    pub fn new(topology: Topology, params: ModelParams) -> Result<Self> {
        let topology = topology.validated()?;
        params.check_shape(&topology, params.layout().alphabet_size())?;
        let log = LogTables::new(&topology, &params);
        let linear = log.to_linear();
        Ok(Model {
            topology,
            params,
            log,
            linear,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn log_tables(&self) -> &LogTables {
        &self.log
    }

    pub(crate) fn linear_tables(&self) -> &LogTables {
        &self.linear
    }

    pub fn depth(&self) -> usize {
        self.topology.depth
    }

    pub fn alphabet_size(&self) -> usize {
        self.params.layout().alphabet_size()
    }

    /// Errors unless `o` uses this model's alphabet.
    pub fn check_observations(&self, o: &ObservationSequence) -> Result<()> {
        if o.alphabet_size() != self.alphabet_size() {
            return Err(Error::ShapeMismatch(format!(
                "model alphabet size is {}, observations use {}",
                self.alphabet_size(),
                o.alphabet_size()
            )));
        }
        Ok(())
    }
}
