//! Generative hierarchical hidden Markov simulator for labeled synthetic data.
//!
//! At `t = 0` states are chosen top-down from the initial distributions. At each
//! boundary the bottom level either moves to a sibling or ends; an ended level
//! hands control to its parent, which makes the same choice. The lowest level
//! allowed to move (level 1 under a persistent root, otherwise level 0) never
//! ends. Levels below the one that moved are re-initialized top-down. Whatever
//! is open at `T` is closed there.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1};
use serde::{Deserialize, Serialize};

use crate::config::{check_configuration, Configuration, StateGrid, TransitionLevels};
use crate::dataset::{Dataset, Record};
use crate::error::{Error, Result};
use crate::model::ObservationSequence;
use crate::topology::Topology;

/// Row tolerance for probability distributions.
pub const ROW_TOLERANCE: f64 = 1e-12;

/// Distributions indexed like the model weights: `init[level][parent][child]`,
/// `trans[level][parent][from][to]`, `end[level][parent][from]`, `emit[state][symbol]`.
/// For each `(level, parent, from)` the entries `trans[..][from][·]` and
/// `end[..][from]` together form one distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerativeParams {
    pub alphabet_size: usize,
    pub init: Vec<Vec<Vec<f64>>>,
    pub trans: Vec<Vec<Vec<Vec<f64>>>>,
    pub end: Vec<Vec<Vec<f64>>>,
    pub emit: Vec<Vec<f64>>,
}

impl GenerativeParams {
    fn build(
        topo: &Topology,
        alphabet_size: usize,
        mut row: impl FnMut(&[bool]) -> Vec<f64>,
    ) -> Self {
        let mut init = Vec::new();
        let mut trans = Vec::new();
        let mut end = Vec::new();
        for level in 0..topo.depth {
            let (s, p) = (topo.size(level), topo.parent_size(level));
            let mut li = Vec::with_capacity(p);
            let mut lt = Vec::with_capacity(p);
            let mut le = Vec::with_capacity(p);
            for parent in 0..p {
                let support: Vec<bool> = (0..s).map(|c| topo.admits(level, parent, c)).collect();
                li.push(row(&support));
                let mut with_end = support.clone();
                with_end.push(true);
                let mut rows = Vec::with_capacity(s);
                let mut ends = Vec::with_capacity(s);
                for _ in 0..s {
                    let mut r = row(&with_end);
                    ends.push(r.pop().expect("end entry"));
                    rows.push(r);
                }
                lt.push(rows);
                le.push(ends);
            }
            init.push(li);
            trans.push(lt);
            end.push(le);
        }
        let all = vec![true; alphabet_size];
        let emit = (0..topo.size(topo.bottom())).map(|_| row(&all)).collect();
        GenerativeParams {
            alphabet_size,
            init,
            trans,
            end,
            emit,
        }
    }

    /// Uniform over every admissible support.
    pub fn uniform(topo: &Topology, alphabet_size: usize) -> Self {
        Self::build(topo, alphabet_size, |support| {
            let n = support.iter().filter(|&&b| b).count() as f64;
            support
                .iter()
                .map(|&b| if b { 1.0 / n } else { 0.0 })
                .collect()
        })
    }

    /// Every row drawn from a symmetric Dirichlet(1) over its admissible support.
    pub fn random_dirichlet(topo: &Topology, alphabet_size: usize, rng: &mut impl Rng) -> Self {
        Self::build(topo, alphabet_size, |support| {
            let draws: Vec<f64> = support
                .iter()
                .map(|&b| if b { Exp1.sample(&mut *rng) } else { 0.0 })
                .collect();
            let z: f64 = draws.iter().sum();
            draws.into_iter().map(|x| x / z).collect()
        })
    }

    pub fn validate(&self, topo: &Topology) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidGenerative(msg));
        let check_row = |what: &str, row: &[f64], extra: f64| -> Result<()> {
            if row
                .iter()
                .chain(std::iter::once(&extra))
                .any(|&p| !(p.is_finite() && p >= 0.0))
            {
                return bad(format!("{what} has a negative or non-finite entry"));
            }
            let sum = row.iter().sum::<f64>() + extra;
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return bad(format!("{what} sums to {sum}"));
            }
            Ok(())
        };
        let depth = topo.depth;
        if self.init.len() != depth || self.trans.len() != depth || self.end.len() != depth {
            return bad(format!("expected {depth} levels"));
        }
        for level in 0..depth {
            let (s, p) = (topo.size(level), topo.parent_size(level));
            if self.init[level].len() != p
                || self.trans[level].len() != p
                || self.end[level].len() != p
            {
                return bad(format!("level {level}: expected {p} parent rows"));
            }
            for parent in 0..p {
                let init = &self.init[level][parent];
                if init.len() != s
                    || self.trans[level][parent].len() != s
                    || self.end[level][parent].len() != s
                {
                    return bad(format!(
                        "level {level} parent {parent}: expected {s} states"
                    ));
                }
                check_row(&format!("init[{level}][{parent}]"), init, 0.0)?;
                for from in 0..s {
                    let row = &self.trans[level][parent][from];
                    if row.len() != s {
                        return bad(format!(
                            "trans[{level}][{parent}][{from}]: expected {s} entries"
                        ));
                    }
                    check_row(
                        &format!("trans[{level}][{parent}][{from}] with end"),
                        row,
                        self.end[level][parent][from],
                    )?;
                }
                for c in 0..s {
                    if topo.admits(level, parent, c) {
                        continue;
                    }
                    if init[c] != 0.0 || self.trans[level][parent].iter().any(|r| r[c] != 0.0) {
                        return bad(format!("level {level}: state {c} has mass under parent {parent} that does not admit it"));
                    }
                }
            }
        }
        if self.emit.len() != topo.size(topo.bottom()) {
            return bad(format!(
                "expected {} emission rows",
                topo.size(topo.bottom())
            ));
        }
        for (s, row) in self.emit.iter().enumerate() {
            if row.len() != self.alphabet_size {
                return bad(format!(
                    "emit[{s}]: expected {} symbols",
                    self.alphabet_size
                ));
            }
            check_row(&format!("emit[{s}]"), row, 0.0)?;
        }
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }
}

/// Draws an index with probability proportional to `weights`.
fn draw(rng: &mut impl Rng, weights: &[f64]) -> Option<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        return None;
    }
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    let mut last = None;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            acc += w;
            last = Some(i);
            if u < acc {
                return Some(i);
            }
        }
    }
    last
}

fn parent_of(cur: &[usize], level: usize) -> usize {
    if level == 0 {
        0
    } else {
        cur[level - 1]
    }
}

fn open_below(
    gp: &GenerativeParams,
    cur: &mut [usize],
    from: usize,
    rng: &mut impl Rng,
) -> Result<()> {
    for level in from..cur.len() {
        let p = parent_of(cur, level);
        cur[level] = draw(rng, &gp.init[level][p])
            .ok_or_else(|| Error::InvalidGenerative(format!("init[{level}][{p}] has no mass")))?;
    }
    Ok(())
}

/// One labeled sequence of exactly `length` steps.
pub fn sample_sequence(
    gp: &GenerativeParams,
    topo: &Topology,
    length: usize,
    rng: &mut impl Rng,
) -> Result<(Configuration, ObservationSequence)> {
    gp.validate(topo)?;
    if length == 0 {
        return Err(Error::InvalidSettings(
            "sequence length must be at least 1".into(),
        ));
    }
    let depth = topo.depth;
    let bottom = topo.bottom();
    let min_level = topo.min_transition_level();
    let mut cur = vec![0; depth];
    let mut grid = vec![Vec::with_capacity(length); depth];
    let mut levels = Vec::with_capacity(length - 1);
    let mut symbols = Vec::with_capacity(length);
    open_below(gp, &mut cur, 0, rng)?;
    for t in 0..length {
        if t > 0 {
            let mut level = bottom;
            loop {
                let p = parent_of(&cur, level);
                let u = cur[level];
                let row = &gp.trans[level][p][u];
                if level > min_level {
                    let mut with_end = row.clone();
                    with_end.push(gp.end[level][p][u]);
                    let pick = draw(rng, &with_end).expect("validated row");
                    if pick == row.len() {
                        level -= 1;
                        continue;
                    }
                    cur[level] = pick;
                } else {
                    cur[level] = draw(rng, row).ok_or_else(|| {
                        Error::InvalidGenerative(format!(
                            "trans[{level}][{p}][{u}] has no mass but level {level} cannot end"
                        ))
                    })?;
                }
                break;
            }
            levels.push(level);
            open_below(gp, &mut cur, level + 1, rng)?;
        }
        for (l, &s) in cur.iter().enumerate() {
            grid[l].push(s);
        }
        symbols.push(draw(rng, &gp.emit[cur[bottom]]).expect("validated row"));
    }
    let cfg = Configuration {
        grid: StateGrid(grid),
        levels: TransitionLevels(levels),
    };
    debug_assert!(check_configuration(&cfg, topo).is_ok());
    Ok((cfg, ObservationSequence::new(symbols, gp.alphabet_size)?))
}

/// `n` independent labeled sequences.
pub fn make_dataset(
    gp: &GenerativeParams,
    topo: &Topology,
    n: usize,
    length: usize,
    rng: &mut impl Rng,
) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::InvalidSettings(
            "dataset size must be at least 1".into(),
        ));
    }
    (0..n)
        .map(|_| sample_sequence(gp, topo, length, rng).map(|(cfg, o)| Record::labeled(&cfg, &o)))
        .collect()
}

/// Generative parameters and train/test sets drawn from one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedData {
    pub params: GenerativeParams,
    pub train: Dataset,
    pub test: Dataset,
}

/// Draws Dirichlet(1) parameters, then `n_train` and `n_test` sequences, all
/// from a single stream seeded with `seed`.
pub fn simulate_datasets(
    topo: &Topology,
    alphabet_size: usize,
    length: usize,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<SimulatedData> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = GenerativeParams::random_dirichlet(topo, alphabet_size, &mut rng);
    let train = make_dataset(&params, topo, n_train, length, &mut rng)?;
    let test = if n_test == 0 {
        Vec::new()
    } else {
        make_dataset(&params, topo, n_test, length, &mut rng)?
    };
    Ok(SimulatedData {
        params,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::is_valid_configuration;

    #[test]
    fn experiment_shapes_and_validity() {
        let topo = Topology::experiment();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gp = GenerativeParams::random_dirichlet(&topo, 3, &mut rng);
        gp.validate(&topo).unwrap();
        for _ in 0..200 {
            let (cfg, o) = sample_sequence(&gp, &topo, 30, &mut rng).unwrap();
            assert_eq!(cfg.grid.depth(), 4);
            assert_eq!(cfg.grid.length(), 30);
            assert_eq!(cfg.levels.length(), 30);
            assert_eq!(cfg.levels.0.len(), 29);
            assert_eq!(o.len(), 30);
            assert!(is_valid_configuration(&cfg, &topo));
            assert!(cfg.levels.0.iter().all(|&k| k != 0));
        }
    }

    #[test]
    fn degenerate_parameters_are_deterministic() {
        let topo = Topology::fully_connected(&[1, 1, 1], true);
        let mut gp = GenerativeParams::uniform(&topo, 1);
        for level in 0..3 {
            gp.trans[level][0][0][0] = 1.0;
            gp.end[level][0][0] = 0.0;
        }
        let a = sample_sequence(&gp, &topo, 5, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_sequence(&gp, &topo, 5, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.levels.0, vec![2; 4]);
    }

    #[test]
    fn uniform_single_step_symbols_are_uniform() {
        let topo = Topology::fully_connected(&[1, 2, 3], true);
        let gp = GenerativeParams::uniform(&topo, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            let (_, o) = sample_sequence(&gp, &topo, 1, &mut rng).unwrap();
            counts[o.at(0)] += 1;
        }
        let p = 0.25;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 4.0 * se, "{counts:?}");
        }
    }

    #[test]
    fn bottom_transition_frequencies_follow_parameters() {
        // Two-level model: the bottom level moves laterally or ends; under a
        // persistent root it can never end.
        let topo = Topology::fully_connected(&[1, 2], true);
        let mut gp = GenerativeParams::uniform(&topo, 2);
        gp.trans[1][0][0] = vec![0.1, 0.6];
        gp.end[1][0][0] = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut from0 = [0.0; 2];
        for _ in 0..2000 {
            let (cfg, _) = sample_sequence(&gp, &topo, 10, &mut rng).unwrap();
            for t in 0..9 {
                if cfg.grid.get(1, t) == 0 {
                    from0[cfg.grid.get(1, t + 1)] += 1.0;
                }
            }
        }
        let total = from0[0] + from0[1];
        let p: f64 = 0.1 / 0.7;
        let se = (p * (1.0 - p) / total).sqrt();
        assert!((from0[0] / total - p).abs() < 4.0 * se);
    }

    #[test]
    fn invalid_rows_are_rejected() {
        let topo = Topology::fully_connected(&[1, 2], true);
        let mut gp = GenerativeParams::uniform(&topo, 2);
        gp.emit[0][0] += 1e-9;
        assert!(matches!(
            gp.validate(&topo),
            Err(Error::InvalidGenerative(_))
        ));
        let mut gp = GenerativeParams::uniform(&topo, 2);
        gp.end[1][0][1] = 1.0;
        assert!(gp.validate(&topo).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_sequence(&gp, &topo, 3, &mut rng).is_err());
    }

    #[test]
    fn inadmissible_mass_is_rejected() {
        let mut topo = Topology::fully_connected(&[1, 2, 2], true);
        topo.children[1][0] = vec![0];
        topo.children[1][1] = vec![1];
        let gp = GenerativeParams::uniform(&topo, 2);
        gp.validate(&topo).unwrap();
        let mut bad = gp.clone();
        bad.init[2][0] = vec![0.5, 0.5];
        assert!(bad.validate(&topo).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let (cfg, _) = sample_sequence(&gp, &topo, 8, &mut rng).unwrap();
            assert!(is_valid_configuration(&cfg, &topo));
        }
    }

    #[test]
    fn simulated_split_is_reproducible() {
        let topo = Topology::experiment();
        let a = simulate_datasets(&topo, 3, 30, 50, 50, 11).unwrap();
        assert_eq!(a, simulate_datasets(&topo, 3, 30, 50, 50, 11).unwrap());
        assert_eq!((a.train.len(), a.test.len()), (50, 50));
        assert_ne!(a.train, a.test);
    }

    #[test]
    fn datasets_are_reproducible() {
        let topo = Topology::experiment();
        let gp = GenerativeParams::random_dirichlet(&topo, 3, &mut ChaCha8Rng::seed_from_u64(0));
        let a = make_dataset(&gp, &topo, 3, 12, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = make_dataset(&gp, &topo, 3, 12, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a, b);
        assert_eq!(
            make_dataset(&gp, &topo, 1, 12, &mut ChaCha8Rng::seed_from_u64(4))
                .unwrap()
                .len(),
            1
        );
        assert!(make_dataset(&gp, &topo, 0, 12, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }
}
