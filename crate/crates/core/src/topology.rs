//! The state hierarchy: levels, per-level state sets and parent/child admissibility.
//!
//! Levels are zero-based: level `0` is the top (root) level and level
//! `depth - 1` is the bottom level that emits observations. States are dense
//! integer ids `0..states_per_level[level]`.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn default_root_persists() -> bool {
    true
}

/// A bounded-depth state hierarchy.
///
/// `children[level][parent]` lists the admissible level-`(level + 1)` states
/// under a level-`level` parent, so `children` has `depth - 1` entries.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Topology {
    pub depth: usize,
    pub states_per_level: Vec<usize>,
    pub children: Vec<Vec<Vec<usize>>>,
    /// When set, the top level holds one state for the whole sequence and
    /// never makes a lateral transition.
    #[serde(default = "default_root_persists")]
    pub root_persists: bool,
}

/// One violated topology invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DepthTooSmall {
        depth: usize,
    },
    LevelCountMismatch {
        expected: usize,
        found: usize,
    },
    EmptyLevel {
        level: usize,
    },
    ChildTableMismatch {
        level: usize,
        expected: usize,
        found: usize,
    },
    EmptyChildSet {
        level: usize,
        state: usize,
    },
    ChildOutOfRange {
        level: usize,
        state: usize,
        child: usize,
    },
    DuplicateChild {
        level: usize,
        state: usize,
        child: usize,
    },
    Unreachable {
        level: usize,
        state: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DepthTooSmall { depth } => write!(f, "depth must be >= 2 (got {depth})"),
            Violation::LevelCountMismatch { expected, found } => {
                write!(f, "expected {expected} per-level state counts, found {found}")
            }
            Violation::EmptyLevel { level } => write!(f, "level {level} has no states"),
            Violation::ChildTableMismatch { level, expected, found } => write!(
                f,
                "level {level} child table has {found} rows, expected {expected}"
            ),
            Violation::EmptyChildSet { level, state } => {
                write!(f, "state {state} at level {level} has an empty child set")
            }
            Violation::ChildOutOfRange { level, state, child } => write!(
                f,
                "state {state} at level {level} lists child {child}, which does not exist at level {}",
                level + 1
            ),
            Violation::DuplicateChild { level, state, child } => write!(
                f,
                "state {state} at level {level} lists child {child} more than once"
            ),
            Violation::Unreachable { level, state } => write!(
                f,
                "state {state} at level {level} is not a child of any level-{} state",
                level - 1
            ),
        }
    }
}

/// Checks every topology invariant, returning the violations found (empty when valid).
pub fn validate_topology(topo: &Topology) -> Vec<Violation> {
    let mut out = Vec::new();
    if topo.depth < 2 {
        out.push(Violation::DepthTooSmall { depth: topo.depth });
    }
    if topo.states_per_level.len() != topo.depth {
        out.push(Violation::LevelCountMismatch {
            expected: topo.depth,
            found: topo.states_per_level.len(),
        });
        return out;
    }
    for (level, &n) in topo.states_per_level.iter().enumerate() {
        if n == 0 {
            out.push(Violation::EmptyLevel { level });
        }
    }
    let expected_tables = topo.depth.saturating_sub(1);
    if topo.children.len() != expected_tables {
        out.push(Violation::ChildTableMismatch {
            level: topo.children.len().min(expected_tables),
            expected: expected_tables,
            found: topo.children.len(),
        });
        return out;
    }
    for (level, table) in topo.children.iter().enumerate() {
        let parents = topo.states_per_level[level];
        let below = topo.states_per_level[level + 1];
        if table.len() != parents {
            out.push(Violation::ChildTableMismatch {
                level,
                expected: parents,
                found: table.len(),
            });
            continue;
        }
        let mut reached = vec![false; below];
        for (state, kids) in table.iter().enumerate() {
            if kids.is_empty() {
                out.push(Violation::EmptyChildSet { level, state });
            }
            let mut seen = vec![false; below];
            for &child in kids {
                if child >= below {
                    out.push(Violation::ChildOutOfRange {
                        level,
                        state,
                        child,
                    });
                    continue;
                }
                if seen[child] {
                    out.push(Violation::DuplicateChild {
                        level,
                        state,
                        child,
                    });
                }
                seen[child] = true;
                reached[child] = true;
            }
        }
        for (state, ok) in reached.into_iter().enumerate() {
            if !ok {
                out.push(Violation::Unreachable {
                    level: level + 1,
                    state,
                });
            }
        }
    }
    out
}

impl Topology {
    /// Every parent admits every state of the next level.
    pub fn fully_connected(states_per_level: &[usize], root_persists: bool) -> Self {
        let depth = states_per_level.len();
        let children = (0..depth.saturating_sub(1))
            .map(|level| {
                let kids: Vec<usize> = (0..states_per_level[level + 1]).collect();
                vec![kids; states_per_level[level]]
            })
            .collect();
        Topology {
            depth,
            states_per_level: states_per_level.to_vec(),
            children,
            root_persists,
        }
    }

    /// The four-level hierarchy with level sizes 1, 2, 4 and 7 used in the experiments.
    pub fn experiment() -> Self {
        Self::fully_connected(&[1, 2, 4, 7], true)
    }

    /// Returns `self` if valid, or an error listing every violation.
    pub fn validated(self) -> Result<Self> {
        let violations = validate_topology(&self);
        if violations.is_empty() {
            Ok(self)
        } else {
            let msg: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            Err(Error::InvalidTopology(msg.join("; ")))
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let topo: Topology = serde_json::from_str(&text)?;
        topo.validated()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn size(&self, level: usize) -> usize {
        self.states_per_level[level]
    }

    pub fn bottom(&self) -> usize {
        self.depth - 1
    }

    /// Number of parent states above `level`; the top level hangs off a single virtual root.
    pub fn parent_size(&self, level: usize) -> usize {
        if level == 0 {
            1
        } else {
            self.states_per_level[level - 1]
        }
    }

    /// Whether `child` at `level` may sit under `parent` at `level - 1`.
    /// At the top level the parent is the virtual root (id 0), which admits every state.
    pub fn admits(&self, level: usize, parent: usize, child: usize) -> bool {
        if level == 0 {
            return parent == 0 && child < self.states_per_level[0];
        }
        self.children[level - 1]
            .get(parent)
            .is_some_and(|kids| kids.contains(&child))
    }

    /// Admissible children of `parent` at `level` (the virtual root when `level == 0`).
    pub fn children_of(&self, level: usize, parent: usize) -> Vec<usize> {
        if level == 0 {
            (0..self.states_per_level[0]).collect()
        } else {
            self.children[level - 1][parent].clone()
        }
    }

    /// Lowest level allowed to make a lateral transition at an interior boundary.
    pub fn min_transition_level(&self) -> usize {
        if self.root_persists {
            1
        } else {
            0
        }
    }

    /// Transition levels an interior boundary may take.
    pub fn candidate_levels(&self) -> std::ops::Range<usize> {
        self.min_transition_level()..self.depth
    }

    /// All admissible top-to-bottom state tuples, in lexicographic order.
    pub fn admissible_tuples(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut current = Vec::with_capacity(self.depth);
        self.extend_tuples(0, 0, &mut current, &mut out);
        out
    }

    fn extend_tuples(
        &self,
        level: usize,
        parent: usize,
        current: &mut Vec<usize>,
        out: &mut Vec<Vec<usize>>,
    ) {
        if level == self.depth {
            out.push(current.clone());
            return;
        }
        for child in self.children_of(level, parent) {
            current.push(child);
            self.extend_tuples(level + 1, child, current, out);
            current.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn experiment_topology_is_valid() {
        let topo = Topology::experiment();
        assert!(validate_topology(&topo).is_empty());
        assert_eq!(topo.states_per_level, vec![1, 2, 4, 7]);
        assert_eq!(topo.admissible_tuples().len(), 56);
    }

    #[test]
    fn depth_one_is_rejected() {
        let topo = Topology {
            depth: 1,
            states_per_level: vec![3],
            children: vec![],
            root_persists: true,
        };
        let v = validate_topology(&topo);
        assert_eq!(v, vec![Violation::DepthTooSmall { depth: 1 }]);
        assert!(v[0].to_string().contains("depth must be >= 2"));
    }

    #[test]
    fn empty_child_set_names_the_state() {
        let mut topo = Topology::fully_connected(&[1, 2, 2], true);
        topo.children[1][1].clear();
        let v = validate_topology(&topo);
        assert_eq!(v, vec![Violation::EmptyChildSet { level: 1, state: 1 }]);
        assert!(v[0].to_string().contains("state 1 at level 1"));
    }

    #[test]
    fn unreachable_and_out_of_range_children_are_reported() {
        let mut topo = Topology::fully_connected(&[1, 3], true);
        topo.children[0][0] = vec![0, 1, 5];
        let v = validate_topology(&topo);
        assert!(v.contains(&Violation::ChildOutOfRange {
            level: 0,
            state: 0,
            child: 5
        }));
        assert!(v.contains(&Violation::Unreachable { level: 1, state: 2 }));
    }

    #[test]
    fn validation_is_idempotent() {
        let mut topo = Topology::fully_connected(&[2, 2, 3], false);
        topo.children[0][0] = vec![1, 1];
        let a = validate_topology(&topo);
        let b = validate_topology(&topo);
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn json_shape_round_trips() {
        let topo = Topology::experiment();
        let text = serde_json::to_string(&topo).unwrap();
        assert!(text.contains("\"states_per_level\":[1,2,4,7]"));
        let back: Topology = serde_json::from_str(&text).unwrap();
        assert_eq!(back, topo);
        let no_flag: Topology =
            serde_json::from_str(r#"{"depth":2,"states_per_level":[1,2],"children":[[[0,1]]]}"#)
                .unwrap();
        assert!(no_flag.root_persists);
    }

    #[test]
    fn shared_children_are_admissible() {
        let topo = Topology {
            depth: 2,
            states_per_level: vec![2, 3],
            children: vec![vec![vec![0, 1], vec![1, 2]]],
            root_persists: false,
        };
        assert!(validate_topology(&topo).is_empty());
        assert!(topo.admits(1, 0, 1) && topo.admits(1, 1, 1));
        assert!(!topo.admits(1, 0, 2));
        assert_eq!(topo.admissible_tuples().len(), 4);
        assert_eq!(topo.candidate_levels(), 0..2);
    }
}
