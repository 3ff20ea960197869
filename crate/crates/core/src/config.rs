//! Hidden configurations: the state grid, the transition levels, and the
//! segmentation tree the levels induce.
//!
//! Time is zero-based. A sequence of length `T` has `T - 1` interior
//! boundaries; boundary `t` sits between positions `t` and `t + 1`. A value
//! `e[t] = k` means levels above `k` persist across the boundary, level `k`
//! moves to a sibling under the same parent, and every level below `k` ends
//! its chain at `t` and re-initializes at `t + 1`. The final position always
//! ends every level, so it carries no stored value.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topology::Topology;

/// Interior transition levels `e[0..T-1]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransitionLevels(pub Vec<usize>);

impl TransitionLevels {
    /// The finest segmentation: every interior boundary transitions at the bottom level.
    pub fn finest(length: usize, depth: usize) -> Self {
        TransitionLevels(vec![depth - 1; length.saturating_sub(1)])
    }

    /// Sequence length `T`.
    pub fn length(&self) -> usize {
        self.0.len() + 1
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// Checks range and root persistence against `topo`.
    pub fn check(&self, topo: &Topology) -> Result<()> {
        let lo = topo.min_transition_level();
        for (t, &k) in self.0.iter().enumerate() {
            if k >= topo.depth {
                return Err(Error::MalformedLevels(format!(
                    "boundary {t} has level {k}, depth is {}",
                    topo.depth
                )));
            }
            if k < lo {
                return Err(Error::MalformedLevels(format!(
                    "boundary {t} transitions at the persistent top level"
                )));
            }
        }
        Ok(())
    }
}

/// The `depth × T` table of hidden states.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateGrid(pub Vec<Vec<usize>>);

impl StateGrid {
    pub fn depth(&self) -> usize {
        self.0.len()
    }

    pub fn length(&self) -> usize {
        self.0.first().map_or(0, Vec::len)
    }

    #[inline]
    pub fn get(&self, level: usize, t: usize) -> usize {
        self.0[level][t]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Configuration {
    pub grid: StateGrid,
    pub levels: TransitionLevels,
}

/// A maximal run `[start, end]` (inclusive) of one level's state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    /// Index of the containing segment one level up; `None` at the top level,
    /// whose segments hang off the virtual root.
    pub parent: Option<usize>,
    /// Indices of the contained segments one level down (empty at the bottom).
    pub children: Range<usize>,
}

/// Segments of every level, with tree edges between adjacent levels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentationTree {
    levels: Vec<Vec<Segment>>,
    length: usize,
}

impl SegmentationTree {
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn level(&self, level: usize) -> &[Segment] {
        &self.levels[level]
    }

    /// Segment indices forming the chain under one parent: the children of
    /// `parent` at `level - 1`, or every top-level segment when `level == 0`.
    pub fn siblings(&self, level: usize, parent: Option<usize>) -> Range<usize> {
        match parent {
            None => 0..self.levels[0].len(),
            Some(p) => self.levels[level - 1][p].children.clone(),
        }
    }

    pub fn is_first_child(&self, level: usize, index: usize) -> bool {
        let seg = &self.levels[level][index];
        self.siblings(level, seg.parent).start == index
    }

    pub fn is_last_child(&self, level: usize, index: usize) -> bool {
        let seg = &self.levels[level][index];
        self.siblings(level, seg.parent).end == index + 1
    }

    /// Whether the segment follows a sibling within the same parent.
    pub fn is_sibling_successor(&self, level: usize, index: usize) -> bool {
        !self.is_first_child(level, index)
    }

    /// Reads the transition levels back from the segment boundaries.
    pub fn transition_levels(&self) -> TransitionLevels {
        let mut e = vec![usize::MAX; self.length.saturating_sub(1)];
        for (level, segs) in self.levels.iter().enumerate().rev() {
            for seg in segs {
                if seg.end + 1 < self.length {
                    e[seg.end] = level;
                }
            }
        }
        TransitionLevels(e)
    }

    /// Segment index at `level` covering time `t`.
    pub fn segment_at(&self, level: usize, t: usize) -> usize {
        self.levels[level].partition_point(|s| s.end < t)
    }
}

/// Builds the unique segmentation tree induced by `e` for a hierarchy of `depth` levels.
pub fn segmentation_from_e(e: &TransitionLevels, depth: usize) -> Result<SegmentationTree> {
    if depth == 0 {
        return Err(Error::MalformedLevels("depth must be positive".into()));
    }
    if let Some((t, &k)) = e.0.iter().enumerate().find(|(_, &k)| k >= depth) {
        return Err(Error::MalformedLevels(format!(
            "boundary {t} has level {k}, depth is {depth}"
        )));
    }
    let length = e.length();
    let mut levels: Vec<Vec<Segment>> = Vec::with_capacity(depth);
    for level in 0..depth {
        let mut segs = Vec::new();
        let mut start = 0;
        for t in 0..length {
            let boundary = t + 1 == length || e.0[t] <= level;
            if boundary {
                segs.push(Segment {
                    start,
                    end: t,
                    parent: None,
                    children: 0..0,
                });
                start = t + 1;
            }
        }
        levels.push(segs);
    }
    for level in 1..depth {
        let (upper, lower) = levels.split_at_mut(level);
        let parents = &mut upper[level - 1];
        let kids = &mut lower[0];
        let mut k = 0;
        for (p, parent) in parents.iter_mut().enumerate() {
            let first = k;
            while k < kids.len() && kids[k].end <= parent.end {
                kids[k].parent = Some(p);
                k += 1;
            }
            parent.children = first..k;
        }
    }
    Ok(SegmentationTree { levels, length })
}

/// Whether `cfg` is a well-formed, nested and admissible configuration for `topo`.
pub fn is_valid_configuration(cfg: &Configuration, topo: &Topology) -> bool {
    check_configuration(cfg, topo).is_ok()
}

/// Like [`is_valid_configuration`] but explains the first problem found.
pub fn check_configuration(cfg: &Configuration, topo: &Topology) -> Result<()> {
    let grid = &cfg.grid;
    let length = cfg.levels.length();
    if grid.depth() != topo.depth || grid.0.iter().any(|row| row.len() != length) {
        return Err(Error::InconsistentConfiguration(format!(
            "grid must be {}x{length}",
            topo.depth
        )));
    }
    cfg.levels
        .check(topo)
        .map_err(|e| Error::InconsistentConfiguration(e.to_string()))?;
    for t in 0..length {
        for level in 0..topo.depth {
            let s = grid.get(level, t);
            let parent = if level == 0 {
                0
            } else {
                grid.get(level - 1, t)
            };
            if !topo.admits(level, parent, s) {
                return Err(Error::InconsistentConfiguration(format!(
                    "state {s} at level {level}, time {t} is not admissible under parent {parent}"
                )));
            }
        }
    }
    for (t, &k) in cfg.levels.0.iter().enumerate() {
        for level in 0..k {
            if grid.get(level, t) != grid.get(level, t + 1) {
                return Err(Error::InconsistentConfiguration(format!(
                    "level {level} changes state across boundary {t}, which transitions at level {k}"
                )));
            }
        }
    }
    Ok(())
}

/// Counts valid configurations of length `length` without enumerating them.
pub fn count_configurations(topo: &Topology, length: usize) -> u128 {
    if length == 0 {
        return 0;
    }
    let tuples = topo.admissible_tuples();
    let mut counts: Vec<u128> = vec![1; tuples.len()];
    for _ in 1..length {
        let mut next = vec![0u128; tuples.len()];
        for (i, from) in tuples.iter().enumerate() {
            for (j, to) in tuples.iter().enumerate() {
                // Boundary levels k with from[..k] == to[..k].
                let shared = from.iter().zip(to).take_while(|(a, b)| a == b).count();
                let ways = topo.candidate_levels().filter(|&k| k <= shared).count() as u128;
                next[j] = next[j].saturating_add(counts[i].saturating_mul(ways));
            }
        }
        counts = next;
    }
    counts.into_iter().fold(0u128, u128::saturating_add)
}

/// Every valid configuration of length `length`, each exactly once.
/// Fails when the count exceeds `limit`.
pub fn enumerate_configurations(
    topo: &Topology,
    length: usize,
    limit: u128,
) -> Result<Vec<Configuration>> {
    if length == 0 {
        return Err(Error::InvalidObservation(
            "length must be at least 1".into(),
        ));
    }
    let count = count_configurations(topo, length);
    if count > limit {
        return Err(Error::TooLargeForEnumeration { count, limit });
    }
    let mut out = Vec::with_capacity(count as usize);
    for e in enumerate_levels(topo, length) {
        enumerate_grids(topo, &e, &mut |grid| {
            out.push(Configuration {
                grid,
                levels: e.clone(),
            })
        })?;
    }
    Ok(out)
}

/// Every well-formed transition-level vector for a sequence of `length`.
pub fn enumerate_levels(topo: &Topology, length: usize) -> Vec<TransitionLevels> {
    let cands: Vec<usize> = topo.candidate_levels().collect();
    let n = length.saturating_sub(1);
    let mut out = Vec::new();
    let mut idx = vec![0usize; n];
    loop {
        out.push(TransitionLevels(idx.iter().map(|&i| cands[i]).collect()));
        let mut pos = n;
        loop {
            if pos == 0 {
                return out;
            }
            pos -= 1;
            idx[pos] += 1;
            if idx[pos] < cands.len() {
                break;
            }
            idx[pos] = 0;
        }
    }
}

/// Calls `emit` once for every state grid consistent with `e`.
pub fn enumerate_grids(
    topo: &Topology,
    e: &TransitionLevels,
    emit: &mut dyn FnMut(StateGrid),
) -> Result<()> {
    let tree = segmentation_from_e(e, topo.depth)?;
    let order: Vec<(usize, usize)> = (0..topo.depth)
        .flat_map(|level| (0..tree.level(level).len()).map(move |i| (level, i)))
        .collect();
    let mut assigned: Vec<Vec<usize>> = (0..topo.depth)
        .map(|level| vec![0; tree.level(level).len()])
        .collect();
    assign_segments(topo, &tree, &order, 0, &mut assigned, emit);
    Ok(())
}

fn assign_segments(
    topo: &Topology,
    tree: &SegmentationTree,
    order: &[(usize, usize)],
    pos: usize,
    assigned: &mut Vec<Vec<usize>>,
    emit: &mut dyn FnMut(StateGrid),
) {
    if pos == order.len() {
        let rows = (0..topo.depth)
            .map(|level| {
                let mut row = vec![0; tree.length()];
                for (i, seg) in tree.level(level).iter().enumerate() {
                    row[seg.start..=seg.end].fill(assigned[level][i]);
                }
                row
            })
            .collect();
        emit(StateGrid(rows));
        return;
    }
    let (level, i) = order[pos];
    let parent = tree.level(level)[i]
        .parent
        .map_or(0, |p| assigned[level - 1][p]);
    for s in topo.children_of(level, parent) {
        assigned[level][i] = s;
        assign_segments(topo, tree, order, pos + 1, assigned, emit);
    }
}
