//! Left-to-right ("walking chain") messages for a fixed or partially
//! resampled transition-level vector.
//!
//! At any time `t` the segments containing `t` form a root-to-bottom path,
//! one open segment per level. Everything to the left of that path factorizes
//! into one table per level, `G_t[level][parent][child]`: the weight of the
//! closed siblings preceding the open child under its open parent, including
//! the move (or init) into the open child and the closed subtrees below those
//! siblings. Symmetrically `K_t[level][parent][child]` collects everything to
//! the right. Both update in `O(depth · S³)` per step, so one left-to-right
//! pass over all boundaries costs `O(T · depth · S³)`.
//!
//! Tables are kept in the linear domain, each rescaled to a maximum of one
//! with its log scale carried alongside.

use crate::config::TransitionLevels;
use crate::logspace::normalize_log;
use crate::model::{LogTables, Model, ObservationSequence};

#[derive(Debug, Clone)]
pub(crate) struct Scaled {
    pub v: Vec<f64>,
    pub log_scale: f64,
}

impl Scaled {
    fn new(mut v: Vec<f64>, log_scale: f64) -> Self {
        let max = v.iter().copied().fold(0.0, f64::max);
        if max > 0.0 {
            let inv = 1.0 / max;
            v.iter_mut().for_each(|x| *x *= inv);
            Scaled {
                v,
                log_scale: log_scale + max.ln(),
            }
        } else {
            Scaled {
                v,
                log_scale: f64::NEG_INFINITY,
            }
        }
    }

    fn ones(n: usize) -> Self {
        Scaled {
            v: vec![1.0; n],
            log_scale: 0.0,
        }
    }
}

/// One table per level for the open segments at some time step.
pub(crate) type OpenTables = Vec<Scaled>;

pub(crate) struct Walker<'a> {
    lin: &'a LogTables,
    o: &'a ObservationSequence,
    depth: usize,
}

impl<'a> Walker<'a> {
    pub fn new(model: &'a Model, o: &'a ObservationSequence) -> Self {
        Walker {
            lin: model.linear_tables(),
            o,
            depth: model.depth(),
        }
    }

    fn size(&self, level: usize) -> usize {
        self.lin.sizes[level]
    }

    fn psize(&self, level: usize) -> usize {
        self.lin.parent_sizes[level]
    }

    fn with_obs(&self, level: usize, mut v: Vec<f64>, t: usize) -> Vec<f64> {
        if level + 1 == self.depth {
            let s = self.size(level);
            let m = self.o.at(t);
            for (i, x) in v.iter_mut().enumerate() {
                *x *= self.lin.obs(i % s, m);
            }
        }
        v
    }

    /// Fresh tables for segments that all open at `t` (inits), or all close at `t` (ends).
    fn fresh(&self, level: usize, t: usize, closing: bool) -> Scaled {
        let src = if closing {
            &self.lin.end[level]
        } else {
            &self.lin.init[level]
        };
        Scaled::new(self.with_obs(level, src.clone(), t), 0.0)
    }

    /// `close[level][p] = Σ_c G[level][p][c] · end[level][p][c] · close[level + 1][c]`,
    /// for levels `from..=depth` (the entry at `depth` is all ones).
    fn close_below(&self, g: &OpenTables, from: usize) -> Vec<Scaled> {
        let d = self.depth;
        let mut out = vec![Scaled::ones(0); d + 1];
        out[d] = Scaled::ones(self.size(d - 1));
        for level in (from..d).rev() {
            let (ps, s) = (self.psize(level), self.size(level));
            let end = &self.lin.end[level];
            let below = &out[level + 1];
            let table = &g[level];
            let v = (0..ps)
                .map(|p| {
                    (0..s)
                        .map(|c| table.v[p * s + c] * end[p * s + c] * below.v[c])
                        .sum()
                })
                .collect();
            out[level] = Scaled::new(v, table.log_scale + below.log_scale);
        }
        out
    }

    /// `open[level][p] = Σ_c init[level][p][c] · K[level][p][c] · open[level + 1][c]`.
    fn open_below(&self, k: &OpenTables, from: usize) -> Vec<Scaled> {
        let d = self.depth;
        let mut out = vec![Scaled::ones(0); d + 1];
        out[d] = Scaled::ones(self.size(d - 1));
        for level in (from..d).rev() {
            let (ps, s) = (self.psize(level), self.size(level));
            let init = &self.lin.init[level];
            let below = &out[level + 1];
            let table = &k[level];
            let v = (0..ps)
                .map(|p| {
                    (0..s)
                        .map(|c| init[p * s + c] * table.v[p * s + c] * below.v[c])
                        .sum()
                })
                .collect();
            out[level] = Scaled::new(v, table.log_scale + below.log_scale);
        }
        out
    }

    pub fn first(&self) -> OpenTables {
        (0..self.depth)
            .map(|level| self.fresh(level, 0, false))
            .collect()
    }

    pub fn last(&self) -> OpenTables {
        let t = self.o.len() - 1;
        (0..self.depth)
            .map(|level| self.fresh(level, t, true))
            .collect()
    }

    /// `G_{t+1}` from `G_t` when boundary `t` transitions at `k`.
    pub fn step_forward(&self, g: &OpenTables, k: usize, t: usize) -> OpenTables {
        let close = self.close_below(g, k + 1);
        let mut out = Vec::with_capacity(self.depth);
        out.extend(g[..k].iter().cloned());
        let (ps, s) = (self.psize(k), self.size(k));
        let trans = &self.lin.trans[k];
        let below = &close[k + 1];
        let mut v = vec![0.0; ps * s];
        for p in 0..ps {
            for u in 0..s {
                let w = g[k].v[p * s + u] * below.v[u];
                if w == 0.0 {
                    continue;
                }
                let row = &trans[(p * s + u) * s..(p * s + u + 1) * s];
                let dst = &mut v[p * s..(p + 1) * s];
                for (d, &tr) in dst.iter_mut().zip(row) {
                    *d += w * tr;
                }
            }
        }
        out.push(Scaled::new(
            self.with_obs(k, v, t + 1),
            g[k].log_scale + below.log_scale,
        ));
        out.extend((k + 1..self.depth).map(|level| self.fresh(level, t + 1, false)));
        out
    }

    /// `K_t` from `K_{t+1}` when boundary `t` transitions at `k`.
    pub fn step_backward(&self, kt: &OpenTables, k: usize, t: usize) -> OpenTables {
        let open = self.open_below(kt, k + 1);
        let mut out = Vec::with_capacity(self.depth);
        out.extend(kt[..k].iter().cloned());
        let (ps, s) = (self.psize(k), self.size(k));
        let trans = &self.lin.trans[k];
        let below = &open[k + 1];
        let next: Vec<f64> = (0..ps * s).map(|i| kt[k].v[i] * below.v[i % s]).collect();
        let v = (0..ps * s)
            .map(|i| {
                let (p, u) = (i / s, i % s);
                let row = &trans[(p * s + u) * s..(p * s + u + 1) * s];
                row.iter()
                    .zip(&next[p * s..(p + 1) * s])
                    .map(|(a, b)| a * b)
                    .sum()
            })
            .collect();
        out.push(Scaled::new(
            self.with_obs(k, v, t),
            kt[k].log_scale + below.log_scale,
        ));
        out.extend((k + 1..self.depth).map(|level| self.fresh(level, t, true)));
        out
    }

    /// `G_0 .. G_{T-1}` for levels `e`.
    pub fn forward_all(&self, e: &TransitionLevels) -> Vec<OpenTables> {
        let mut out = Vec::with_capacity(self.o.len());
        out.push(self.first());
        for (t, &k) in e.0.iter().enumerate() {
            let next = self.step_forward(&out[t], k, t);
            out.push(next);
        }
        out
    }

    /// `K_0 .. K_{T-1}` for levels `e`.
    pub fn backward_all(&self, e: &TransitionLevels) -> Vec<OpenTables> {
        let n = self.o.len();
        let mut out = vec![Vec::new(); n];
        out[n - 1] = self.last();
        for t in (0..n - 1).rev() {
            out[t] = self.step_backward(&out[t + 1], e.0[t], t);
        }
        out
    }

    /// `log Σ_x Φ(x, e, o)` from the final forward tables.
    pub fn log_sum_from_forward(&self, g_last: &OpenTables) -> f64 {
        let close = self.close_below(g_last, 0);
        close[0].v[0].ln() + close[0].log_scale
    }

    /// Unnormalized `log Σ_x Φ(x, e with e_t = k, o)` for each `k` in `levels`,
    /// given `G_t` (left of the boundary) and `K_{t+1}` (right of it).
    pub fn boundary_log_sums(
        &self,
        g: &OpenTables,
        kr: &OpenTables,
        levels: std::ops::Range<usize>,
    ) -> Vec<f64> {
        let d = self.depth;
        let close = self.close_below(g, levels.start + 1);
        let open = self.open_below(kr, levels.start + 1);
        // Spine weights for the shared open segments above the boundary level.
        let mut spine = Scaled::ones(1);
        for level in 0..levels.start {
            spine = self.spine_step(&spine, g, kr, level);
        }
        let mut out = vec![f64::NEG_INFINITY; d];
        for k in levels {
            let (ps, s) = (self.psize(k), self.size(k));
            let trans = &self.lin.trans[k];
            let (cl, op) = (&close[k + 1], &open[k + 1]);
            let right: Vec<f64> = (0..ps * s).map(|i| kr[k].v[i] * op.v[i % s]).collect();
            let mut raw = 0.0;
            for p in 0..ps {
                if spine.v[p] == 0.0 {
                    continue;
                }
                let mut acc = 0.0;
                for u in 0..s {
                    let left = g[k].v[p * s + u] * cl.v[u];
                    if left == 0.0 {
                        continue;
                    }
                    let row = &trans[(p * s + u) * s..(p * s + u + 1) * s];
                    let dot: f64 = row
                        .iter()
                        .zip(&right[p * s..(p + 1) * s])
                        .map(|(a, b)| a * b)
                        .sum();
                    acc += left * dot;
                }
                raw += spine.v[p] * acc;
            }
            let scale =
                spine.log_scale + g[k].log_scale + cl.log_scale + kr[k].log_scale + op.log_scale;
            out[k] = raw.ln() + scale;
            spine = self.spine_step(&spine, g, kr, k);
        }
        out
    }

    fn spine_step(&self, spine: &Scaled, g: &OpenTables, kr: &OpenTables, level: usize) -> Scaled {
        let (ps, s) = (self.psize(level), self.size(level));
        let mut v = vec![0.0; s];
        for p in 0..ps {
            for c in 0..s {
                v[c] += spine.v[p] * g[level].v[p * s + c] * kr[level].v[p * s + c];
            }
        }
        Scaled::new(
            v,
            spine.log_scale + g[level].log_scale + kr[level].log_scale,
        )
    }

    /// Normalized conditional over all levels (zero outside `levels`).
    pub fn boundary_conditional(
        &self,
        g: &OpenTables,
        kr: &OpenTables,
        levels: std::ops::Range<usize>,
    ) -> Vec<f64> {
        normalize_log(&self.boundary_log_sums(g, kr, levels))
    }

    /// `P(x_t^level = s | e, o)` from matching forward and backward tables.
    pub fn state_marginals(&self, g: &[OpenTables], k: &[OpenTables]) -> Vec<Vec<Vec<f64>>> {
        let d = self.depth;
        let n = self.o.len();
        let mut out: Vec<Vec<Vec<f64>>> = (0..d).map(|_| vec![Vec::new(); n]).collect();
        let mut weights: Vec<Vec<f64>> = vec![Vec::new(); d];
        for t in 0..n {
            for level in 0..d {
                let (ps, s) = (self.psize(level), self.size(level));
                let mut w: Vec<f64> = (0..ps * s)
                    .map(|i| g[t][level].v[i] * k[t][level].v[i])
                    .collect();
                if level + 1 == d {
                    let m = self.o.at(t);
                    for (i, x) in w.iter_mut().enumerate() {
                        *x /= self.lin.obs(i % s, m);
                    }
                }
                weights[level] = w;
            }
            let mut fwd: Vec<Vec<f64>> = Vec::with_capacity(d);
            let mut prev = vec![1.0];
            for level in 0..d {
                let s = self.size(level);
                let mut a = vec![0.0; s];
                for (p, &pv) in prev.iter().enumerate() {
                    for c in 0..s {
                        a[c] += pv * weights[level][p * s + c];
                    }
                }
                rescale(&mut a);
                fwd.push(a.clone());
                prev = a;
            }
            let mut bwd = vec![1.0; self.size(d - 1)];
            for level in (0..d).rev() {
                let mut m: Vec<f64> = fwd[level].iter().zip(&bwd).map(|(a, b)| a * b).collect();
                let z: f64 = m.iter().sum();
                m.iter_mut().for_each(|x| *x /= z);
                out[level][t] = m;
                if level > 0 {
                    let s = self.size(level);
                    let mut b: Vec<f64> = (0..self.size(level - 1))
                        .map(|p| (0..s).map(|c| weights[level][p * s + c] * bwd[c]).sum())
                        .collect();
                    rescale(&mut b);
                    bwd = b;
                }
            }
        }
        out
    }
}

fn rescale(v: &mut [f64]) {
    let max = v.iter().copied().fold(0.0, f64::max);
    if max > 0.0 {
        v.iter_mut().for_each(|x| *x /= max);
    }
}

/// `log Σ_x Φ(x, e, o)` by a single forward walk.
pub fn walking_log_sum(
    model: &Model,
    o: &ObservationSequence,
    e: &TransitionLevels,
) -> crate::Result<f64> {
    check(model, o, e)?;
    let w = Walker::new(model, o);
    let g = w.forward_all(e);
    Ok(w.log_sum_from_forward(g.last().expect("non-empty")))
}

/// `P(x_t^level = s | e, o)` by forward and backward walks.
pub fn walking_state_marginals(
    model: &Model,
    o: &ObservationSequence,
    e: &TransitionLevels,
) -> crate::Result<Vec<Vec<Vec<f64>>>> {
    check(model, o, e)?;
    let w = Walker::new(model, o);
    let g = w.forward_all(e);
    let k = w.backward_all(e);
    Ok(w.state_marginals(&g, &k))
}

fn check(model: &Model, o: &ObservationSequence, e: &TransitionLevels) -> crate::Result<()> {
    model.check_observations(o)?;
    if e.length() != o.len() {
        return Err(crate::Error::MalformedLevels(format!(
            "levels describe length {}, observations have length {}",
            e.length(),
            o.len()
        )));
    }
    e.check(model.topology())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::enumerate_levels;
    use crate::model::{ModelParams, ParamLayout};
    use crate::topology::Topology;
    use crate::tree::{tree_log_sum, tree_state_marginals};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn model(topo: Topology, m: usize, seed: u64) -> Model {
        let layout = ParamLayout::for_topology(&topo, m);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = (0..layout.len())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Model::new(topo, ModelParams::from_weights(layout, w).unwrap()).unwrap()
    }

    fn sparse() -> Topology {
        let mut topo = Topology::fully_connected(&[2, 3, 2], false);
        topo.children[0][0] = vec![0, 2];
        topo.children[1][1] = vec![1];
        topo
    }

    #[test]
    fn log_sum_matches_tree_route() {
        let topo = sparse();
        let m = model(topo.clone(), 2, 3);
        let o = ObservationSequence::new(vec![0, 1, 1, 0, 1], 2).unwrap();
        for e in enumerate_levels(&topo, 5) {
            let a = walking_log_sum(&m, &o, &e).unwrap();
            let b = tree_log_sum(&m, &o, &e).unwrap();
            assert!((a - b).abs() < 1e-10, "{e:?}: {a} vs {b}");
        }
    }

    #[test]
    fn backward_walk_gives_same_total() {
        let topo = Topology::fully_connected(&[1, 2, 3], true);
        let m = model(topo.clone(), 3, 5);
        let o = ObservationSequence::new(vec![2, 0, 1, 1, 2, 0], 3).unwrap();
        let w = Walker::new(&m, &o);
        for e in enumerate_levels(&topo, 6) {
            let k = w.backward_all(&e);
            let open = w.open_below(&k[0], 0);
            let z = open[0].v[0].ln() + open[0].log_scale;
            assert!((z - tree_log_sum(&m, &o, &e).unwrap()).abs() < 1e-10);
        }
    }

    #[test]
    fn boundary_sums_match_tree_route() {
        let topo = sparse();
        let m = model(topo.clone(), 2, 17);
        let o = ObservationSequence::new(vec![1, 1, 0, 1], 2).unwrap();
        let w = Walker::new(&m, &o);
        for e in enumerate_levels(&topo, 4) {
            let g = w.forward_all(&e);
            let k = w.backward_all(&e);
            for t in 0..3 {
                let sums = w.boundary_log_sums(&g[t], &k[t + 1], topo.candidate_levels());
                for level in topo.candidate_levels() {
                    let mut alt = e.clone();
                    alt.0[t] = level;
                    let want = tree_log_sum(&m, &o, &alt).unwrap();
                    assert!((sums[level] - want).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn marginals_match_tree_route() {
        let topo = sparse();
        let m = model(topo.clone(), 2, 23);
        let o = ObservationSequence::new(vec![0, 0, 1, 0], 2).unwrap();
        for e in enumerate_levels(&topo, 4) {
            let a = walking_state_marginals(&m, &o, &e).unwrap();
            let b = tree_state_marginals(&m, &o, &e).unwrap();
            for (x, y) in a
                .iter()
                .flatten()
                .flatten()
                .zip(b.iter().flatten().flatten())
            {
                assert!((x - y).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn long_sequences_do_not_underflow() {
        let topo = Topology::experiment();
        let m = model(topo.clone(), 3, 2);
        let symbols: Vec<usize> = (0..400).map(|i| (i * 7 + i / 3) % 3).collect();
        let o = ObservationSequence::new(symbols, 3).unwrap();
        let e = TransitionLevels::finest(400, 4);
        let a = walking_log_sum(&m, &o, &e).unwrap();
        let b = tree_log_sum(&m, &o, &e).unwrap();
        assert!(a.is_finite());
        assert!((a - b).abs() < 1e-8 * b.abs().max(1.0));
    }
}
