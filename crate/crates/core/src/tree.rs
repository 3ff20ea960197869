//! Sum-product on the collapsed Markov tree obtained by fixing `e`.
//!
//! Once the transition levels are known, the segmentation tree is fixed and
//! every segment carries one state variable. The potential factorizes into
//! chains of sibling segments under each parent state, so exact sums,
//! marginals and samples follow from an upward pass (chain forward sums
//! nested bottom-up) and a downward pass (chain forward-backward top-down).
//! All arithmetic is in the log domain.

use rand::Rng;

use crate::config::{segmentation_from_e, SegmentationTree, StateGrid, TransitionLevels};
use crate::error::{Error, Result};
use crate::logspace::{log_sum_exp, normalize_log};
use crate::model::{LogTables, Model, ObservationSequence};

/// Upward-pass results: `inside[level][segment][state]` is the log-sum over the
/// segment's subtree given its own state, excluding the factors that place the
/// segment in its parent's chain.
struct Inside {
    tree: SegmentationTree,
    inside: Vec<Vec<Vec<f64>>>,
    log_sum: f64,
}

fn check(model: &Model, o: &ObservationSequence, e: &TransitionLevels) -> Result<()> {
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

/// Forward log-messages along a sibling chain under parent state `parent`.
fn chain_forward(t: &LogTables, level: usize, parent: usize, kids: &[&[f64]]) -> Vec<Vec<f64>> {
    let s = t.sizes[level];
    let init = &t.init[level][parent * s..(parent + 1) * s];
    let trans = &t.trans[level][parent * s * s..(parent + 1) * s * s];
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(kids.len());
    out.push((0..s).map(|c| init[c] + kids[0][c]).collect());
    let mut buf = vec![0.0; s];
    for k in 1..kids.len() {
        let prev = &out[k - 1];
        let row: Vec<f64> = (0..s)
            .map(|v| {
                for u in 0..s {
                    buf[u] = prev[u] + trans[u * s + v];
                }
                log_sum_exp(&buf) + kids[k][v]
            })
            .collect();
        out.push(row);
    }
    out
}

/// Backward log-messages: `out[k][c]` sums everything after sibling `k` given its state `c`.
fn chain_backward(t: &LogTables, level: usize, parent: usize, kids: &[&[f64]]) -> Vec<Vec<f64>> {
    let s = t.sizes[level];
    let end = &t.end[level][parent * s..(parent + 1) * s];
    let trans = &t.trans[level][parent * s * s..(parent + 1) * s * s];
    let n = kids.len();
    let mut out = vec![Vec::new(); n];
    out[n - 1] = end.to_vec();
    let mut buf = vec![0.0; s];
    for k in (0..n - 1).rev() {
        let next = &out[k + 1];
        out[k] = (0..s)
            .map(|u| {
                for v in 0..s {
                    buf[v] = trans[u * s + v] + kids[k + 1][v] + next[v];
                }
                log_sum_exp(&buf)
            })
            .collect();
    }
    out
}

fn chain_total(t: &LogTables, level: usize, parent: usize, forward: &[Vec<f64>]) -> f64 {
    let s = t.sizes[level];
    let end = &t.end[level][parent * s..(parent + 1) * s];
    let last = forward.last().expect("non-empty chain");
    let v: Vec<f64> = (0..s).map(|c| last[c] + end[c]).collect();
    log_sum_exp(&v)
}

fn upward(model: &Model, o: &ObservationSequence, e: &TransitionLevels) -> Result<Inside> {
    check(model, o, e)?;
    let t = model.log_tables();
    let depth = model.depth();
    let tree = segmentation_from_e(e, depth)?;
    let mut inside: Vec<Vec<Vec<f64>>> = vec![Vec::new(); depth];
    let bottom = depth - 1;
    inside[bottom] = tree
        .level(bottom)
        .iter()
        .map(|seg| {
            (0..t.sizes[bottom])
                .map(|s| (seg.start..=seg.end).map(|i| t.obs(s, o.at(i))).sum())
                .collect()
        })
        .collect();
    for level in (0..bottom).rev() {
        let rows = tree
            .level(level)
            .iter()
            .map(|seg| {
                let kids: Vec<&[f64]> = seg
                    .children
                    .clone()
                    .map(|k| inside[level + 1][k].as_slice())
                    .collect();
                (0..t.sizes[level])
                    .map(|p| {
                        let fwd = chain_forward(t, level + 1, p, &kids);
                        chain_total(t, level + 1, p, &fwd)
                    })
                    .collect()
            })
            .collect();
        inside[level] = rows;
    }
    let tops: Vec<&[f64]> = inside[0].iter().map(Vec::as_slice).collect();
    let fwd = chain_forward(t, 0, 0, &tops);
    let log_sum = chain_total(t, 0, 0, &fwd);
    Ok(Inside {
        tree,
        inside,
        log_sum,
    })
}

/// `log Σ_x Φ(x, e, o)` over every state grid consistent with `e`.
pub fn tree_log_sum(model: &Model, o: &ObservationSequence, e: &TransitionLevels) -> Result<f64> {
    Ok(upward(model, o, e)?.log_sum)
}

/// `P(x_t^level = s | e, o)` as `[level][t][s]`.
pub fn tree_state_marginals(
    model: &Model,
    o: &ObservationSequence,
    e: &TransitionLevels,
) -> Result<Vec<Vec<Vec<f64>>>> {
    let up = upward(model, o, e)?;
    let t = model.log_tables();
    let depth = model.depth();
    let tree = &up.tree;
    let mut post: Vec<Vec<Vec<f64>>> = (0..depth)
        .map(|level| vec![vec![0.0; t.sizes[level]]; tree.level(level).len()])
        .collect();

    let tops: Vec<&[f64]> = up.inside[0].iter().map(Vec::as_slice).collect();
    let f = chain_forward(t, 0, 0, &tops);
    let b = chain_backward(t, 0, 0, &tops);
    for (k, row) in post[0].iter_mut().enumerate() {
        let lp: Vec<f64> = (0..t.sizes[0]).map(|c| f[k][c] + b[k][c]).collect();
        *row = normalize_log(&lp);
    }
    for level in 0..depth - 1 {
        for (i, seg) in tree.level(level).iter().enumerate() {
            let kids: Vec<&[f64]> = seg
                .children
                .clone()
                .map(|k| up.inside[level + 1][k].as_slice())
                .collect();
            for p in 0..t.sizes[level] {
                let weight = post[level][i][p];
                if weight == 0.0 {
                    continue;
                }
                let f = chain_forward(t, level + 1, p, &kids);
                let b = chain_backward(t, level + 1, p, &kids);
                let z = up.inside[level][i][p];
                for (k, child) in seg.children.clone().enumerate() {
                    for c in 0..t.sizes[level + 1] {
                        let lp = f[k][c] + b[k][c] - z;
                        if lp > f64::NEG_INFINITY {
                            post[level + 1][child][c] += weight * lp.exp();
                        }
                    }
                }
            }
        }
    }
    Ok((0..depth)
        .map(|level| {
            (0..tree.length())
                .map(|time| post[level][tree.segment_at(level, time)].clone())
                .collect()
        })
        .collect())
}

fn draw(rng: &mut impl Rng, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
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

/// Backward-samples one sibling chain given its forward messages.
fn sample_chain(
    t: &LogTables,
    level: usize,
    parent: usize,
    forward: &[Vec<f64>],
    rng: &mut impl Rng,
) -> Vec<usize> {
    let s = t.sizes[level];
    let end = &t.end[level][parent * s..(parent + 1) * s];
    let trans = &t.trans[level][parent * s * s..(parent + 1) * s * s];
    let n = forward.len();
    let mut states = vec![0; n];
    let lp: Vec<f64> = (0..s).map(|c| forward[n - 1][c] + end[c]).collect();
    states[n - 1] = draw(rng, &normalize_log(&lp));
    for k in (0..n - 1).rev() {
        let next = states[k + 1];
        let lp: Vec<f64> = (0..s)
            .map(|u| forward[k][u] + trans[u * s + next])
            .collect();
        states[k] = draw(rng, &normalize_log(&lp));
    }
    states
}

/// Draws a state grid from `P(x | e, o)`.
pub fn sample_grid(
    model: &Model,
    o: &ObservationSequence,
    e: &TransitionLevels,
    rng: &mut impl Rng,
) -> Result<StateGrid> {
    let up = upward(model, o, e)?;
    let t = model.log_tables();
    let depth = model.depth();
    let tree = &up.tree;
    let mut seg_state: Vec<Vec<usize>> = vec![Vec::new(); depth];
    let tops: Vec<&[f64]> = up.inside[0].iter().map(Vec::as_slice).collect();
    let f = chain_forward(t, 0, 0, &tops);
    seg_state[0] = sample_chain(t, 0, 0, &f, rng);
    for level in 0..depth - 1 {
        let mut below = vec![0; tree.level(level + 1).len()];
        for (i, seg) in tree.level(level).iter().enumerate() {
            let p = seg_state[level][i];
            let kids: Vec<&[f64]> = seg
                .children
                .clone()
                .map(|k| up.inside[level + 1][k].as_slice())
                .collect();
            let f = chain_forward(t, level + 1, p, &kids);
            let drawn = sample_chain(t, level + 1, p, &f, rng);
            for (k, s) in seg.children.clone().zip(drawn) {
                below[k] = s;
            }
        }
        seg_state[level + 1] = below;
    }
    Ok(StateGrid(
        (0..depth)
            .map(|level| {
                (0..tree.length())
                    .map(|time| seg_state[level][tree.segment_at(level, time)])
                    .collect()
            })
            .collect(),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{enumerate_grids, enumerate_levels, Configuration};
    use crate::exact::brute_force_posterior;
    use crate::model::{log_joint_potential, ModelParams, ParamLayout};
    use crate::topology::Topology;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn model(topo: Topology, m: usize, seed: Option<u64>) -> Model {
        let layout = ParamLayout::for_topology(&topo, m);
        let params = match seed {
            None => ModelParams::zeros(layout),
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let w = (0..layout.len())
                    .map(|_| StandardNormal.sample(&mut rng))
                    .collect();
                ModelParams::from_weights(layout, w).unwrap()
            }
        };
        Model::new(topo, params).unwrap()
    }

    fn grids_for(topo: &Topology, e: &TransitionLevels) -> Vec<StateGrid> {
        let mut out = Vec::new();
        enumerate_grids(topo, e, &mut |g| out.push(g)).unwrap();
        out
    }

    #[test]
    fn zero_weights_count_grids() {
        let topo = Topology::fully_connected(&[2, 2, 3], false);
        let m = model(topo.clone(), 2, None);
        let o = ObservationSequence::new(vec![0, 1, 0, 1], 2).unwrap();
        for e in enumerate_levels(&topo, 4) {
            let n = grids_for(&topo, &e).len() as f64;
            assert!((tree_log_sum(&m, &o, &e).unwrap() - n.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn sum_over_levels_recovers_partition() {
        let topo = Topology::fully_connected(&[2, 2, 2], false);
        let m = model(topo.clone(), 2, Some(4));
        let o = ObservationSequence::new(vec![1, 1, 0, 1], 2).unwrap();
        let sums: Vec<f64> = enumerate_levels(&topo, 4)
            .iter()
            .map(|e| tree_log_sum(&m, &o, e).unwrap())
            .collect();
        let z = brute_force_posterior(&m, &o).unwrap().log_partition;
        assert!((log_sum_exp(&sums) - z).abs() < 1e-10);
    }

    #[test]
    fn finest_two_level_equals_linear_chain() {
        let topo = Topology::fully_connected(&[2, 3], true);
        let m = model(topo.clone(), 2, Some(12));
        let o = ObservationSequence::new(vec![0, 1, 1, 0, 1], 2).unwrap();
        let e = TransitionLevels::finest(5, 2);
        let params = m.params();
        let l = params.layout();
        let w = params.weights();
        // Independent linear-chain forward pass for each root state.
        let mut per_root = Vec::new();
        for r in 0..2 {
            let mut alpha: Vec<f64> = (0..3)
                .map(|c| w[l.init(1, r, c)] + w[l.obs(c, o.at(0))])
                .collect();
            for t in 1..5 {
                alpha = (0..3)
                    .map(|v| {
                        let terms: Vec<f64> =
                            (0..3).map(|u| alpha[u] + w[l.trans(1, r, u, v)]).collect();
                        log_sum_exp(&terms) + w[l.obs(v, o.at(t))]
                    })
                    .collect();
            }
            let close: Vec<f64> = (0..3).map(|c| alpha[c] + w[l.end(1, r, c)]).collect();
            per_root.push(w[l.init(0, 0, r)] + w[l.end(0, 0, r)] + log_sum_exp(&close));
        }
        let want = log_sum_exp(&per_root);
        assert!((tree_log_sum(&m, &o, &e).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn marginals_match_conditional_brute_force() {
        let mut topo = Topology::fully_connected(&[2, 3, 2], false);
        topo.children[0][0] = vec![0, 2];
        topo.children[1][2] = vec![1];
        let m = model(topo.clone(), 2, Some(21));
        let o = ObservationSequence::new(vec![0, 1, 1, 0], 2).unwrap();
        for e in enumerate_levels(&topo, 4) {
            let grids = grids_for(&topo, &e);
            let lps: Vec<f64> = grids
                .iter()
                .map(|g| {
                    let cfg = Configuration {
                        grid: g.clone(),
                        levels: e.clone(),
                    };
                    log_joint_potential(m.params(), &topo, &o, &cfg).unwrap()
                })
                .collect();
            let z = log_sum_exp(&lps);
            assert!((tree_log_sum(&m, &o, &e).unwrap() - z).abs() < 1e-10);
            let marg = tree_state_marginals(&m, &o, &e).unwrap();
            for level in 0..3 {
                for time in 0..4 {
                    let mut want = vec![0.0; topo.size(level)];
                    for (g, lp) in grids.iter().zip(&lps) {
                        want[g.get(level, time)] += (lp - z).exp();
                    }
                    for s in 0..want.len() {
                        assert!((marg[level][time][s] - want[s]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_weight_marginals_follow_admissibility() {
        let m = model(Topology::fully_connected(&[1, 2, 3], true), 2, None);
        let o = ObservationSequence::new(vec![0, 1, 0], 2).unwrap();
        let marg = tree_state_marginals(&m, &o, &TransitionLevels(vec![1, 2])).unwrap();
        for (level, rows) in marg.iter().enumerate() {
            for row in rows {
                for &p in row {
                    assert!((p - 1.0 / row.len() as f64).abs() < 1e-12, "level {level}");
                }
            }
        }
    }

    #[test]
    fn child_support_lies_under_parent_support() {
        let topo = Topology {
            depth: 2,
            states_per_level: vec![2, 3],
            children: vec![vec![vec![0], vec![1, 2]]],
            root_persists: true,
        };
        let mut params = ModelParams::zeros(ParamLayout::for_topology(&topo, 2));
        let l = params.layout().clone();
        params.weights_mut()[l.init(0, 0, 0)] = -50.0;
        let m = Model::new(topo, params).unwrap();
        let o = ObservationSequence::new(vec![0, 1], 2).unwrap();
        let marg = tree_state_marginals(&m, &o, &TransitionLevels(vec![1])).unwrap();
        for t in 0..2 {
            assert!((marg[1][t][0] - marg[0][t][0]).abs() < 1e-12);
            assert!((marg[1][t][1] + marg[1][t][2] - marg[0][t][1]).abs() < 1e-12);
        }
    }

    #[test]
    fn samples_follow_conditional_distribution() {
        let topo = Topology::fully_connected(&[1, 2, 2], true);
        let m = model(topo.clone(), 2, Some(8));
        let o = ObservationSequence::new(vec![1, 0, 1], 2).unwrap();
        let e = TransitionLevels(vec![2, 1]);
        let marg = tree_state_marginals(&m, &o, &e).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let n = 20_000;
        let mut freq = vec![vec![0.0; 2]; 3];
        for _ in 0..n {
            let g = sample_grid(&m, &o, &e, &mut rng).unwrap();
            let cfg = Configuration {
                grid: g.clone(),
                levels: e.clone(),
            };
            assert!(crate::config::is_valid_configuration(&cfg, &topo));
            for t in 0..3 {
                freq[t][g.get(2, t)] += 1.0 / n as f64;
            }
        }
        for t in 0..3 {
            let p = marg[2][t][0];
            let se = (p * (1.0 - p) / n as f64).sqrt();
            assert!((freq[t][0] - p).abs() < 5.0 * se + 1e-9);
        }
    }

    #[test]
    fn length_mismatch_is_rejected() {
        let m = model(Topology::fully_connected(&[1, 2], true), 2, None);
        let o = ObservationSequence::new(vec![0, 1], 2).unwrap();
        assert!(tree_log_sum(&m, &o, &TransitionLevels(vec![1, 1])).is_err());
        assert!(tree_log_sum(&m, &o, &TransitionLevels(vec![0])).is_err());
    }
}
