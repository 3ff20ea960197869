//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use hscrf::config::enumerate_levels;
use hscrf::dataset::Record;
use hscrf::exact::{brute_force_posterior, exact_marginals, BrutePosterior};
use hscrf::experiments::{run_convergence_study, run_scaling_study, ExperimentPlan};
use hscrf::model::{Model, ModelParams, ObservationSequence, ParamLayout};
use hscrf::rbgs::{gibbs_conditional, run_chain, ChainConfig, Estimator, GibbsChainState};
use hscrf::simulator::{make_dataset, simulate_datasets, GenerativeParams};
use hscrf::topology::Topology;
use hscrf::training::{evaluate, fit, log_likelihood, TrainConfig};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

struct Instance {
    model: Model,
    o: ObservationSequence,
}

fn random_topology(rng: &mut ChaCha8Rng) -> Topology {
    let depth = rng.random_range(2..=3);
    let sizes: Vec<usize> = (0..depth).map(|_| rng.random_range(1..=3)).collect();
    let mut children = Vec::new();
    for level in 0..depth - 1 {
        let (np, nc) = (sizes[level], sizes[level + 1]);
        let mut links = vec![vec![false; nc]; np];
        #[allow(clippy::needless_range_loop)]
        for c in 0..nc {
            links[rng.random_range(0..np)][c] = true;
        }
        for row in links.iter_mut() {
            for cell in row.iter_mut() {
                if rng.random_bool(0.5) {
                    *cell = true;
                }
            }
            if !row.iter().any(|&b| b) {
                let c = rng.random_range(0..nc);
                row[c] = true;
            }
        }
        children.push(
            links
                .iter()
                .map(|row| (0..nc).filter(|&c| row[c]).collect())
                .collect(),
        );
    }
    Topology {
        depth,
        states_per_level: sizes,
        children,
        root_persists: rng.random_bool(0.5),
    }
    .validated()
    .expect("generated topology is valid")
}

fn random_weights(layout: ParamLayout, scale: f64, rng: &mut ChaCha8Rng) -> ModelParams {
    let w = (0..layout.len())
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            scale * z
        })
        .collect();
    ModelParams::from_weights(layout, w).unwrap()
}

fn random_instance(rng: &mut ChaCha8Rng, min_len: usize) -> Instance {
    let topo = random_topology(rng);
    let params = random_weights(ParamLayout::for_topology(&topo, 2), 1.0, rng);
    let length = rng.random_range(min_len..=5);
    let o =
        ObservationSequence::new((0..length).map(|_| rng.random_range(0..2)).collect(), 2).unwrap();
    Instance {
        model: Model::new(topo, params).unwrap(),
        o,
    }
}

fn tiny_instances(n: usize, seed: u64, min_len: usize) -> Vec<Instance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_instance(&mut rng, min_len)).collect()
}

/// `brute_seconds` is the time already spent building the brute-force tables.
fn criterion_1(instances: &[(Instance, BrutePosterior)], brute_seconds: f64) -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    for (inst, post) in instances {
        let exact = exact_marginals(&inst.model, &inst.o).unwrap();
        let brute = post.marginals(&inst.model);
        worst = worst.max((exact.log_partition.unwrap() - brute.log_partition.unwrap()).abs());
        worst = worst.max(exact.max_abs_diff(&brute));
    }
    let seconds = brute_seconds + start.elapsed().as_secs_f64();
    outcome(
        worst <= 1e-8 && seconds < 60.0,
        format!(
            "{} instances, max |diff| {worst:.2e} (tol 1e-8), {seconds:.1}s (limit 60s)",
            instances.len()
        ),
    )
}

fn criterion_2(instances: &[(Instance, BrutePosterior)]) -> Outcome {
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (inst, post) in instances.iter().filter(|(i, _)| i.o.len() >= 2) {
        let depth = inst.model.depth();
        for e in enumerate_levels(inst.model.topology(), inst.o.len()) {
            for t in 0..inst.o.len() - 1 {
                let got = gibbs_conditional(&inst.model, &inst.o, &e, t).unwrap();
                let want = post.conditional(&e, t, depth);
                for (a, b) in got.iter().zip(&want) {
                    worst = worst.max((a - b).abs());
                }
                checked += 1;
            }
        }
    }
    outcome(
        worst <= 1e-10,
        format!("{checked} conditionals, max |diff| {worst:.2e} (tol 1e-10)"),
    )
}

fn criterion_3() -> Outcome {
    let instances = tiny_instances(20, 303, 2);
    let mut same = true;
    let mut worst: f64 = 0.0;
    for (i, inst) in instances.iter().enumerate() {
        let mut naive = GibbsChainState::new(&inst.model, &inst.o, 0, 1000 + i as u64).unwrap();
        let mut incr = GibbsChainState::new(&inst.model, &inst.o, 0, 1000 + i as u64).unwrap();
        for _ in 0..100 {
            let a = naive.sweep_naive(&inst.model, &inst.o).unwrap();
            let b = incr.sweep_incremental(&inst.model, &inst.o).unwrap();
            same &= naive.levels() == incr.levels();
            for (x, y) in a
                .conditionals
                .iter()
                .flatten()
                .zip(b.conditionals.iter().flatten())
            {
                worst = worst.max((x - y).abs());
            }
        }
    }
    outcome(
        same && worst <= 1e-10,
        format!("20 instances x 100 sweeps, trajectories identical: {same}, max conditional |diff| {worst:.2e} (tol 1e-10)"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let topo = Topology::fully_connected(&[2, 2, 2], false);
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let params = random_weights(ParamLayout::for_topology(&topo, 2), 1.0, &mut rng);
    let model = Model::new(topo.clone(), params).unwrap();
    let o = ObservationSequence::new(vec![0, 1, 1, 0, 1], 2).unwrap();
    let exact = brute_force_posterior(&model, &o).unwrap().level_posterior();
    let burn_in = 1_000;
    let kept = 100_000;
    let mut chain = GibbsChainState::new(&model, &o, burn_in, 4).unwrap();
    let mut counts = std::collections::HashMap::new();
    for it in 1..=burn_in + kept {
        chain.sweep_incremental(&model, &o).unwrap();
        if it > burn_in {
            *counts.entry(chain.levels().clone()).or_insert(0usize) += 1;
        }
    }
    let worst = exact
        .iter()
        .map(|(e, p)| (*counts.get(e).unwrap_or(&0) as f64 / kept as f64 - p).abs())
        .fold(0.0, f64::max);
    let seconds = start.elapsed().as_secs_f64();
    outcome(
        worst <= 0.02 && seconds < 300.0,
        format!("{} level vectors, {kept} kept sweeps, L-inf {worst:.4} (tol 0.02), {seconds:.1}s (limit 300s)", exact.len()),
    )
}

struct Learned {
    model: Model,
    test: Vec<ObservationSequence>,
}

fn learned_setup() -> Learned {
    let topo = Topology::experiment();
    let sim = simulate_datasets(&topo, 3, 30, 50, 50, 2008).unwrap();
    let tc = TrainConfig {
        learning_rate: 1e-3,
        l2: 1e-3,
        max_epochs: 60,
        tolerance: 1e-3,
        seed: 0,
    };
    let report = fit(&topo, &sim.train, 3, &tc).unwrap();
    let first = report.trace.first().unwrap().log_likelihood;
    let last = report.trace.last().unwrap().log_likelihood;
    println!(
        "info: trained {} epochs, log-likelihood {first:.2} -> {last:.2}",
        report.trace.len()
    );
    Learned {
        model: Model::new(topo, report.params).unwrap(),
        test: sim
            .test
            .iter()
            .map(|r| r.observations(3).unwrap())
            .collect(),
    }
}

fn criterion_5(learned: &Learned) -> Outcome {
    let plan = ExperimentPlan::convergence(5);
    let study = run_convergence_study(&learned.model, &learned.test, &plan).unwrap();
    for r in &study.rows {
        println!(
            "info: checkpoint {:>5}  avg_kl {:.3e}  avg_l1 {:.4}  decode_match {:.4}",
            r.checkpoint, r.avg_kl, r.avg_l1, r.decode_match
        );
    }
    let at = |c| study.row(c).unwrap();
    let improved = study
        .per_sequence
        .iter()
        .filter(|r| r.checkpoint == 5000)
        .zip(study.per_sequence.iter().filter(|r| r.checkpoint == 10))
        .filter(|(a, b)| a.kl <= b.kl)
        .count();
    println!(
        "info: {improved} of {} test sequences have lower KL at 5000 than at 10",
        learned.test.len()
    );
    let pass = at(5000).avg_kl < at(10).avg_kl
        && at(5000).avg_l1 < at(10).avg_l1
        && at(50).decode_match >= 0.90;
    outcome(
        pass,
        format!(
            "avg_kl {:.3e} -> {:.3e}, avg_l1 {:.4} -> {:.4} (10 -> 5000), decode_match at 50 = {:.4} (min 0.90)",
            at(10).avg_kl,
            at(5000).avg_kl,
            at(10).avg_l1,
            at(5000).avg_l1,
            at(50).decode_match
        ),
    )
}

fn criterion_6() -> Outcome {
    let topo = Topology::fully_connected(&[2, 2, 2], false);
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let gp = GenerativeParams::random_dirichlet(&topo, 2, &mut rng);
    let data: Vec<Record> = make_dataset(&gp, &topo, 4, 4, &mut rng).unwrap();
    let params = random_weights(ParamLayout::for_topology(&topo, 2), 0.5, &mut rng);
    let l2 = 1e-3;
    let grad = evaluate(&params, &topo, &data, l2).unwrap().gradient;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let i = rng.random_range(0..params.weights().len());
        let mut plus = params.clone();
        plus.weights_mut()[i] += h;
        let mut minus = params.clone();
        minus.weights_mut()[i] -= h;
        let fd = (log_likelihood(&plus, &topo, &data, l2).unwrap()
            - log_likelihood(&minus, &topo, &data, l2).unwrap())
            / (2.0 * h);
        let rel = (grad[i] - fd).abs() / grad[i].abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    outcome(
        worst < 1e-4,
        format!("50 coordinates, step 1e-5, max relative error {worst:.2e} (tol 1e-4)"),
    )
}

fn criterion_7(learned: &Learned) -> Outcome {
    let mut plan = ExperimentPlan::scaling(7);
    plan.max_sequences = Some(10);
    let study = run_scaling_study(&learned.model, &learned.test, &plan).unwrap();
    for r in &study.rows {
        println!(
            "info: T={:>3} {:<9} iters {:>4}  exact {:.4}s  rbgs {:.4}s  per-sweep {:.2e}s  avg_kl {:.3e}",
            r.length, r.budget, r.iterations, r.wall_clock_exact, r.wall_clock_rbgs, r.seconds_per_sweep, r.avg_kl
        );
    }
    let fixed = |t| study.row(t, "fixed").unwrap();
    let sweep_ratio = fixed(100).seconds_per_sweep / fixed(20).seconds_per_sweep;
    let rbgs_ratio = fixed(100).wall_clock_rbgs / fixed(20).wall_clock_rbgs;
    let exact_ratio = fixed(100).wall_clock_exact / fixed(20).wall_clock_exact;
    let budget_ok = plan
        .lengths
        .iter()
        .all(|&t| study.row(t, "quadratic").unwrap().avg_kl <= fixed(t).avg_kl);
    outcome(
        sweep_ratio <= 8.0 && rbgs_ratio <= 8.0 && exact_ratio <= 8.0 && budget_ok,
        format!(
            "T=100 vs T=20: per-sweep x{sweep_ratio:.2}, fixed-budget sampler x{rbgs_ratio:.2}, exact x{exact_ratio:.2} (all limit 8); quadratic KL <= fixed KL at every T: {budget_ok}"
        ),
    )
}

fn criterion_8() -> Outcome {
    let topo = Topology::fully_connected(&[1, 2, 3], true);
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let params = random_weights(ParamLayout::for_topology(&topo, 2), 1.0, &mut rng);
    let model = Model::new(topo, params).unwrap();
    let o = ObservationSequence::new(vec![1, 0, 0, 1, 1], 2).unwrap();
    let runs = 30;
    let mut rb = Vec::new();
    let mut sx = Vec::new();
    for r in 0..runs {
        let mut cfg = ChainConfig::new(200, 0.1, 9000 + r);
        rb.push(run_chain(&model, &o, &cfg).unwrap().marginals);
        cfg.estimator = Estimator::SampledGrid;
        sx.push(run_chain(&model, &o, &cfg).unwrap().marginals);
    }
    let mean_var = |sets: &[hscrf::marginals::MarginalSet]| {
        let cells: Vec<Vec<f64>> = sets
            .iter()
            .map(|m| m.states.iter().flatten().flatten().copied().collect())
            .collect();
        let n = cells.len() as f64;
        let width = cells[0].len();
        (0..width)
            .map(|j| {
                let mean = cells.iter().map(|c| c[j]).sum::<f64>() / n;
                cells.iter().map(|c| (c[j] - mean).powi(2)).sum::<f64>() / (n - 1.0)
            })
            .sum::<f64>()
            / width as f64
    };
    let (v_rb, v_sx) = (mean_var(&rb), mean_var(&sx));
    outcome(
        v_rb <= v_sx,
        format!("{runs} paired runs of 200 sweeps, mean per-cell variance RB {v_rb:.3e} vs sampled-x {v_sx:.3e}"),
    )
}

fn main() {
    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();

    let start = Instant::now();
    let instances: Vec<(Instance, BrutePosterior)> = tiny_instances(200, 101, 1)
        .into_iter()
        .map(|inst| {
            let post = brute_force_posterior(&inst.model, &inst.o).unwrap();
            (inst, post)
        })
        .collect();
    let c1 = criterion_1(&instances, start.elapsed().as_secs_f64());
    results.push((1, "exact engine matches brute force", c1));
    results.push((
        2,
        "Gibbs conditionals match brute force",
        criterion_2(&instances),
    ));
    results.push((3, "naive and incremental sweeps agree", criterion_3()));
    results.push((
        4,
        "stationary distribution of the level chain",
        criterion_4(),
    ));
    let learned = learned_setup();
    results.push((
        5,
        "convergence trend on the learned model",
        criterion_5(&learned),
    ));
    results.push((6, "gradient matches finite differences", criterion_6()));
    results.push((7, "length scaling and budgets", criterion_7(&learned)));
    results.push((8, "Rao-Blackwell variance direction", criterion_8()));

    let mut failed = 0;
    println!();
    for (n, name, o) in &results {
        println!(
            "{} criterion {n}: {name}: {}",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", results.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", results.len());
}
