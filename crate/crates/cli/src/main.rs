use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use hscrf::dataset::{load_jsonl, save_jsonl, GeneratorConfig, Record};
use hscrf::exact::CollapsedSliceChain;
use hscrf::experiments::{
    run_convergence_study, run_scaling_study, BudgetRule, ExperimentPlan, Mode, StudyManifest,
};
use hscrf::marginals::MarginalSet;
use hscrf::metrics::{write_metric_rows, AggregateReport, ComparisonReport};
use hscrf::model::{Model, ModelParams, ObservationSequence};
use hscrf::rbgs::{run_chain, ChainConfig};
use hscrf::simulator::simulate_datasets;
use hscrf::topology::Topology;
use hscrf::training::{fit, TrainConfig};

#[derive(Parser)]
#[command(
    name = "hscrf",
    version,
    about = "Hierarchical semi-Markov CRF inference and experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw generative parameters and labeled train/test sets.
    Simulate(SimulateArgs),
    /// Fit model weights to a labeled dataset.
    Train(TrainArgs),
    /// Exact marginals for every sequence in a dataset.
    InferExact(InferArgs),
    /// Sampled marginals for every sequence in a dataset.
    InferRbgs(RbgsArgs),
    /// Compare two directories of marginal sets.
    Eval(EvalArgs),
    /// Error of sampled marginals against exact ones at growing sweep counts.
    Convergence(StudyArgs),
    /// Time and error of exact and sampled inference on longer sequences.
    Scaling(ScalingArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    topology: Option<PathBuf>,
    /// Generator config JSON with topology_ref, M, T, n and seed.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    symbols: usize,
    #[arg(long, default_value_t = 30)]
    length: usize,
    #[arg(long, default_value_t = 50)]
    n_train: usize,
    #[arg(long, default_value_t = 50)]
    n_test: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 3)]
    symbols: usize,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 1e-3)]
    l2: f64,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    tolerance: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output params JSON; the training log goes next to it as `<stem>_log.csv`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    params: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output directory; sequence `i` is written with prefix `seq<i>`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RbgsArgs {
    #[command(flatten)]
    infer: InferArgs,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    /// Fraction of sweeps discarded as burn-in.
    #[arg(long, default_value_t = 0.1)]
    burn_in: f64,
    /// Sequence `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of exact marginal sets.
    #[arg(long)]
    exact: PathBuf,
    /// Directory of estimated marginal sets with the same prefixes.
    #[arg(long)]
    estimate: PathBuf,
    /// Output prefix: writes `<out>.csv` and `<out>.json`.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    topology: PathBuf,
    #[arg(long)]
    params: PathBuf,
    /// Test sequences (JSONL).
    #[arg(long)]
    data: PathBuf,
    /// Plan JSON; flags below override its seed and burn-in when given.
    #[arg(long)]
    plan: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    burn_in: Option<f64>,
    /// Largest checkpoint; smaller default checkpoints are kept.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    max_sequences: Option<usize>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Budget {
    Fixed,
    Linear,
    Quadratic,
}

impl Budget {
    fn rule(self) -> BudgetRule {
        match self {
            Budget::Fixed => BudgetRule::fixed(),
            Budget::Linear => BudgetRule::linear(),
            Budget::Quadratic => BudgetRule::quadratic(),
        }
    }
}

#[derive(Args)]
struct ScalingArgs {
    #[command(flatten)]
    study: StudyArgs,
    /// Budget rules to run (repeatable); all three by default.
    #[arg(long, value_enum)]
    budget: Vec<Budget>,
}

/// Failure to read an input file.
#[derive(Debug)]
struct MissingInput(String);

impl std::fmt::Display for MissingInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for MissingInput {}

fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(MissingInput(format!("{what} file not found: {}", path.display())).into());
    }
    Ok(())
}

fn load_topology(path: &Path) -> Result<Topology> {
    require(path, "topology")?;
    Topology::load(path).with_context(|| format!("loading topology {}", path.display()))
}

fn load_model(topology: &Path, params: &Path) -> Result<Model> {
    let topo = load_topology(topology)?;
    require(params, "params")?;
    let params = ModelParams::load(params)
        .with_context(|| format!("loading params {}", params.display()))?;
    Ok(Model::new(topo, params)?)
}

fn load_data(path: &Path) -> Result<Vec<Record>> {
    require(path, "data")?;
    load_jsonl(path).with_context(|| format!("loading data {}", path.display()))
}

fn observations(data: &[Record], alphabet: usize) -> Result<Vec<ObservationSequence>> {
    Ok(data
        .iter()
        .map(|r| r.observations(alphabet))
        .collect::<hscrf::Result<Vec<_>>>()?)
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let (topo_path, symbols, length, n_train, seed) = match &a.config {
        Some(c) => {
            require(c, "generator config")?;
            let g = GeneratorConfig::load(c)?;
            (g.topology_ref, g.alphabet_size, g.length, g.n, g.seed)
        }
        None => match &a.topology {
            Some(t) => (t.clone(), a.symbols, a.length, a.n_train, a.seed),
            None => bail!("either --topology or --config is required"),
        },
    };
    let topo = load_topology(&topo_path)?;
    let sim = simulate_datasets(&topo, symbols, length, n_train, a.n_test, seed)?;
    create_dir(&a.out)?;
    save_jsonl(a.out.join("train.jsonl"), &sim.train)?;
    if !sim.test.is_empty() {
        save_jsonl(a.out.join("test.jsonl"), &sim.test)?;
    }
    sim.params.save(a.out.join("generative.json"))?;
    GeneratorConfig {
        topology_ref: topo_path,
        alphabet_size: symbols,
        length,
        n: n_train,
        seed,
    }
    .save(a.out.join("generator.json"))?;
    log::info!(
        "wrote {} train and {} test sequences to {}",
        sim.train.len(),
        sim.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let topo = load_topology(&a.topology)?;
    let data = load_data(&a.data)?;
    let tc = TrainConfig {
        learning_rate: a.learning_rate,
        l2: a.l2,
        max_epochs: a.epochs,
        tolerance: a.tolerance,
        seed: a.seed,
    };
    let report = fit(&topo, &data, a.symbols, &tc)?;
    report.params.save(&a.out)?;
    let stem = a
        .out
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "params".into());
    report.write_log(a.out.with_file_name(format!("{stem}_log.csv")))?;
    if let Some(last) = report.trace.last() {
        log::info!(
            "trained {} epochs: log-likelihood {:.4}, gradient norm {:.3e}, converged {}",
            last.epoch,
            last.log_likelihood,
            last.grad_norm,
            report.converged
        );
    }
    Ok(())
}

fn infer_exact(a: InferArgs) -> Result<()> {
    let model = load_model(&a.topology, &a.params)?;
    let data = load_data(&a.data)?;
    let seqs = observations(&data, model.alphabet_size())?;
    let chain = CollapsedSliceChain::new(&model)?;
    create_dir(&a.out)?;
    for (i, o) in seqs.iter().enumerate() {
        chain
            .marginals(&model, o)?
            .write(a.out.join(format!("seq{i}")))?;
    }
    Ok(())
}

fn infer_rbgs(a: RbgsArgs) -> Result<()> {
    let model = load_model(&a.infer.topology, &a.infer.params)?;
    let data = load_data(&a.infer.data)?;
    let seqs = observations(&data, model.alphabet_size())?;
    create_dir(&a.infer.out)?;
    for (i, o) in seqs.iter().enumerate() {
        let cfg = ChainConfig::new(a.iters, a.burn_in, a.seed.wrapping_add(i as u64));
        let report = run_chain(&model, o, &cfg)?;
        let prefix = a.infer.out.join(format!("seq{i}"));
        report.marginals.write(&prefix)?;
        report
            .manifest()
            .write(a.infer.out.join(format!("seq{i}_manifest.json")))?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let mut prefixes = Vec::new();
    for entry in
        std::fs::read_dir(&a.exact).with_context(|| format!("reading {}", a.exact.display()))?
    {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(stem) = name.strip_suffix("_states.csv") {
            prefixes.push(stem.to_string());
        }
    }
    if prefixes.is_empty() {
        bail!("no marginal sets found in {}", a.exact.display());
    }
    prefixes.sort_by_key(|p| (p.len(), p.clone()));
    let mut reports = Vec::new();
    for p in prefixes {
        let exact = MarginalSet::read(a.exact.join(&p))?;
        let est = MarginalSet::read(a.estimate.join(&p))
            .with_context(|| format!("reading estimate {p}"))?;
        reports.push((p, ComparisonReport::compare(&exact, &est)?));
    }
    let base = a.out.to_string_lossy().into_owned();
    write_metric_rows(format!("{base}.csv"), &reports)?;
    let only: Vec<ComparisonReport> = reports.into_iter().map(|(_, r)| r).collect();
    AggregateReport::from_reports(&only)?.write_json(format!("{base}.json"))?;
    Ok(())
}

fn study_plan(a: &StudyArgs, mode: Mode) -> Result<ExperimentPlan> {
    let mut plan = match &a.plan {
        Some(p) => {
            require(p, "plan")?;
            let plan = ExperimentPlan::load(p)?;
            if plan.mode != mode {
                bail!("plan {} is for a different study", p.display());
            }
            plan
        }
        None => match mode {
            Mode::Convergence => ExperimentPlan::convergence(0),
            Mode::Scaling => ExperimentPlan::scaling(0),
        },
    };
    if let Some(s) = a.seed {
        plan.seed = s;
    }
    if let Some(b) = a.burn_in {
        plan.burn_in_fraction = b;
    }
    if let Some(n) = a.iters {
        plan.checkpoints.retain(|&c| c < n);
        plan.checkpoints.push(n);
    }
    if a.max_sequences.is_some() {
        plan.max_sequences = a.max_sequences;
    }
    Ok(plan)
}

fn inputs(a: &StudyArgs) -> BTreeMap<String, String> {
    let mut m = BTreeMap::new();
    m.insert("topology".to_string(), a.topology.display().to_string());
    m.insert("params".to_string(), a.params.display().to_string());
    m.insert("data".to_string(), a.data.display().to_string());
    m
}

fn convergence(a: StudyArgs) -> Result<()> {
    let plan = study_plan(&a, Mode::Convergence)?;
    let model = load_model(&a.topology, &a.params)?;
    let seqs = observations(&load_data(&a.data)?, model.alphabet_size())?;
    let study = run_convergence_study(&model, &seqs, &plan)?;
    create_dir(&a.out)?;
    study.write_csv(a.out.join("convergence.csv"))?;
    study.write_per_sequence_csv(a.out.join("convergence_per_sequence.csv"))?;
    StudyManifest::new(&plan, &study.seeds, inputs(&a))
        .write(a.out.join("convergence_manifest.json"))?;
    Ok(())
}

fn scaling(a: ScalingArgs) -> Result<()> {
    let mut plan = study_plan(&a.study, Mode::Scaling)?;
    if !a.budget.is_empty() {
        plan.budgets = a.budget.iter().map(|b| b.rule()).collect();
    }
    let model = load_model(&a.study.topology, &a.study.params)?;
    let seqs = observations(&load_data(&a.study.data)?, model.alphabet_size())?;
    let study = run_scaling_study(&model, &seqs, &plan)?;
    create_dir(&a.study.out)?;
    study.write_csv(a.study.out.join("scaling.csv"))?;
    StudyManifest::new(&plan, &study.seeds, inputs(&a.study))
        .write(a.study.out.join("scaling_manifest.json"))?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Train(a) => train(a),
        Command::InferExact(a) => infer_exact(a),
        Command::InferRbgs(a) => infer_rbgs(a),
        Command::Eval(a) => eval(a),
        Command::Convergence(a) => convergence(a),
        Command::Scaling(a) => scaling(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<MissingInput>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
