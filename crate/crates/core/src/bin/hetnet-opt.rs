use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use hetnet_opt::association::{
    re_association, solve_fixed_association, solve_relaxed, solve_single_bs_from, Association,
    ConstraintRoute, RelaxedAlg,
};
use hetnet_opt::fw::{write_trace_csv, Allocation, SolverOptions, TraceRow};
use hetnet_opt::harness::{
    check_gap_narrowing, parse_strategies, run_comparison, write_outputs, ComparisonConfig,
    StrategySpec,
};
use hetnet_opt::patterns::{strategy_patterns, PatternSet, Strategy, Topology};
use hetnet_opt::rates::{cached_rate_matrix, compute_rate_matrix, FadingMode, FadingOptions};
use hetnet_opt::scenario::{generate_scenario, Scenario, ScenarioConfig};

#[derive(Parser)]
#[command(name = "hetnet-opt", version, about = "Pattern-based resource allocation for heterogeneous cellular networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a network drop and write it as JSON.
    Generate {
        /// Scenario configuration (JSON); defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve a single instance.
    Solve(SolveArgs),
    /// Compare strategies over several drops.
    Run(RunArgs),
}

#[derive(Args, Clone)]
struct SolverArgs {
    /// Target duality gap.
    #[arg(long, default_value_t = 1.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 1e-4)]
    gamma0: f64,
    #[arg(long, default_value_t = 0.8)]
    beta: f64,
    #[arg(long, default_value_t = 0.1)]
    kappa: f64,
    #[arg(long, default_value_t = 200_000)]
    max_iters: usize,
    /// Restricted-solve target of the fully corrective solver (default epsilon/10).
    #[arg(long)]
    inner_epsilon: Option<f64>,
    #[arg(long, value_enum, default_value_t = Alg::Fc)]
    alg: Alg,
    /// Fading model for the rate tensor.
    #[arg(long, value_enum, default_value_t = Fading::None)]
    fading: Fading,
    #[arg(long, default_value_t = 1000)]
    mc_samples: usize,
    /// Directory for cached rate tensors.
    #[arg(long)]
    rates_cache: Option<PathBuf>,
}

impl SolverArgs {
    fn options(&self) -> SolverOptions {
        SolverOptions {
            epsilon: self.epsilon,
            gamma0: self.gamma0,
            beta: self.beta,
            kappa: self.kappa,
            max_iters: self.max_iters,
            inner_epsilon: self.inner_epsilon,
            ..Default::default()
        }
    }

    fn fading(&self, seed: u64) -> FadingOptions {
        match self.fading {
            Fading::None => FadingOptions::default(),
            Fading::Rayleigh => FadingOptions { mode: FadingMode::RayleighMc, mc_samples: self.mc_samples, seed },
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Alg {
    Fw,
    Fc,
}

impl From<Alg> for RelaxedAlg {
    fn from(a: Alg) -> Self {
        match a {
            Alg::Fw => RelaxedAlg::Fw,
            Alg::Fc => RelaxedAlg::Fc,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Fading {
    None,
    Rayleigh,
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    /// Multi-cell relaxation.
    Relaxed,
    /// Single-cell association by alternation.
    Single,
    /// Range-expansion association with a pico bias.
    Re,
}

#[derive(Args)]
struct SolveArgs {
    /// Frozen scenario (JSON) to load instead of generating one.
    #[arg(long, conflicts_with = "seed")]
    scenario: Option<PathBuf>,
    /// Seed for generating the scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Scenario configuration used for generation.
    #[arg(long)]
    config: Option<PathBuf>,
    /// all|reuse1|od1|od3|abs|feature|file:<path>
    #[arg(long, default_value = "all")]
    patterns: String,
    #[arg(long, value_enum, default_value_t = Mode::Single)]
    mode: Mode,
    /// Pico bias in dB for `--mode re`.
    #[arg(long, default_value_t = 0.0)]
    re_bias: f64,
    #[command(flatten)]
    solver: SolverArgs,
    /// Per-iteration trace CSV of the multi-cell solve (the fixed-association
    /// solve in `re` mode).
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Result JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario configuration (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated strategies; `name@<dB>` pairs a pattern set with a
    /// range-expansion bias.
    #[arg(long, default_value = "all,feature,od1,od3,abs,reuse1")]
    strategies: String,
    /// Pico biases (dB) to sweep for every pattern set in `--re-patterns`.
    #[arg(long, value_delimiter = ',')]
    re_bias: Vec<f64>,
    #[arg(long, default_value = "feature,reuse1", value_delimiter = ',')]
    re_patterns: Vec<String>,
    /// User counts to sweep; defaults to the configuration's.
    #[arg(long, value_delimiter = ',')]
    users: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    drops: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Also write an SVG plot of the throughput CDFs.
    #[arg(long)]
    svg: bool,
    #[command(flatten)]
    solver: SolverArgs,
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        None => Ok(ScenarioConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let cfg: ScenarioConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?;
            cfg.validate()?;
            Ok(cfg)
        }
    }
}

fn load_patterns(spec: &str, scenario: &Scenario) -> Result<PatternSet> {
    if let Some(path) = spec.strip_prefix("file:") {
        let set = PatternSet::load(Path::new(path))?;
        if set.num_cells() != scenario.num_cells() {
            bail!("pattern file addresses {} cells, scenario has {}", set.num_cells(), scenario.num_cells());
        }
        return Ok(set);
    }
    let strategy: Strategy = spec.parse()?;
    Ok(strategy_patterns(strategy, &Topology::from_scenario(scenario)?)?)
}

#[derive(Serialize)]
struct SolveOutput<'a> {
    mode: Mode,
    alg: RelaxedAlg,
    num_users: usize,
    num_cells: usize,
    num_patterns: usize,
    utility: f64,
    gap: f64,
    certified: bool,
    iterations: usize,
    /// Active patterns as bitstrings (character b is cell b).
    active_patterns: Vec<String>,
    shares: Vec<f64>,
    user_rates_bps: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    association: Option<&'a Association>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relaxed_bound: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bound_gap: Option<f64>,
    allocation: &'a Allocation,
}

fn solve(args: &SolveArgs) -> Result<bool> {
    let scenario = match (&args.scenario, args.seed) {
        (Some(path), _) => Scenario::load(path)?,
        (None, seed) => generate_scenario(&load_config(args.config.as_deref())?, seed.unwrap_or(0))?,
    };
    let set = load_patterns(&args.patterns, &scenario)?;
    let fading = args.solver.fading(scenario.seed);
    let rates = match &args.solver.rates_cache {
        Some(dir) => cached_rate_matrix(dir, &scenario, &set, &fading)?,
        None => compute_rate_matrix(&scenario, &set, &fading)?,
    };
    let weights = scenario.weights();
    let opts = args.solver.options();
    let alg: RelaxedAlg = args.solver.alg.into();

    let (result, association, bound): (_, Option<Association>, Option<(f64, f64)>) = match args.mode {
        Mode::Relaxed => (solve_relaxed(alg, &rates, &weights, &opts, None, None)?, None, None),
        Mode::Single => {
            let relaxed = solve_relaxed(alg, &rates, &weights, &opts, None, None)?;
            let joint = solve_single_bs_from(&rates, &weights, &opts, alg, relaxed.clone())?;
            let mut last = relaxed;
            last.allocation = joint.allocation.clone();
            last.utility = joint.utility;
            last.gap = joint.gap;
            last.certified = joint.certified;
            last.iterations = joint.outer_iterations;
            last.active_patterns = joint.allocation.active_patterns(opts.active_tol_for(rates.num_patterns()));
            (last, Some(joint.association), Some((joint.relaxed_bound, joint.bound_gap)))
        }
        Mode::Re => {
            let assoc = re_association(&scenario, args.re_bias)?;
            let res = solve_fixed_association(&rates, &weights, &assoc, &opts, alg, ConstraintRoute::Universal, None)?;
            (res, Some(assoc), None)
        }
    };
    if let Some(path) = &args.trace {
        let rows: &[TraceRow] = &result.trace;
        write_trace_csv(rows, path)?;
    }
    let shares = result.active_patterns.iter().map(|&i| result.allocation.pi(i)).collect();
    let output = SolveOutput {
        mode: args.mode,
        alg,
        num_users: rates.num_users(),
        num_cells: rates.num_cells(),
        num_patterns: rates.num_patterns(),
        utility: result.utility,
        gap: result.gap,
        certified: result.certified,
        iterations: result.iterations,
        active_patterns: result.active_patterns.iter().map(|&i| set.to_bitstring(i)).collect(),
        shares,
        user_rates_bps: result.allocation.user_rates(&rates),
        association: association.as_ref(),
        relaxed_bound: bound.map(|b| b.0),
        bound_gap: bound.map(|b| b.1),
        allocation: &result.allocation,
    };
    println!(
        "utility {:.4}  gap {:.3e}  certified {}  iterations {}  active patterns {}",
        output.utility,
        output.gap,
        output.certified,
        output.iterations,
        output.active_patterns.len()
    );
    if let (Some(b), Some(g)) = (output.relaxed_bound, output.bound_gap) {
        println!("multi-cell bound {b:.4}  bound gap {g:.4}");
    }
    if let Some(path) = &args.out {
        std::fs::write(path, serde_json::to_string_pretty(&output)?)?;
    }
    Ok(result.certified)
}

fn run(args: &RunArgs) -> Result<bool> {
    let base = load_config(args.config.as_deref())?;
    let mut specs = parse_strategies(&args.strategies)?;
    for p in &args.re_patterns {
        let patterns: Strategy = p.parse()?;
        for &bias in &args.re_bias {
            specs.push(StrategySpec::range_expansion(patterns, bias));
        }
    }
    let loads = if args.users.is_empty() { vec![base.num_users] } else { args.users.clone() };
    let mut all_certified = true;
    let mut reports = Vec::new();
    for &users in &loads {
        let scenario = ScenarioConfig { num_users: users, ..base.clone() };
        let mut cfg = ComparisonConfig::new(scenario, specs.clone(), args.drops, args.seed);
        cfg.solver = args.solver.options();
        cfg.alg = args.solver.alg.into();
        cfg.fading = args.solver.fading(args.seed);
        cfg.rates_cache = args.solver.rates_cache.clone();
        let report = run_comparison(&cfg)?;
        let dir = if loads.len() == 1 { args.out.clone() } else { args.out.join(format!("k{users}")) };
        write_outputs(&report, &dir, args.svg)?;
        println!("K = {users}: results in {}", dir.display());
        for s in &report.summary {
            println!(
                "  {:<22} geometric mean {:>8.3} Mbit/s  sum {:>9.2} Mbit/s  drops ok {}/{}",
                s.strategy,
                s.geometric_mean / 1e6,
                s.sum_rate / 1e6,
                s.drops_ok,
                s.drops_ok + s.drops_failed
            );
        }
        all_certified &= report.all_certified();
        reports.push(report);
    }
    let mut order: Vec<usize> = (0..reports.len()).collect();
    order.sort_by_key(|&j| reports[j].config.scenario.num_users);
    for w in order.windows(2) {
        check_gap_narrowing(&reports[w[0]], &reports[w[1]]);
    }
    Ok(all_certified)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Generate { config, seed, out } => load_config(config.as_deref())
            .and_then(|cfg| Ok(generate_scenario(&cfg, *seed)?))
            .and_then(|sc| {
                sc.save(out)?;
                println!("{} cells, {} users written to {}", sc.num_cells(), sc.num_users(), out.display());
                Ok(true)
            }),
        Command::Solve(args) => solve(args),
        Command::Run(args) => run(args),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("some solves did not reach the requested gap");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
