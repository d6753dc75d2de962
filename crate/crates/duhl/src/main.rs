//! Experiment runner: single runs, policy comparisons, bound reports, and
//! synthetic data generation.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use duhl::data::{
    block_op_norm_sq, gen_synthetic, load_libsvm, write_libsvm, DatasetDense, LabelKind,
    SyntheticSpec,
};
use duhl::engine::{run_block_cd, DuhlConfig, RefreshMode, RunResult};
use duhl::error::Error;
use duhl::local::SolverBudget;
use duhl::metrics::{
    attach_suboptimality, check_lemma1_step, check_theorem1_rate, max_block_sigma,
    reference_optimum, theorem2_envelope, write_csv, Tolerances,
};
use duhl::problem::{Family, ProblemSpec};
use duhl::select::{PolicyKind, SelectionPolicy};

#[derive(Parser)]
#[command(name = "duhl", version, about = "Gap-based block coordinate descent trainer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Execute one training run and write its trace CSV.
    Run(RunArgs),
    /// Run every selection policy on the same data and seed.
    Compare(CompareArgs),
    /// Run with exact block solves and check the per-step and rate bounds.
    Bounds(BoundsArgs),
    /// Generate a synthetic dataset and write it in LIBSVM format.
    GenData(GenDataArgs),
}

#[derive(Args)]
struct ProblemArgs {
    /// Problem family: ridge | elasticnet | svm.
    #[arg(long, default_value = "ridge")]
    family: String,
    /// Regularization strength (> 0).
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    /// Elastic-net mixing parameter in [0, 1]; 0 is pure l1, 1 pure l2.
    /// Ignored for ridge and svm.
    #[arg(long, default_value_t = 0.5)]
    eta: f64,
}

#[derive(Args)]
struct DataArgs {
    /// LIBSVM file to load (samples as rows). Omit to use synthetic data.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Treat loaded columns as samples instead of features.
    #[arg(long, default_value_t = false)]
    transpose: bool,
    /// Synthetic: feature dimension.
    #[arg(long, default_value_t = 50)]
    synth_d: usize,
    /// Synthetic: number of columns.
    #[arg(long, default_value_t = 100)]
    synth_n: usize,
    /// Synthetic: fraction of nonzero entries per column.
    #[arg(long, default_value_t = 1.0)]
    density: f64,
    /// Synthetic: label noise standard deviation (regression).
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Synthetic: log-uniform spread of column scales.
    #[arg(long, default_value_t = 0.0)]
    scale_spread: f64,
    /// Synthetic: generator seed.
    #[arg(long, default_value_t = 0)]
    data_seed: u64,
}

#[derive(Args)]
struct EngineArgs {
    /// Selection policy: gap-oracle | gap-memory | random | sequential | importance.
    #[arg(long, default_value = "gap-memory")]
    policy: String,
    /// Block size as a fraction of n.
    #[arg(long, default_value_t = 0.25)]
    m_frac: f64,
    /// Block size as an absolute count; overrides --m-frac.
    #[arg(long)]
    m: Option<usize>,
    /// Local solver passes over the block per round.
    #[arg(long, default_value_t = 8)]
    passes: usize,
    /// Gap-memory refresh mode: oracle | fixed | concurrent.
    #[arg(long, default_value = "oracle")]
    refresh: String,
    /// Refresh draws per round as a fraction of n (fixed mode).
    #[arg(long, default_value_t = 0.25)]
    k_frac: f64,
    /// Round cap.
    #[arg(long, default_value_t = 100)]
    max_rounds: usize,
    /// Stop once the total duality gap falls to this value.
    #[arg(long, default_value_t = 1e-8)]
    stop_gap: f64,
    /// Run seed (selection and local-solver randomness).
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Solve each block exactly instead of with budgeted passes.
    #[arg(long, default_value_t = false)]
    exact: bool,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Also solve to optimality and fill the suboptimality column.
    #[arg(long, default_value_t = false)]
    suboptimality: bool,
    /// Trace CSV path; relative paths resolve under $DUHL_OUT_DIR if set.
    #[arg(long, default_value = "trace.csv")]
    out: PathBuf,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Gap target for the rounds/epochs summary table.
    #[arg(long, default_value_t = 1e-4)]
    target_gap: f64,
    /// Sweep solver passes per policy and keep the best epochs-to-target.
    #[arg(long, default_value_t = false)]
    tune_passes: bool,
    /// Output stem; one CSV per policy is written as <stem>.<policy>.csv.
    #[arg(long, default_value = "compare")]
    out: PathBuf,
}

#[derive(Args)]
struct BoundsArgs {
    #[command(flatten)]
    problem: ProblemArgs,
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    engine: EngineArgs,
    /// Bound-report CSV path.
    #[arg(long, default_value = "bounds.csv")]
    out: PathBuf,
    #[arg(long, hide = true, default_value_t = false)]
    corrupt_sigma: bool,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Generate classification labels (+/-1) instead of regression targets.
    #[arg(long, default_value_t = false)]
    classification: bool,
    /// Output LIBSVM path.
    #[arg(long, default_value = "synthetic.libsvm")]
    out: PathBuf,
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Dimension(_) => 2,
        Error::Io { .. } | Error::Parse { .. } => 3,
        Error::Numeric(_) | Error::Internal(_) | Error::Convergence(_) => 4,
    }
}

fn resolve_out(path: &Path) -> PathBuf {
    if path.is_absolute() {
        return path.to_owned();
    }
    match std::env::var_os("DUHL_OUT_DIR") {
        Some(dir) => PathBuf::from(dir).join(path),
        None => path.to_owned(),
    }
}

fn parse_family(s: &str) -> Result<Family, Error> {
    match s {
        "ridge" => Ok(Family::Ridge),
        "elasticnet" => Ok(Family::ElasticNet),
        "svm" => Ok(Family::SvmDual),
        other => Err(Error::Config(format!("unknown family '{other}'"))),
    }
}

fn load_data(args: &DataArgs, family: Family) -> Result<DatasetDense, Error> {
    let data = match &args.data {
        Some(path) => load_libsvm(path, None)?,
        None => gen_synthetic(&SyntheticSpec {
            d: args.synth_d,
            n: args.synth_n,
            density: args.density,
            noise_std: args.noise_std,
            column_scale_spread: args.scale_spread,
            seed: args.data_seed,
            labels: if family == Family::SvmDual {
                LabelKind::Classification
            } else {
                LabelKind::Regression
            },
        })?,
    };
    if args.transpose {
        data.transpose()
    } else {
        Ok(data)
    }
}

fn build_problem(args: &ProblemArgs, data: &DatasetDense) -> Result<ProblemSpec, Error> {
    let family = parse_family(&args.family)?;
    let eta = match family {
        Family::Ridge => 1.0,
        Family::ElasticNet => args.eta,
        Family::SvmDual => 0.0,
    };
    ProblemSpec::new(family, args.lambda, eta, data)
}

fn build_config(args: &EngineArgs, n: usize, exact_override: bool) -> Result<DuhlConfig, Error> {
    let kind = PolicyKind::parse(&args.policy)?;
    let m = match args.m {
        Some(m) => m,
        None => {
            if !(args.m_frac > 0.0 && args.m_frac <= 1.0) {
                return Err(Error::Config(format!(
                    "m fraction {} must lie in (0, 1]",
                    args.m_frac
                )));
            }
            ((args.m_frac * n as f64).round() as usize).clamp(1, n)
        }
    };
    let refresh = match args.refresh.as_str() {
        "oracle" => RefreshMode::Oracle,
        "fixed" => {
            if !(args.k_frac >= 0.0 && args.k_frac <= 1.0) {
                return Err(Error::Config(format!(
                    "refresh fraction {} must lie in [0, 1]",
                    args.k_frac
                )));
            }
            RefreshMode::FixedCount((args.k_frac * n as f64).round() as usize)
        }
        "concurrent" => RefreshMode::Concurrent,
        other => Err(Error::Config(format!("unknown refresh mode '{other}'")))?,
    };
    if refresh != RefreshMode::Oracle && kind != PolicyKind::GapMemory {
        return Err(Error::Config(
            "--refresh fixed/concurrent requires --policy gap-memory".into(),
        ));
    }
    Ok(DuhlConfig {
        policy: SelectionPolicy { kind, m },
        budget: SolverBudget::new(args.passes.max(1), args.seed)?,
        refresh,
        max_rounds: args.max_rounds,
        stop_gap: args.stop_gap,
        seed: args.seed,
        exact_solve: exact_override || args.exact,
        measure_theta: false,
    })
}

fn summarize(name: &str, result: &RunResult) {
    let (gap, rounds, epochs) = match result.rounds.last() {
        Some(r) => (r.total_gap, result.rounds.len(), r.epochs),
        None => (result.initial_gap, 0, 0.0),
    };
    let swaps: usize = result.rounds.iter().map(|r| r.swaps).sum();
    println!(
        "{name}: rounds={rounds} epochs={epochs:.3} final_gap={gap:.6e} total_swaps={swaps}"
    );
}

fn cmd_run(args: &RunArgs) -> Result<(), Error> {
    let family = parse_family(&args.problem.family)?;
    let data = load_data(&args.data, family)?;
    let p = build_problem(&args.problem, &data)?;
    let config = build_config(&args.engine, data.n_cols(), false)?;
    let mut result = run_block_cd(&p, &data, &config)?;
    if args.suboptimality {
        let opt = reference_optimum(&p, &data)?;
        attach_suboptimality(&mut result, opt);
    }
    let out = resolve_out(&args.out);
    write_csv(&result, &out)?;
    summarize("run", &result);
    Ok(())
}

const POLICIES: [PolicyKind; 5] = [
    PolicyKind::GapOracle,
    PolicyKind::GapMemory,
    PolicyKind::UniformRandom,
    PolicyKind::SequentialBlocks,
    PolicyKind::ImportanceSampling,
];

const TUNE_GRID: [usize; 6] = [1, 2, 4, 8, 16, 32];

fn cmd_compare(args: &CompareArgs) -> Result<(), Error> {
    let family = parse_family(&args.problem.family)?;
    let data = load_data(&args.data, family)?;
    let p = build_problem(&args.problem, &data)?;
    let base = build_config(&args.engine, data.n_cols(), false)?;
    let out = resolve_out(&args.out);
    println!("policy rounds_to_target epochs_to_target passes");
    for kind in POLICIES {
        let mut config = base.clone();
        config.policy.kind = kind;
        let pass_grid: &[usize] = if args.tune_passes {
            &TUNE_GRID
        } else {
            std::slice::from_ref(&base.budget.passes)
        };
        let mut best: Option<(f64, usize, usize, RunResult)> = None;
        for &passes in pass_grid {
            config.budget.passes = passes;
            let result = run_block_cd(&p, &data, &config)?;
            let (rounds, epochs) = match result.rounds_to_gap(args.target_gap) {
                Some(r) => (r, result.rounds[r - 1].epochs),
                None => (
                    usize::MAX,
                    result.rounds.last().map_or(0.0, |r| r.epochs) + 1.0,
                ),
            };
            if best.as_ref().is_none_or(|(e, ..)| epochs < *e) {
                best = Some((epochs, rounds, passes, result));
            }
        }
        let (epochs, rounds, passes, result) = best.expect("nonempty grid");
        let stem = out.to_string_lossy();
        write_csv(&result, Path::new(&format!("{stem}.{}.csv", kind.name())))?;
        let rounds_str = if rounds == usize::MAX {
            "-".to_string()
        } else {
            rounds.to_string()
        };
        println!("{} {rounds_str} {epochs:.3} {passes}", kind.name());
    }
    Ok(())
}

fn cmd_bounds(args: &BoundsArgs) -> Result<bool, Error> {
    let family = parse_family(&args.problem.family)?;
    let data = load_data(&args.data, family)?;
    let p = build_problem(&args.problem, &data)?;
    let config = build_config(&args.engine, data.n_cols(), true)?;
    let mut result = run_block_cd(&p, &data, &config)?;
    let opt = reference_optimum(&p, &data)?;
    attach_suboptimality(&mut result, opt);
    let tol = Tolerances::default();
    let sigma_scale = if args.corrupt_sigma { 0.1 } else { 1.0 };

    let out = resolve_out(&args.out);
    let mut report = String::from("round,check,measured,bound,satisfied\n");
    let mut violations = 0usize;

    if p.strong_convexity > 0.0 {
        for r in &result.rounds {
            let sigma = sigma_scale * block_op_norm_sq(&data, &r.block)?;
            let row = check_lemma1_step(r, &p, sigma, &tol)?;
            if !row.satisfied {
                violations += 1;
            }
            report.push_str(&format!(
                "{},step,{:.16e},{:.16e},{}\n",
                r.round, row.measured, row.required, row.satisfied
            ));
        }
        let sigma = sigma_scale * max_block_sigma(&data, &result)?;
        let n = data.n_cols();
        let m = config.policy.m;
        // Exact solves with a deterministic top-m policy: eta_hat = min rho.
        let eta_hat = result
            .rounds
            .iter()
            .map(|r| r.rho)
            .fold(f64::INFINITY, f64::min)
            .min(1.0);
        let rate = check_theorem1_rate(&result, &p, n, m, sigma, eta_hat, opt, &tol)?;
        for row in &rate.rows {
            if !row.satisfied {
                violations += 1;
            }
            report.push_str(&format!(
                "{},rate,{:.16e},{:.16e},{}\n",
                row.round, row.suboptimality, row.envelope, row.satisfied
            ));
        }
    } else {
        // No strong convexity: the per-step and linear-rate checks do not
        // apply; emit the sublinear envelope as an advisory overlay.
        let b = p.support_bound.unwrap_or(1.0);
        let sigma = sigma_scale * max_block_sigma(&data, &result)?;
        let n = data.n_cols();
        let m = config.policy.m;
        let eps0 = result.initial_objective - opt;
        for (t, r) in result.rounds.iter().enumerate() {
            let env = theorem2_envelope(
                t as f64,
                n,
                m,
                1.0,
                p.smoothness,
                b,
                sigma,
                eps0,
            );
            report.push_str(&format!(
                "{},sublinear-advisory,{:.16e},{:.16e},true\n",
                r.round,
                r.suboptimality.unwrap_or(f64::NAN),
                env
            ));
        }
    }
    std::fs::write(&out, report).map_err(|source| Error::Io {
        path: out.clone(),
        source,
    })?;
    summarize("bounds", &result);
    println!("violations={violations}");
    Ok(violations == 0)
}

fn cmd_gen_data(args: &GenDataArgs) -> Result<(), Error> {
    let labels = if args.classification {
        LabelKind::Classification
    } else {
        LabelKind::Regression
    };
    let data = gen_synthetic(&SyntheticSpec {
        d: args.data.synth_d,
        n: args.data.synth_n,
        density: args.data.density,
        noise_std: args.data.noise_std,
        column_scale_spread: args.data.scale_spread,
        seed: args.data.data_seed,
        labels,
    })?;
    let out = resolve_out(&args.out);
    write_libsvm(&data, &out)?;
    println!(
        "gen-data: d={} n={} -> {}",
        data.n_features(),
        data.n_cols(),
        out.display()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|()| true),
        Command::Compare(args) => cmd_compare(args).map(|()| true),
        Command::Bounds(args) => cmd_bounds(args),
        Command::GenData(args) => cmd_gen_data(args).map(|()| true),
    };
    match outcome {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(5),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
