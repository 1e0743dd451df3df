use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use sista::bench::{self, BenchSpec, GammaSearchConfig, SolverKind};
use sista::inference::{self, BootstrapConfig};
use sista::io::{Bundle, SolutionFile};
use sista::preprocess::{self, CharacteristicsTable};
use sista::solvers::{InitialPoint, SolverConfig, StopReason};
use sista::{Error, Solution};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_UNCONVERGED: u8 = 3;

#[derive(Parser)]
#[command(name = "sista", version, about = "Sparse ground-cost estimation for entropic optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a random synthetic problem bundle.
    Simulate(SimulateArgs),
    /// Build a bundle from an observed plan and characteristic vectors.
    Build(BuildArgs),
    /// Fit β at a fixed penalty.
    Fit(FitArgs),
    /// Race the solvers on a synthetic instance against a reference optimum.
    Race(RaceArgs),
    /// Search the penalty giving a requested number of nonzero components.
    GammaSearch(GammaSearchArgs),
    /// Bootstrap standard errors of β at a fixed penalty.
    Bootstrap(BootstrapArgs),
    /// Check the modelling assumptions on a bundle.
    Validate(ValidateArgs),
}

#[derive(Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long, env = "SISTA_OUT_DIR", default_value = "sista-out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct SolverArgs {
    /// KKT tolerance.
    #[arg(long, default_value_t = 1e-8)]
    tol: f64,
    #[arg(long, default_value_t = 100_000)]
    max_iter: usize,
    /// Initial step for β.
    #[arg(long, default_value_t = 1.0)]
    rho: f64,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    max_seconds: Option<f64>,
}

impl SolverArgs {
    fn config(&self) -> SolverConfig {
        SolverConfig {
            tol_kkt: self.tol,
            max_iter: self.max_iter,
            rho: self.rho,
            max_seconds: self.max_seconds,
            ..SolverConfig::default()
        }
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long = "K")]
    k: usize,
    #[arg(long = "N")]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Penalty stored in the manifest.
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    /// Store the centered basis instead of the raw draws.
    #[arg(long)]
    centered: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Clone, Copy, ValueEnum)]
enum BasisKind {
    /// One matrix per characteristic: (x_r - y_r)^2.
    Diag,
    /// One matrix per pair of characteristics: (x_r - y_s)^2.
    Cross,
}

#[derive(Args)]
struct BuildArgs {
    /// Observed plan (whitespace or comma separated N x N matrix).
    #[arg(long)]
    plan: PathBuf,
    /// Origin characteristics, one row per location: id then values.
    #[arg(long)]
    origin: PathBuf,
    /// Destination characteristics; defaults to the origin table.
    #[arg(long)]
    destination: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "diag")]
    basis: BasisKind,
    /// Names for the characteristics, comma separated.
    #[arg(long, value_delimiter = ',')]
    names: Vec<String>,
    #[arg(long, default_value_t = 0.0)]
    gamma: f64,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct FitArgs {
    /// Bundle directory.
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, value_parser = parse_solver, default_value = "sista")]
    solver: SolverKind,
    /// Penalty; defaults to the bundle manifest.
    #[arg(long)]
    gamma: Option<f64>,
    #[command(flatten)]
    solver_args: SolverArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct RaceArgs {
    #[arg(long = "K", default_value_t = 100)]
    k: usize,
    #[arg(long = "N", default_value_t = 100)]
    n: usize,
    #[arg(long, default_value_t = 0.05)]
    sparsity: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_delimiter = ',', value_parser = parse_solver, default_value = "sista,ista,cd")]
    solvers: Vec<SolverKind>,
    /// Solvers stop once their gap to the reference reaches this value.
    #[arg(long, default_value_t = 1e-10)]
    gap_floor: f64,
    /// Per-solver wall-clock budget in seconds.
    #[arg(long, default_value_t = 120.0)]
    max_seconds: f64,
    /// Run solvers on separate threads (timings include contention).
    #[arg(long)]
    parallel: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct GammaSearchArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Target fraction of nonzero components.
    #[arg(long, conflicts_with = "nonzeros", required_unless_present = "nonzeros")]
    sparsity: Option<f64>,
    /// Target number of nonzero components.
    #[arg(long)]
    nonzeros: Option<usize>,
    #[arg(long, default_value_t = 1e-10)]
    tol: f64,
    #[arg(long, default_value_t = 80)]
    max_fits: usize,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct BootstrapArgs {
    #[arg(long)]
    bundle: PathBuf,
    /// Penalty; defaults to the bundle manifest.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    replicates: usize,
    /// Pseudo-observations per replicate; 0 refits the observed plan unchanged.
    #[arg(long, default_value_t = inference::DEFAULT_SAMPLE_SIZE)]
    sample_size: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[command(flatten)]
    solver_args: SolverArgs,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(long)]
    bundle: PathBuf,
}

fn parse_solver(s: &str) -> Result<SolverKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Data(String),
    Unconverged(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_data_error() {
            Failure::Data(e.to_string())
        } else {
            Failure::Usage(e.to_string())
        }
    }
}

type CmdResult = Result<(), Failure>;

fn load_bundle(dir: &Path) -> Result<Bundle, Failure> {
    if !dir.join(sista::io::MANIFEST_FILE).is_file() {
        return Err(Failure::Usage(format!("no bundle at {}", dir.display())));
    }
    Ok(Bundle::load(dir)?)
}

fn solution_file(sol: &Solution, gamma: f64, names: Vec<String>) -> SolutionFile {
    SolutionFile {
        solver: sol.solver.to_string(),
        converged: sol.converged,
        iterations: sol.iterations,
        gamma,
        phi: sol.phi,
        kkt_residual: sol.kkt_residual,
        nnz: sol.beta.nnz(),
        beta: sol.beta.beta.to_vec(),
        u: sol.potentials.u.to_vec(),
        v: sol.potentials.v.to_vec(),
        names,
    }
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::from(Error::io(dir, e)))
}

fn simulate(args: SimulateArgs) -> CmdResult {
    if args.k == 0 || args.n == 0 {
        return Err(Failure::Usage("--K and --N must be >= 1".into()));
    }
    let mut bundle = bench::gen_synthetic_bundle(args.k, args.n, args.seed)?;
    bundle.manifest.gamma = args.gamma;
    if args.centered {
        bundle.basis = preprocess::center_basis(bundle.basis)?.matrices().to_owned();
    }
    bundle.save(&args.out.out_dir)?;
    println!("wrote K={} N={} bundle to {}", args.k, args.n, args.out.out_dir.display());
    Ok(())
}

fn build(args: BuildArgs) -> CmdResult {
    let table = CharacteristicsTable::load(&args.origin, args.destination.as_deref())?;
    let plan = sista::io::read_matrix(&args.plan)?;
    let (raw, names) = match args.basis {
        BasisKind::Diag => (
            preprocess::build_basis_diag(table.x.view(), table.y.view())?,
            args.names.clone(),
        ),
        BasisKind::Cross => {
            let names = if args.names.is_empty() {
                Vec::new()
            } else {
                preprocess::cross_basis_names(&args.names)
            };
            (preprocess::build_basis_cross(table.x.view(), table.y.view())?, names)
        }
    };
    let bundle = Bundle::new(plan, raw, args.gamma, names)?;
    bundle.save(&args.out.out_dir)?;
    println!(
        "wrote K={} N={} bundle to {}",
        bundle.manifest.k,
        bundle.manifest.n,
        args.out.out_dir.display()
    );
    Ok(())
}

fn fit(args: FitArgs) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let problem = bundle.to_problem(args.gamma, None)?;
    let config = args.solver_args.config();
    let sol = args.solver.solve(&problem, &config, &InitialPoint::zeros(&problem))?;
    let out = &args.out.out_dir;
    create_dir(out)?;
    solution_file(&sol, problem.gamma(), bundle.names()).save(&out.join("solution.toml"))?;
    sol.trace.write_csv(&out.join("trace.csv"))?;
    println!(
        "{}: phi={:.12e} kkt={:.3e} nnz={} iterations={} stop={}",
        sol.solver,
        sol.phi,
        sol.kkt_residual,
        sol.beta.nnz(),
        sol.iterations,
        stop_label(sol.stop)
    );
    if sol.converged {
        Ok(())
    } else {
        Err(Failure::Unconverged(format!(
            "not converged: KKT residual {:.3e} > {:.1e}",
            sol.kkt_residual, config.tol_kkt
        )))
    }
}

fn race(args: RaceArgs) -> CmdResult {
    let mut spec = BenchSpec::new(args.k, args.n, args.sparsity, args.seed);
    spec.solvers = args.solvers;
    spec.gap_floor = args.gap_floor;
    spec.parallel = args.parallel;
    spec.race.max_seconds = Some(args.max_seconds);
    spec.validate()?;
    let instance = bench::gen_synthetic_bundle(args.k, args.n, args.seed)?;
    let problem = instance.to_problem(None, None)?;
    let search = bench::find_gamma_for_sparsity(&problem, args.sparsity, &GammaSearchConfig::default())?;
    info!("gamma {:.6e} gives {} nonzeros", search.gamma, search.nnz);
    let problem = problem.with_gamma(search.gamma)?;
    let result = bench::run_race(&problem, &spec)?;
    bench::write_race(&result, &instance, &args.out.out_dir)?;
    println!("gamma={:.6e} nnz={} phi*={:.12e}", search.gamma, search.nnz, result.phi_star);
    for e in &result.entries {
        let t = e
            .time_to_gap(1e-6)
            .map_or_else(|| "not reached".to_string(), |t| format!("{t:.4}s"));
        println!(
            "{:<6} iterations={:<7} time to gap 1e-6: {t}",
            e.solver.name(),
            e.solution.iterations
        );
    }
    Ok(())
}

fn gamma_search(args: GammaSearchArgs) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let problem = bundle.to_problem(None, None)?;
    let search_cfg = GammaSearchConfig {
        solver: SolverConfig {
            tol_kkt: args.tol,
            ..SolverConfig::default()
        },
        max_fits: args.max_fits,
    };
    let search = match (args.nonzeros, args.sparsity) {
        (Some(n), _) => inference::fit_with_support_size(&problem, n, &search_cfg)?,
        (None, Some(s)) => bench::find_gamma_for_sparsity(&problem, s, &search_cfg)?,
        (None, None) => return Err(Failure::Usage("give --sparsity or --nonzeros".into())),
    };
    let out = &args.out.out_dir;
    create_dir(out)?;
    solution_file(&search.solution, search.gamma, bundle.names()).save(&out.join("solution.toml"))?;
    println!(
        "gamma={:.12e} nnz={} target={} exact={} fits={}",
        search.gamma, search.nnz, search.target_nnz, search.exact, search.fits
    );
    Ok(())
}

fn bootstrap(args: BootstrapArgs) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let problem = bundle.to_problem(args.gamma, None)?;
    let config = BootstrapConfig {
        replicates: args.replicates,
        sample_size: (args.sample_size > 0).then_some(args.sample_size),
        seed: args.seed,
        solver: args.solver_args.config(),
        ..BootstrapConfig::default()
    };
    let result = inference::bootstrap_se(&problem, problem.gamma(), &config)?;
    let out = &args.out.out_dir;
    create_dir(out)?;
    let names = bundle.names();
    inference::write_report(&out.join("report.csv"), &names, &result.estimate.beta.beta, &result.se)?;
    for (k, name) in names.iter().enumerate() {
        let b = result.estimate.beta.beta[k];
        if b != 0.0 {
            println!("{name:<16} {b:>10.4} ({:.4})", result.se[k]);
        }
    }
    println!("replicates used {} dropped {}", result.used, result.dropped);
    Ok(())
}

fn validate(args: ValidateArgs) -> CmdResult {
    let bundle = load_bundle(&args.bundle)?;
    let plan = bundle.observed_plan()?;
    let report = preprocess::check_assumptions(&bundle.basis, &plan)?;
    let violations = report.violations();
    if violations.is_empty() {
        println!("ok: basis matrices are zero-sum and linearly independent");
        return Ok(());
    }
    Err(Failure::Data(violations.join("\n")))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Build(a) => build(a),
        Command::Fit(a) => fit(a),
        Command::Race(a) => race(a),
        Command::GammaSearch(a) => gamma_search(a),
        Command::Bootstrap(a) => bootstrap(a),
        Command::Validate(a) => validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(Failure::Unconverged(msg)) => {
            eprintln!("{msg}");
            ExitCode::from(EXIT_UNCONVERGED)
        }
    }
}

fn stop_label(stop: StopReason) -> &'static str {
    match stop {
        StopReason::Kkt => "kkt",
        StopReason::TargetGap => "target gap",
        StopReason::ObjectiveStalled => "objective stalled",
        StopReason::MaxIter => "iteration limit",
        StopReason::TimeLimit => "time limit",
        StopReason::BracketFailure => "bracket failure",
    }
}
